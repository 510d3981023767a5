"""Video comparison metrics.

DFCI compares ground-truth and generated optical flow at a temporal horizon
``T``; silhouette consistency averages per-frame Dice overlap of foreground
masks. L1, PSNR, foreground-masked PSNR and SSIM follow their usual
definitions on the [0, 1] intensity scale.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from dfcikit.errors import ValidationError
from dfcikit.flow import FlowParams, estimate_flow, to_luma
from dfcikit.media_io import (
    MODES,
    FlowField,
    MaskSequence,
    MetricReport,
    VideoFrames,
    flow_filename,
    load_flo,
)

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# ---------------------------------------------------------------------------
# DFCI
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DfciConfig:
    horizons: tuple = (1, 2, 3, 4, 5)
    modes: tuple = MODES
    flow_source: str = "builtin"

    def __post_init__(self):
        horizons = tuple(int(T) for T in self.horizons)
        if not horizons or min(horizons) < 1:
            raise ValidationError(f"horizons must be integers >= 1, got {self.horizons}")
        if len(set(horizons)) != len(horizons):
            raise ValidationError(f"duplicate horizons in {self.horizons}")
        modes = (self.modes,) if isinstance(self.modes, str) else tuple(self.modes)
        if modes == ("both",):
            modes = MODES
        for m in modes:
            if m not in MODES:
                raise ValidationError(f"unknown DFCI mode {m!r}")
        if self.flow_source not in ("builtin", "imported"):
            raise ValidationError(f"unknown flow source {self.flow_source!r}")
        object.__setattr__(self, "horizons", horizons)
        object.__setattr__(self, "modes", modes)

    def check_length(self, L: int) -> None:
        for T in self.horizons:
            if T > L - 1:
                raise ValidationError(f"horizon exceeds sequence: T={T} needs more than {L} frames")


@dataclass(frozen=True)
class DfciResult:
    T: int
    value: float
    valid_pairs: int
    pair_errors: list = field(default_factory=list)


def _pair_error(gt: FlowField, gen: FlowField, sel: Optional[np.ndarray]) -> float:
    """Mean of ``|du| + |dv|`` over ``sel`` (all pixels if None); NaN when empty."""
    diff = np.abs(np.asarray(gt.u, np.float64) - gen.u) + np.abs(np.asarray(gt.v, np.float64) - gen.v)
    if sel is None:
        return float(diff.mean())
    count = int(np.count_nonzero(sel))
    if count == 0:
        return math.nan
    return float(diff[sel].sum() / count)


def dfci(flows_gt: Sequence[FlowField], flows_gen: Sequence[FlowField],
         masks: Optional[MaskSequence] = None, T: int = 1) -> DfciResult:
    """Dynamic Flow Consistency Index at horizon ``T``.

    ``flows_*[i]`` is the flow from frame ``i`` to frame ``i + T``. The
    per-pair error is the pixel mean of ``|du| + |dv|`` over the full grid,
    or, when ``masks`` is given, over the ground-truth foreground of the
    source frame ``i``. Pairs with an empty foreground are skipped and the
    result is ``sum(errors) / (2 * valid_pairs)``.
    """
    if T < 1:
        raise ValidationError(f"horizon must be >= 1, got {T}")
    if len(flows_gt) != len(flows_gen):
        raise ValidationError(
            f"flow list lengths differ: {len(flows_gt)} gt vs {len(flows_gen)} gen"
        )
    if not flows_gt:
        raise ValidationError("no flow pairs to compare")
    shape = flows_gt[0].shape
    for a, b in zip(flows_gt, flows_gen):
        if a.shape != shape or b.shape != shape:
            raise ValidationError("all flow fields must share one size")
    if masks is not None:
        L = len(masks)
        if T >= L:
            raise ValidationError(f"horizon exceeds sequence: T={T} with {L} frames")
        if len(flows_gt) != L - T:
            raise ValidationError(f"expected {L - T} flow pairs for T={T}, got {len(flows_gt)}")
        if masks.shape != shape:
            raise ValidationError(f"mask size {masks.shape} does not match flow size {shape}")

    errors = []
    for i, (a, b) in enumerate(zip(flows_gt, flows_gen)):
        sel = None if masks is None else masks[i].astype(bool)
        errors.append(_pair_error(a, b, sel))
    valid = [e for e in errors if not math.isnan(e)]
    if not valid:
        raise ValidationError(f"every pair has an empty foreground at T={T}")
    # fixed ascending order keeps the sum reproducible
    total = math.fsum(valid)
    return DfciResult(T=T, value=total / (2.0 * len(valid)), valid_pairs=len(valid),
                      pair_errors=errors)


def flow_pairs(video: VideoFrames, T: int) -> list:
    """Frame index pairs ``(t - T, t)`` for ``t = T .. L-1``."""
    return [(t - T, t) for t in range(T, len(video))]


def compute_flows(video: VideoFrames, horizons: Sequence[int],
                  params: Optional[FlowParams] = None, threads: int = 1) -> dict:
    """Builtin flows for every horizon: ``{T: [FlowField per pair]}``."""
    params = (params or FlowParams()).resolve(video.height, video.width)
    return compute_flows_multi([video], horizons, params, threads)[0]


def load_imported_flows(directory, L: int, horizons: Sequence[int], shape: tuple) -> dict:
    """Read ``flow_T{T}_{t:05d}.flo`` files for every pair; sizes must equal ``shape``."""
    directory = Path(directory)
    missing = [directory / flow_filename(T, t)
               for T in horizons for t in range(T, L)
               if not (directory / flow_filename(T, t)).is_file()]
    if missing:
        raise ValidationError(f"missing imported flow file {missing[0]}"
                              + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    out = {}
    for T in horizons:
        flows = []
        for t in range(T, L):
            f = load_flo(directory / flow_filename(T, t))
            if f.shape != shape:
                raise ValidationError(
                    f"{flow_filename(T, t)} is {f.shape}, frames are {shape}; no resampling is done"
                )
            flows.append(f)
        out[T] = flows
    return out


def dfci_suite(gt: VideoFrames, gen: VideoFrames, masks: Optional[MaskSequence] = None,
               config: Optional[DfciConfig] = None, params: Optional[FlowParams] = None,
               flows_gt_dir=None, flows_gen_dir=None, threads: int = 1) -> MetricReport:
    """DFCI for every (horizon, mode) in ``config``.

    ``masks`` are the ground-truth foreground masks, required for the
    foreground mode. Imported flows are read from ``flows_gt_dir`` and
    ``flows_gen_dir``; builtin flows use the same ``params`` for both videos.
    """
    config = config or DfciConfig()
    if len(gt) != len(gen) or (gt.height, gt.width) != (gen.height, gen.width):
        raise ValidationError(
            f"gt {len(gt)}x{gt.height}x{gt.width} and gen "
            f"{len(gen)}x{gen.height}x{gen.width} differ; no implicit resampling"
        )
    config.check_length(len(gt))
    if "foreground" in config.modes:
        if masks is None:
            raise ValidationError("foreground mode needs ground-truth masks")
        masks.check_aligned(gt)

    shape = (gt.height, gt.width)
    if config.flow_source == "imported":
        if flows_gt_dir is None or flows_gen_dir is None:
            raise ValidationError("imported flow source needs gt and gen flow directories")
        fg = load_imported_flows(flows_gt_dir, len(gt), config.horizons, shape)
        fn = load_imported_flows(flows_gen_dir, len(gen), config.horizons, shape)
    else:
        params = (params or FlowParams()).resolve(*shape)
        fg, fn = compute_flows_multi([gt, gen], config.horizons, params, threads)

    report = MetricReport()
    pairs = {}
    for T in config.horizons:
        for mode in config.modes:
            res = dfci(fg[T], fn[T], masks if mode == "foreground" else None, T)
            report.set("dfci", res.value, T, mode)
            pairs[f"{mode}_T{T}"] = res.valid_pairs
    report.metadata["dfci_valid_pairs"] = pairs
    return report


def compute_flows_multi(videos: Sequence[VideoFrames], horizons: Sequence[int],
                        params: FlowParams, threads: int = 1) -> list:
    """Like :func:`compute_flows` for several videos sharing one worker pool."""
    items = [(k, T, s, t) for k, video in enumerate(videos)
             for T in horizons for s, t in flow_pairs(video, T)]

    def work(item):
        k, _, s, t = item
        return estimate_flow(videos[k][s], videos[k][t], params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(x) for x in items]
    out = [{T: [] for T in horizons} for _ in videos]
    for (k, T, _, _), f in zip(items, results):
        out[k][T].append(f)
    return out


# ---------------------------------------------------------------------------
# Silhouettes
# ---------------------------------------------------------------------------


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap ``2|a & b| / (|a| + |b|)``; two empty masks score 1.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def silhouette_consistency(gt_masks: MaskSequence, gen_masks: MaskSequence) -> float:
    if len(gt_masks) != len(gen_masks):
        raise ValidationError(
            f"mask sequence lengths differ: {len(gt_masks)} vs {len(gen_masks)}"
        )
    if gt_masks.shape != gen_masks.shape:
        raise ValidationError(f"mask sizes differ: {gt_masks.shape} vs {gen_masks.shape}")
    scores = [dice(a, b) for a, b in zip(gt_masks, gen_masks)]
    return math.fsum(scores) / len(scores)


# ---------------------------------------------------------------------------
# Classical frame metrics
# ---------------------------------------------------------------------------


def _check_pair(gt: VideoFrames, gen: VideoFrames) -> None:
    if len(gt) != len(gen) or gt[0].shape != gen[0].shape:
        raise ValidationError(
            f"video shapes differ: {len(gt)}x{gt[0].shape} vs {len(gen)}x{gen[0].shape}"
        )


def l1_metric(gt: VideoFrames, gen: VideoFrames) -> float:
    """Mean absolute difference over frames, pixels and channels."""
    _check_pair(gt, gen)
    per_frame = [float(np.abs(a - b).mean()) for a, b in zip(gt, gen)]
    return math.fsum(per_frame) / len(per_frame)


def _psnr_from_mse(mse: float) -> float:
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def psnr(gt: VideoFrames, gen: VideoFrames) -> float:
    """Per-frame PSNR (peak 1.0, capped at 100 dB) averaged over frames."""
    _check_pair(gt, gen)
    values = [_psnr_from_mse(float(np.mean((a - b) ** 2))) for a, b in zip(gt, gen)]
    return math.fsum(values) / len(values)


def masked_psnr(gt: VideoFrames, gen: VideoFrames, masks: MaskSequence) -> float:
    """PSNR with the squared error restricted to foreground pixels.

    Frames whose mask is empty are left out of the average.
    """
    _check_pair(gt, gen)
    masks.check_aligned(gt)
    values = []
    for a, b, m in zip(gt, gen, masks):
        sel = m.astype(bool)
        if not sel.any():
            continue
        values.append(_psnr_from_mse(float(np.mean((a[sel] - b[sel]) ** 2))))
    if not values:
        raise ValidationError("masked PSNR needs at least one non-empty mask")
    return math.fsum(values) / len(values)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(image: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    h, w = image.shape
    rows = sum(g[i] * image[:, i:w - k + 1 + i] for i in range(k))
    return sum(g[i] * rows[i:h - k + 1 + i, :] for i in range(k))


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """SSIM map of two grey images on the [0, 1] scale (valid region only)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValidationError(f"frame {x.shape} is smaller than the {SSIM_WINDOW}px SSIM window")
    g = gaussian_window()
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(gt: VideoFrames, gen: VideoFrames) -> float:
    """Mean luma SSIM (11x11 Gaussian window, sigma 1.5) averaged over frames."""
    _check_pair(gt, gen)
    values = [float(ssim_map(to_luma(a), to_luma(b)).mean()) for a, b in zip(gt, gen)]
    return math.fsum(values) / len(values)
