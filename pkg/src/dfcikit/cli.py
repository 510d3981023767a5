"""Command-line front-end: ``flow``, ``report`` and ``self-check``.

Exit codes: 0 success, 1 validation error, 2 computation error,
3 self-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from dfcikit import __version__, metrics, selfcheck
from dfcikit.errors import ComputationError, DfciKitError, ValidationError
from dfcikit.flow import FlowParams
from dfcikit.media_io import (
    MaskSequence,
    MetricReport,
    VideoFrames,
    flow_filename,
    load_frame_sequence,
    load_mask_sequence,
    save_flo,
    to_jsonable,
    write_report,
)

log = logging.getLogger("dfcikit")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_COMPUTATION = 2
EXIT_SELFCHECK = 3

CONVENTIONS = {
    "frame_index_origin": 0,
    "flow_direction": "source frame t-T toward target frame t",
    "flow_units": "pixels at native resolution, no normalization",
    "dfci_foreground": "ground-truth mask of the source frame t-T, no dilation",
    "dfci_empty_pairs": "skipped; normalizer uses the valid pair count",
    "dice_both_empty": 1.0,
    "psnr_cap_db": metrics.PSNR_CAP_DB,
    "psnr_masked": "foreground-masked PSNR, an approximation of PSNR*",
    "ssim": {"window": metrics.SSIM_WINDOW, "sigma": metrics.SSIM_SIGMA,
             "c1": metrics.SSIM_C1, "c2": metrics.SSIM_C2, "channel": "luma",
             "region": "valid"},
    "resampling": "none",
}


@dataclass
class RunSpec:
    gt_dir: str
    gen_dir: str
    mask_gt_dir: Optional[str] = None
    mask_gen_dir: Optional[str] = None
    horizons: tuple = (1, 2, 3, 4, 5)
    mode: str = "both"
    flow_source: str = "builtin"
    flows_gt_dir: Optional[str] = None
    flows_gen_dir: Optional[str] = None
    flow_params: FlowParams = field(default_factory=FlowParams)
    mask_threshold: int = 128
    out: Optional[str] = None
    format: str = "json"
    run_id: Optional[str] = None


@dataclass
class LoadedRun:
    spec: RunSpec
    config: metrics.DfciConfig
    gt: VideoFrames
    gen: VideoFrames
    masks_gt: Optional[MaskSequence]
    masks_gen: Optional[MaskSequence]


def parse_horizons(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError as exc:
        raise ValidationError(f"bad horizon list {text!r}") from exc


def _flow_params_from(ns) -> FlowParams:
    return FlowParams(
        pyramid_levels=ns.pyramid_levels,
        scale_factor=ns.scale_factor,
        smoothness_alpha=ns.alpha,
        iterations_per_level=ns.iterations,
        presmooth_sigma=ns.presmooth_sigma,
        warps_per_level=ns.warps,
    )


_SPEC_KEYS = {
    "gt": "gt_dir", "gen": "gen_dir", "masks_gt": "mask_gt_dir", "masks_gen": "mask_gen_dir",
    "horizons": "horizons", "mode": "mode", "flow": "flow_source", "flows_gt": "flows_gt_dir",
    "flows_gen": "flows_gen_dir", "mask_threshold": "mask_threshold", "out": "out",
    "format": "format", "run_id": "run_id",
}
_PARAM_KEYS = {"pyramid_levels", "scale_factor", "smoothness_alpha", "iterations_per_level",
               "presmooth_sigma", "warps_per_level"}


def runs_from_spec_file(path: str) -> list:
    """Parse a JSON run spec: one object or a list of objects using the flag names."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read run spec {path}: {exc}") from exc
    docs = doc if isinstance(doc, list) else doc.get("runs", [doc])
    runs = []
    for i, d in enumerate(docs):
        unknown = set(d) - set(_SPEC_KEYS) - {"flow_params"}
        if unknown:
            raise ValidationError(f"run {i}: unknown keys {sorted(unknown)}")
        if "gt" not in d or "gen" not in d:
            raise ValidationError(f"run {i}: 'gt' and 'gen' are required")
        kwargs = {_SPEC_KEYS[k]: v for k, v in d.items() if k in _SPEC_KEYS}
        if "horizons" in kwargs:
            kwargs["horizons"] = parse_horizons(kwargs["horizons"])
        params = d.get("flow_params", {})
        if set(params) - _PARAM_KEYS:
            raise ValidationError(f"run {i}: unknown flow params {sorted(set(params) - _PARAM_KEYS)}")
        kwargs["flow_params"] = FlowParams(**params)
        runs.append(RunSpec(**kwargs))
    if not runs:
        raise ValidationError("run spec lists no runs")
    return runs


def validate_run(spec: RunSpec, threads: int = 1) -> LoadedRun:
    """Load and cross-check every input of a run before any computation."""
    if spec.format not in ("json", "csv"):
        raise ValidationError(f"unsupported report format {spec.format!r}")
    config = metrics.DfciConfig(horizons=spec.horizons, modes=spec.mode,
                                flow_source=spec.flow_source)
    gt = load_frame_sequence(spec.gt_dir, threads)
    gen = load_frame_sequence(spec.gen_dir, threads)
    if len(gt) != len(gen):
        raise ValidationError(f"gt has {len(gt)} frames, gen has {len(gen)}")
    if (gt.height, gt.width) != (gen.height, gen.width):
        raise ValidationError(
            f"gt frames are {gt.height}x{gt.width}, gen frames are {gen.height}x{gen.width}"
        )
    config.check_length(len(gt))
    masks_gt = masks_gen = None
    if spec.mask_gt_dir is not None:
        masks_gt = load_mask_sequence(spec.mask_gt_dir, spec.mask_threshold, like=gt,
                                      threads=threads)
    if spec.mask_gen_dir is not None:
        masks_gen = load_mask_sequence(spec.mask_gen_dir, spec.mask_threshold, like=gen,
                                       threads=threads)
    if "foreground" in config.modes and masks_gt is None:
        raise ValidationError("foreground DFCI needs --masks-gt")
    if config.flow_source == "imported":
        if spec.flows_gt_dir is None or spec.flows_gen_dir is None:
            raise ValidationError("--flow imported needs --flows-gt and --flows-gen")
        for d in (spec.flows_gt_dir, spec.flows_gen_dir):
            for T in config.horizons:
                for t in range(T, len(gt)):
                    if not (Path(d) / flow_filename(T, t)).is_file():
                        raise ValidationError(f"missing imported flow {Path(d) / flow_filename(T, t)}")
    else:
        spec.flow_params.resolve(gt.height, gt.width)
    return LoadedRun(spec, config, gt, gen, masks_gt, masks_gen)


def evaluate(run: LoadedRun, threads: int = 1) -> MetricReport:
    spec, config = run.spec, run.config
    report = metrics.dfci_suite(
        run.gt, run.gen, run.masks_gt, config, spec.flow_params,
        flows_gt_dir=spec.flows_gt_dir, flows_gen_dir=spec.flows_gen_dir, threads=threads,
    )
    if run.masks_gt is not None and run.masks_gen is not None:
        report.set("silhouette", metrics.silhouette_consistency(run.masks_gt, run.masks_gen),
                   mode="foreground")
    report.set("l1", metrics.l1_metric(run.gt, run.gen))
    report.set("psnr", metrics.psnr(run.gt, run.gen))
    if run.masks_gt is not None and any(m.any() for m in run.masks_gt):
        report.set("psnr_masked", metrics.masked_psnr(run.gt, run.gen, run.masks_gt),
                   mode="foreground")
    report.set("ssim", metrics.ssim(run.gt, run.gen))

    meta = {
        "tool": "dfcikit",
        "version": __version__,
        "run_id": spec.run_id or Path(spec.gen_dir).name,
        "gt": str(spec.gt_dir),
        "gen": str(spec.gen_dir),
        "masks_gt": spec.mask_gt_dir,
        "masks_gen": spec.mask_gen_dir,
        "frames": len(run.gt),
        "height": run.gt.height,
        "width": run.gt.width,
        "horizons": list(config.horizons),
        "modes": list(config.modes),
        "flow_source": config.flow_source,
        "mask_threshold": spec.mask_threshold,
        "dfci_valid_pairs": report.metadata.pop("dfci_valid_pairs"),
        "conventions": CONVENTIONS,
    }
    if config.flow_source == "builtin":
        meta["flow_params"] = spec.flow_params.resolve(run.gt.height, run.gt.width).to_dict()
    else:
        meta["flows_gt"] = spec.flows_gt_dir
        meta["flows_gen"] = spec.flows_gen_dir
    report.metadata = to_jsonable(meta)
    return report


def _atomic_write(path: str, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def cmd_report(ns) -> int:
    if ns.spec:
        specs = runs_from_spec_file(ns.spec)
    else:
        if not ns.gt or not ns.gen:
            raise ValidationError("report needs --gt and --gen (or --spec)")
        specs = [RunSpec(
            gt_dir=ns.gt, gen_dir=ns.gen, mask_gt_dir=ns.masks_gt, mask_gen_dir=ns.masks_gen,
            horizons=parse_horizons(ns.horizons), mode=ns.mode, flow_source=ns.flow,
            flows_gt_dir=ns.flows_gt, flows_gen_dir=ns.flows_gen,
            flow_params=_flow_params_from(ns), mask_threshold=ns.mask_threshold,
            out=ns.out, format=ns.format, run_id=ns.run_id,
        )]
    # fail fast: every run validated before any flow is computed
    loaded = [validate_run(s, ns.threads) for s in specs]
    try:
        outputs = [(r.spec.out, write_report(evaluate(r, ns.threads), r.spec.format))
                   for r in loaded]
    except (ComputationError, ArithmeticError) as exc:
        log.error("computation failed: %s", exc)
        return EXIT_COMPUTATION
    for out, data in outputs:
        if out:
            _atomic_write(out, data)
        else:
            sys.stdout.buffer.write(data)
            sys.stdout.flush()
    return EXIT_OK


def cmd_flow(ns) -> int:
    video = load_frame_sequence(ns.frames, ns.threads)
    horizons = parse_horizons(ns.horizons)
    config = metrics.DfciConfig(horizons=horizons)
    config.check_length(len(video))
    params = _flow_params_from(ns).resolve(video.height, video.width)
    flows = metrics.compute_flows(video, horizons, params, ns.threads)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for T in horizons:
        for t, f in zip(range(T, len(video)), flows[T]):
            save_flo(out / flow_filename(T, t), f)
    log.info("wrote %d flow files to %s", sum(len(v) for v in flows.values()), out)
    return EXIT_OK


def cmd_self_check(ns) -> int:
    results = selfcheck.run_self_check(fault=ns.inject_fault)
    print(selfcheck.format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK


def _add_flow_args(p: argparse.ArgumentParser) -> None:
    d = FlowParams()
    g = p.add_argument_group("flow estimator")
    g.add_argument("--pyramid-levels", type=int, default=None,
                   help="default: floor(log2(min(H,W)/16)) + 1")
    g.add_argument("--scale-factor", type=float, default=d.scale_factor)
    g.add_argument("--alpha", type=float, default=d.smoothness_alpha,
                   help="smoothness weight on the 0..255 intensity scale")
    g.add_argument("--iterations", type=int, default=d.iterations_per_level)
    g.add_argument("--presmooth-sigma", type=float, default=d.presmooth_sigma)
    g.add_argument("--warps", type=int, default=d.warps_per_level)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfcikit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dfcikit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("report", help="evaluate a generated video against ground truth")
    p.add_argument("--gt", help="ground-truth frame directory or %%0Nd pattern")
    p.add_argument("--gen", help="generated frame directory or %%0Nd pattern")
    p.add_argument("--masks-gt")
    p.add_argument("--masks-gen")
    p.add_argument("--horizons", default="1,2,3,4,5")
    p.add_argument("--mode", choices=("fullframe", "foreground", "both"), default="both")
    p.add_argument("--flow", choices=("builtin", "imported"), default="builtin")
    p.add_argument("--flows-gt", help="directory of imported gt flows (flow_T{T}_{t:05d}.flo)")
    p.add_argument("--flows-gen", help="directory of imported gen flows")
    p.add_argument("--mask-threshold", type=int, default=128)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", help="output path (default stdout)")
    p.add_argument("--run-id")
    p.add_argument("--spec", help="JSON run spec (one run or a list) instead of flags")
    p.add_argument("--threads", type=int, default=1)
    _add_flow_args(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("flow", help="write builtin flows for every horizon pair")
    p.add_argument("--frames", required=True)
    p.add_argument("--horizons", default="1")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    _add_flow_args(p)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("self-check", help="run the oracle and gradient suites")
    p.add_argument("--inject-fault", choices=selfcheck.FAULTS, default=None,
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_self_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(ns, "threads", 1) < 1:
        log.error("--threads must be >= 1")
        return EXIT_VALIDATION
    try:
        return ns.func(ns)
    except ValidationError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except DfciKitError as exc:
        log.error("%s", exc)
        return EXIT_COMPUTATION


if __name__ == "__main__":
    sys.exit(main())
