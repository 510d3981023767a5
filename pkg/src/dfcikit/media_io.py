"""Frame/mask sequence loading, the Middlebury ``.flo`` codec and report serialization."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from dfcikit.errors import FormatError, ValidationError

PathLike = Union[str, os.PathLike]

FLO_MAGIC = 202021.25
FLO_HEADER = struct.Struct("<fii")

RASTER_SUFFIXES = (".ppm", ".pgm", ".pnm", ".png")
MODES = ("fullframe", "foreground")

# metric names that the writers derive from stored entries; readers drop them
DERIVED_METRICS = {"l1_e4": ("l1", 1e4)}


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VideoFrames:
    """Ordered same-sized RGB frames with values in [0, 1]."""

    frames: list

    def __post_init__(self):
        frames = [np.asarray(f, dtype=np.float64) for f in self.frames]
        if len(frames) < 2:
            raise ValidationError(f"a video needs at least 2 frames, got {len(frames)}")
        shape = frames[0].shape
        if len(shape) != 3 or shape[2] != 3:
            raise ValidationError(f"frames must be HxWx3, got shape {shape}")
        for i, f in enumerate(frames):
            if f.shape != shape:
                raise ValidationError(f"frame {i} has shape {f.shape}, expected {shape}")
            if not np.all(np.isfinite(f)) or f.min() < 0.0 or f.max() > 1.0:
                raise ValidationError(f"frame {i} has values outside [0, 1]")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]

    def as_array(self) -> np.ndarray:
        """Stack into an L x H x W x 3 array."""
        return np.stack(self.frames)


@dataclass(frozen=True)
class MaskSequence:
    """Per-frame binary foreground masks (1 = foreground, 0 = background)."""

    masks: list

    def __post_init__(self):
        masks = [np.asarray(m) for m in self.masks]
        if not masks:
            raise ValidationError("mask sequence is empty")
        shape = masks[0].shape
        if len(shape) != 2:
            raise ValidationError(f"masks must be HxW, got shape {shape}")
        out = []
        for i, m in enumerate(masks):
            if m.shape != shape:
                raise ValidationError(f"mask {i} has shape {m.shape}, expected {shape}")
            if not np.all((m == 0) | (m == 1)):
                raise ValidationError(f"mask {i} is not binary")
            out.append(m.astype(np.uint8))
        object.__setattr__(self, "masks", out)

    def __len__(self) -> int:
        return len(self.masks)

    def __getitem__(self, i):
        return self.masks[i]

    @property
    def shape(self) -> tuple:
        return self.masks[0].shape

    def check_aligned(self, frames: VideoFrames) -> None:
        if len(self) != len(frames):
            raise ValidationError(
                f"mask count {len(self)} does not match frame count {len(frames)}"
            )
        if self.shape != (frames.height, frames.width):
            raise ValidationError(
                f"mask size {self.shape} does not match frame size "
                f"{(frames.height, frames.width)}"
            )


@dataclass(frozen=True)
class FlowField:
    """Dense displacement field in pixels; ``u`` is horizontal, ``v`` vertical."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u)
        v = np.asarray(self.v)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValidationError(f"u {u.shape} and v {v.shape} must be equal 2-D arrays")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValidationError("flow field contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def shape(self) -> tuple:
        return self.u.shape

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.u, other.u)
            and np.array_equal(self.v, other.v)
        )

    __hash__ = None

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


EntryKey = tuple  # (metric, T or None, mode)


@dataclass
class MetricReport:
    """Metric values keyed by ``(metric, horizon, mode)`` plus run metadata."""

    entries: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def set(self, metric: str, value: float, T: Optional[int] = None,
            mode: str = "fullframe") -> None:
        if mode not in MODES:
            raise ValidationError(f"unknown masking mode {mode!r}")
        self.entries[(metric, None if T is None else int(T), mode)] = float(value)

    def get(self, metric: str, T: Optional[int] = None, mode: str = "fullframe") -> float:
        return self.entries[(metric, T, mode)]

    def sorted_entries(self) -> list:
        return sorted(self.entries.items(), key=lambda kv: _entry_sort_key(kv[0]))

    def __eq__(self, other):
        if not isinstance(other, MetricReport):
            return NotImplemented
        return self.entries == other.entries and self.metadata == other.metadata


def _entry_sort_key(key: EntryKey):
    metric, T, mode = key
    return (metric, -1 if T is None else T, mode)


# ---------------------------------------------------------------------------
# Netpbm / PNG rasters
# ---------------------------------------------------------------------------

_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _decode_pnm(data: bytes, name: str = "<bytes>") -> tuple:
    """Return (uint array, maxval). Colour images are HxWx3, grey HxW."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = _PNM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"{name}: truncated netpbm header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"{name}: unsupported netpbm type {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError(f"{name}: malformed netpbm header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{name}: invalid netpbm dimensions or maxval")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * channels
    if magic in (b"P5", b"P6"):
        # exactly one whitespace byte separates header from raster
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        nbytes = count * dtype.itemsize
        if len(data) < pos + nbytes:
            raise FormatError(f"{name}: truncated netpbm raster")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.uint16)
    else:
        values = data[pos:].split()
        if len(values) < count:
            raise FormatError(f"{name}: truncated netpbm raster")
        arr = np.array([int(x) for x in values[:count]], dtype=np.uint16)
    if arr.max(initial=0) > maxval:
        raise FormatError(f"{name}: sample exceeds maxval")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape), maxval


def _encode_pnm(arr: np.ndarray, maxval: int = 255) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValidationError(f"cannot encode array of shape {arr.shape} as netpbm")
    h, w = arr.shape[:2]
    dtype = ">u2" if maxval > 255 else "u1"
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def read_raster(path: PathLike) -> tuple:
    """Decode a PPM/PGM (or PNG, if Pillow is installed) into (samples, maxval)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ValidationError("PNG input requires Pillow (pip install dfcikit[png])") from exc
        try:
            with Image.open(io.BytesIO(data)) as img:
                if img.mode not in ("L", "RGB"):
                    img = img.convert("RGB")
                return np.asarray(img).astype(np.uint16), 255
        except OSError as exc:
            raise FormatError(f"{path}: undecodable PNG") from exc
    return _decode_pnm(data, str(path))


def write_raster(path: PathLike, arr: np.ndarray, maxval: int = 255) -> None:
    Path(path).write_bytes(_encode_pnm(arr, maxval))


def frame_to_uint8(frame: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] frame back to 8 bits (round-to-nearest)."""
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Sequence discovery
# ---------------------------------------------------------------------------

_PRINTF = re.compile(r"%0?(\d*)d")


def resolve_sequence(pattern: PathLike) -> list:
    """Resolve a directory or a ``%0Nd`` pattern into an index-ordered file list.

    Raises ValidationError when nothing matches, two files share an index,
    or the indices are not contiguous.
    """
    pattern = str(pattern)
    if os.path.isdir(pattern):
        directory = Path(pattern)
        regex = re.compile(r"^(?:.*?)(\d+)(" + "|".join(map(re.escape, RASTER_SUFFIXES)) + r")$",
                           re.IGNORECASE)
    else:
        directory = Path(pattern).parent
        name = Path(pattern).name
        m = _PRINTF.search(name)
        if m is None:
            raise ValidationError(f"{pattern!r} is neither a directory nor a %0Nd pattern")
        width = m.group(1)
        digits = r"(\d{%s})" % width if width else r"(\d+)"
        regex = re.compile(
            "^" + re.escape(name[: m.start()]) + digits + re.escape(name[m.end():]) + "$"
        )
        if not directory.is_dir():
            raise ValidationError(f"directory {directory} does not exist")
    indexed = {}
    for entry in sorted(os.listdir(directory)):
        match = regex.match(entry)
        if match is None or not (directory / entry).is_file():
            continue
        idx = int(match.group(1))
        if idx in indexed:
            raise ValidationError(
                f"duplicate frame index {idx}: {indexed[idx].name} and {entry}"
            )
        indexed[idx] = directory / entry
    if not indexed:
        raise ValidationError(f"no frames found for {pattern!r}")
    order = sorted(indexed)
    expected = list(range(order[0], order[0] + len(order)))
    if order != expected:
        missing = sorted(set(expected) - set(order))
        first_gap = missing[0] if missing else order[-1]
        raise ValidationError(f"non-contiguous sequence in {pattern!r}: index {first_gap} missing")
    return [indexed[i] for i in order]


def _map_ordered(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _load_frame(path: Path) -> np.ndarray:
    samples, maxval = read_raster(path)
    frame = samples.astype(np.float64) / float(maxval)
    if frame.ndim == 2:
        frame = np.repeat(frame[:, :, None], 3, axis=2)
    return frame


def load_frame_sequence(pattern: PathLike, threads: int = 1) -> VideoFrames:
    """Load an ordered RGB frame sequence scaled to [0, 1].

    ``pattern`` is a directory (files ordered by their trailing frame number)
    or a printf pattern such as ``frames/%05d.ppm``. Grey images are expanded
    to three equal channels.
    """
    paths = resolve_sequence(pattern)
    if len(paths) < 2:
        raise ValidationError(f"need at least 2 frames, found {len(paths)} for {pattern!r}")
    frames = _map_ordered(_load_frame, paths, threads)
    shape = frames[0].shape
    for p, f in zip(paths, frames):
        if f.shape != shape:
            raise ValidationError(f"{p.name} has size {f.shape[:2]}, expected {shape[:2]}")
    return VideoFrames(frames)


def load_mask_sequence(pattern: PathLike, threshold: int = 128,
                       like: Optional[VideoFrames] = None, threads: int = 1) -> MaskSequence:
    """Load grey mask rasters and binarize them as ``pixel >= threshold``.

    When ``like`` is given the masks must match its frame count and size.
    """
    paths = resolve_sequence(pattern)

    def load(path):
        samples, _ = read_raster(path)
        if samples.ndim != 2:
            raise ValidationError(f"{path.name}: masks must be single-channel grey images")
        return (samples >= threshold).astype(np.uint8)

    masks = _map_ordered(load, paths, threads)
    shape = masks[0].shape
    for p, m in zip(paths, masks):
        if m.shape != shape:
            raise ValidationError(f"{p.name} has size {m.shape}, expected {shape}")
    seq = MaskSequence(masks)
    if like is not None:
        seq.check_aligned(like)
    return seq


def save_frame_sequence(frames: Union[VideoFrames, Sequence[np.ndarray]], directory: PathLike,
                        pattern: str = "%05d.ppm", start: int = 0) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        path = directory / (pattern % (start + i))
        write_raster(path, frame_to_uint8(frame))
        paths.append(path)
    return paths


def save_mask_sequence(masks: Union[MaskSequence, Sequence[np.ndarray]], directory: PathLike,
                       pattern: str = "%05d.pgm", start: int = 0) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, mask in enumerate(masks):
        path = directory / (pattern % (start + i))
        write_raster(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------


def read_flo(data: bytes) -> FlowField:
    """Decode a Middlebury ``.flo`` byte stream (float32, no rescaling)."""
    if len(data) < FLO_HEADER.size:
        raise FormatError("truncated .flo header")
    magic, width, height = FLO_HEADER.unpack_from(data, 0)
    if magic != FLO_MAGIC:
        raise FormatError(f"bad magic {magic!r} in .flo stream")
    if width <= 0 or height <= 0:
        raise FormatError(f"non-positive .flo dimensions {width}x{height}")
    n = 2 * width * height
    if len(data) - FLO_HEADER.size < 4 * n:
        raise FormatError(
            f"truncated .flo payload: need {4 * n} bytes, have {len(data) - FLO_HEADER.size}"
        )
    payload = np.frombuffer(data, dtype="<f4", count=n, offset=FLO_HEADER.size)
    payload = payload.reshape(height, width, 2).astype(np.float32)
    return FlowField(payload[:, :, 0].copy(), payload[:, :, 1].copy())


def write_flo(flow: FlowField) -> bytes:
    """Encode a flow field as Middlebury ``.flo`` (values are stored as float32)."""
    u = np.asarray(flow.u)
    v = np.asarray(flow.v)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValidationError("cannot encode non-finite flow values")
    height, width = u.shape
    payload = np.empty((height, width, 2), dtype="<f4")
    payload[:, :, 0] = u
    payload[:, :, 1] = v
    return FLO_HEADER.pack(FLO_MAGIC, width, height) + payload.tobytes()


def load_flo(path: PathLike) -> FlowField:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read flow file {path}: {exc}") from exc
    return read_flo(data)


def save_flo(path: PathLike, flow: FlowField) -> None:
    Path(path).write_bytes(write_flo(flow))


def flow_filename(T: int, t: int) -> str:
    """Name of the imported/exported flow for the pair (t - T, t)."""
    return f"flow_T{T}_{t:05d}.flo"


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _csv_columns(horizons: Iterable[int]) -> list:
    horizons = sorted(set(horizons))
    cols = ["run_id"]
    cols += [f"dfci_fg_T{T}" for T in horizons]
    cols += [f"dfci_full_T{T}" for T in horizons]
    cols += ["silhouette", "l1", "l1_e4", "psnr", "psnr_masked", "ssim"]
    return cols


def _column_for(key: EntryKey) -> str:
    metric, T, mode = key
    if metric == "dfci":
        return f"dfci_{'fg' if mode == 'foreground' else 'full'}_T{T}"
    return metric


def _key_for_column(col: str) -> EntryKey:
    m = re.fullmatch(r"dfci_(fg|full)_T(\d+)", col)
    if m:
        return ("dfci", int(m.group(2)), "foreground" if m.group(1) == "fg" else "fullframe")
    mode = "foreground" if col in ("silhouette", "psnr_masked") else "fullframe"
    return (col, None, mode)


def _fmt(value: float) -> str:
    return repr(float(value))


def _json_entries(report: MetricReport) -> list:
    out = []
    for (metric, T, mode), value in report.sorted_entries():
        out.append({"metric": metric, "T": T, "mode": mode, "value": float(value)})
        for derived, (source, scale) in DERIVED_METRICS.items():
            if metric == source:
                out.append({"metric": derived, "T": T, "mode": mode,
                            "value": float(value) * scale, "derived": True})
    return out


def write_report(report: MetricReport, format: str = "json") -> bytes:
    """Serialize a report deterministically as ``json`` or ``csv`` bytes."""
    if format == "json":
        doc = {"metadata": report.metadata, "entries": _json_entries(report)}
        text = json.dumps(doc, sort_keys=True, indent=2, allow_nan=False)
        return (text + "\n").encode("utf-8")
    if format == "csv":
        return write_reports_csv([report])
    raise ValidationError(f"unsupported report format {format!r}")


def write_reports_csv(reports: Sequence[MetricReport]) -> bytes:
    """One CSV row per report; DFCI columns cover the union of horizons."""
    horizons = {k[1] for r in reports for k in r.entries if k[0] == "dfci"}
    cols = _csv_columns(horizons)
    known = set(cols)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for i, report in enumerate(reports):
        row = dict.fromkeys(cols, "")
        row["run_id"] = str(report.metadata.get("run_id", f"run{i}"))
        for key, value in report.entries.items():
            col = _column_for(key)
            if col not in known:
                raise ValidationError(f"entry {key} has no CSV column")
            row[col] = _fmt(value)
            if key[0] == "l1":
                row["l1_e4"] = _fmt(value * DERIVED_METRICS["l1_e4"][1])
        writer.writerow([row[c] for c in cols])
    return buf.getvalue().encode("utf-8")


def read_report(data: bytes, format: str = "json") -> MetricReport:
    """Parse bytes produced by :func:`write_report`; derived columns are dropped."""
    text = data.decode("utf-8")
    if format == "json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid report JSON: {exc}") from exc
        if not isinstance(doc, dict) or "entries" not in doc:
            raise FormatError("report JSON needs an 'entries' field")
        report = MetricReport(metadata=doc.get("metadata", {}))
        for e in doc["entries"]:
            if e.get("derived"):
                continue
            report.set(e["metric"], e["value"], e.get("T"), e.get("mode", "fullframe"))
        return report
    if format == "csv":
        rows = list(csv.DictReader(io.StringIO(text)))
        if len(rows) != 1:
            raise FormatError(f"expected exactly one CSV row, found {len(rows)}")
        row = rows[0]
        report = MetricReport(metadata={"run_id": row.pop("run_id")})
        for col, cell in row.items():
            if cell == "" or col in DERIVED_METRICS:
                continue
            metric, T, mode = _key_for_column(col)
            report.set(metric, float(cell), T, mode)
        return report
    raise ValidationError(f"unsupported report format {format!r}")


def significant_equal(a: float, b: float, digits: int = 9) -> bool:
    """True when a and b agree to ``digits`` significant digits."""
    return a == b or math.isclose(a, b, rel_tol=0.5 * 10 ** (1 - digits), abs_tol=0.0)


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples in metadata to plain JSON types."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value
