"""Coarse-to-fine Horn-Schunck optical flow, bilinear warping and endpoint error.

Flow maps source pixels toward the destination frame, so that
``src(p) ~= dst(p + flow(p))``. Intensities are processed on luma rescaled to
0..255, the range on which the classic smoothness weight of 15 is defined.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from dfcikit.errors import ValidationError
from dfcikit.media_io import FlowField

MIN_LEVEL_SIZE = 16
INTENSITY_SCALE = 255.0

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class FlowParams:
    """Horn-Schunck settings.

    ``pyramid_levels=None`` selects ``floor(log_{1/s}(min(H, W) / 16)) + 1``
    for the image at hand; :meth:`resolve` returns the concrete value.
    ``warps_per_level`` re-linearizes the brightness constancy term around the
    current estimate; the ``iterations_per_level`` Jacobi sweeps are split
    evenly between the warps.
    """

    pyramid_levels: Optional[int] = None
    scale_factor: float = 0.5
    smoothness_alpha: float = 15.0
    iterations_per_level: int = 100
    presmooth_sigma: float = 0.8
    warps_per_level: int = 3

    def __post_init__(self):
        if self.pyramid_levels is not None and self.pyramid_levels < 1:
            raise ValidationError("pyramid_levels must be >= 1")
        if not 0.0 < self.scale_factor < 1.0:
            raise ValidationError("scale_factor must lie in (0, 1)")
        if not self.smoothness_alpha > 0.0:
            raise ValidationError("smoothness_alpha must be > 0")
        if self.iterations_per_level < 1:
            raise ValidationError("iterations_per_level must be >= 1")
        if self.presmooth_sigma < 0.0:
            raise ValidationError("presmooth_sigma must be >= 0")
        if not 1 <= self.warps_per_level <= self.iterations_per_level:
            raise ValidationError("warps_per_level must be in [1, iterations_per_level]")

    def resolve(self, height: int, width: int) -> "FlowParams":
        """Fix ``pyramid_levels`` for an image and check the coarsest level size."""
        shortest = min(height, width)
        if shortest < MIN_LEVEL_SIZE:
            raise ValidationError(
                f"frame {height}x{width} is smaller than the {MIN_LEVEL_SIZE}px coarsest level"
            )
        levels = self.pyramid_levels
        if levels is None:
            levels = int(math.floor(math.log(shortest / MIN_LEVEL_SIZE)
                                    / math.log(1.0 / self.scale_factor) + 1e-9)) + 1
        sizes = pyramid_sizes(height, width, levels, self.scale_factor)
        if min(sizes[-1]) < MIN_LEVEL_SIZE:
            raise ValidationError(
                f"coarsest pyramid level {sizes[-1]} is smaller than "
                f"{MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}; reduce pyramid_levels"
            )
        return replace(self, pyramid_levels=levels)

    def to_dict(self) -> dict:
        return asdict(self)


def pyramid_sizes(height: int, width: int, levels: int, scale: float) -> list:
    sizes = [(height, width)]
    for k in range(1, levels):
        sizes.append((max(1, int(round(height * scale ** k))),
                      max(1, int(round(width * scale ** k)))))
    return sizes


def to_luma(frame: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an HxWx3 frame; a 2-D input is returned unchanged."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValidationError(f"expected HxWx3 frame, got shape {frame.shape}")
    return frame @ LUMA_WEIGHTS


def bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = image.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2) if w > 1 else np.zeros(xs.shape, np.intp)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2) if h > 1 else np.zeros(ys.shape, np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = image[y0, x0] * (1.0 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1.0 - fx) + image[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def _warp_array(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return bilinear_sample(image, yy + v, xx + u)


def warp(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """Sample ``image(p + flow(p))`` bilinearly with border clamping."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape != flow.shape:
        raise ValidationError(f"image {image.shape} and flow {flow.shape} must match")
    return _warp_array(image, np.asarray(flow.u, np.float64), np.asarray(flow.v, np.float64))


def _resize(image: np.ndarray, shape: tuple) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment."""
    h, w = image.shape
    nh, nw = shape
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(image, yy, xx)


def _downsample(image: np.ndarray, shape: tuple, scale: float) -> np.ndarray:
    sigma = 0.5 * math.sqrt(1.0 / scale ** 2 - 1.0)
    return _resize(gaussian_filter(image, sigma, mode="nearest"), shape)


def _gradients(image: np.ndarray) -> tuple:
    """Central differences with replicated edges."""
    p = np.pad(image, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def _neighbour_average(field: np.ndarray) -> np.ndarray:
    """Horn-Schunck Laplacian weights (1/6 edge, 1/12 corner), replicated edges."""
    p = np.pad(field, 1, mode="edge")
    edges = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]
    corners = p[:-2, :-2] + p[:-2, 2:] + p[2:, :-2] + p[2:, 2:]
    return edges / 6.0 + corners / 12.0


def _refine_level(i1: np.ndarray, i2: np.ndarray, u: np.ndarray, v: np.ndarray,
                  alpha2: float, iterations: int, warps: int) -> tuple:
    sweeps = [iterations // warps + (1 if k < iterations % warps else 0) for k in range(warps)]
    for n in sweeps:
        i2w = _warp_array(i2, u, v)
        ix, iy = _gradients(0.5 * (i1 + i2w))
        it = i2w - i1
        u0, v0 = u, v
        # residual at the linearization point, constant during the sweeps
        base = it - ix * u0 - iy * v0
        denom = alpha2 + ix * ix + iy * iy
        for _ in range(n):
            ubar = _neighbour_average(u)
            vbar = _neighbour_average(v)
            r = (ix * ubar + iy * vbar + base) / denom
            u = ubar - ix * r
            v = vbar - iy * r
    return u, v


def estimate_flow(src: np.ndarray, dst: np.ndarray,
                  params: Optional[FlowParams] = None) -> FlowField:
    """Dense flow from ``src`` toward ``dst`` (RGB frames or luma images)."""
    params = params or FlowParams()
    i1 = to_luma(src)
    i2 = to_luma(dst)
    if i1.shape != i2.shape:
        raise ValidationError(f"frame sizes differ: {i1.shape} vs {i2.shape}")
    params = params.resolve(*i1.shape)
    if params.presmooth_sigma > 0.0:
        i1 = gaussian_filter(i1, params.presmooth_sigma, mode="nearest")
        i2 = gaussian_filter(i2, params.presmooth_sigma, mode="nearest")
    i1 = i1 * INTENSITY_SCALE
    i2 = i2 * INTENSITY_SCALE

    sizes = pyramid_sizes(*i1.shape, params.pyramid_levels, params.scale_factor)
    pyr1, pyr2 = [i1], [i2]
    for shape in sizes[1:]:
        pyr1.append(_downsample(pyr1[-1], shape, params.scale_factor))
        pyr2.append(_downsample(pyr2[-1], shape, params.scale_factor))

    alpha2 = params.smoothness_alpha ** 2
    u = np.zeros(sizes[-1])
    v = np.zeros(sizes[-1])
    for level in range(len(sizes) - 1, -1, -1):
        shape = sizes[level]
        if u.shape != shape:
            sy = shape[0] / u.shape[0]
            sx = shape[1] / u.shape[1]
            u = _resize(u, shape) * sx
            v = _resize(v, shape) * sy
        u, v = _refine_level(pyr1[level], pyr2[level], u, v, alpha2,
                             params.iterations_per_level, params.warps_per_level)
    return FlowField(u, v)


def endpoint_error(a: FlowField, b: FlowField, mask: Optional[np.ndarray] = None) -> float:
    """Mean Euclidean distance between two flows, optionally over a mask."""
    if a.shape != b.shape:
        raise ValidationError(f"flow shapes differ: {a.shape} vs {b.shape}")
    err = np.hypot(np.asarray(a.u, np.float64) - b.u, np.asarray(a.v, np.float64) - b.v)
    if mask is None:
        return float(err.mean())
    mask = np.asarray(mask)
    if mask.shape != a.shape:
        raise ValidationError(f"mask shape {mask.shape} does not match flow {a.shape}")
    sel = mask.astype(bool)
    if not sel.any():
        raise ValidationError("endpoint error over an empty selection")
    return float(err[sel].mean())
