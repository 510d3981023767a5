"""Deterministic synthetic frames, masks and flows for checks and demos."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from dfcikit.flow import bilinear_sample
from dfcikit.media_io import FlowField, MaskSequence, VideoFrames


def texture(height: int, width: int, seed: int = 0, sigma: float = 2.0) -> np.ndarray:
    """Band-limited periodic noise in [0, 1], safe to translate cyclically."""
    r = np.random.default_rng(seed).random((height, width))
    t = gaussian_filter(r, sigma, mode="wrap")
    return (t - t.min()) / (t.max() - t.min())


def to_rgb(gray: np.ndarray) -> np.ndarray:
    """Expand a grey image to three slightly different channels in [0, 1]."""
    g = np.asarray(gray, np.float64)
    return np.clip(np.stack([g, 0.9 * g + 0.05, 0.8 * g + 0.1], axis=2), 0.0, 1.0)


def shifted(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Cyclic shift so that ``out(p + (dx, dy)) == image(p)``."""
    return np.roll(image, shift=(dy, dx), axis=(0, 1))


def translating_video(height: int, width: int, length: int, dx: int, dy: int,
                      seed: int = 0) -> VideoFrames:
    base = texture(height, width, seed)
    return VideoFrames([to_rgb(shifted(base, dx * i, dy * i)) for i in range(length)])


def layered_scene(height: int, width: int, positions, box: int = 24,
                  seed: int = 0) -> tuple:
    """Static textured background with a moving textured square.

    ``positions`` lists the square's top-left corner (x, y) per frame and may
    be fractional; the foreground texture is sampled bilinearly. Returns
    ``(VideoFrames, MaskSequence)`` with the mask marking the square.
    """
    bg = texture(height, width, seed, sigma=2.0)
    fg = texture(box + 2, box + 2, seed + 1000, sigma=1.5)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    frames, masks = [], []
    for x, y in positions:
        inside = (xx >= x) & (xx < x + box) & (yy >= y) & (yy < y + box)
        sample = bilinear_sample(fg, yy - y + 1.0, xx - x + 1.0)
        img = np.where(inside, 0.25 + 0.75 * sample, 0.75 * bg)
        frames.append(to_rgb(img))
        masks.append(inside.astype(np.uint8))
    return VideoFrames(frames), MaskSequence(masks)


def random_flows(rng: np.random.Generator, count: int, height: int, width: int,
                 scale: float = 2.0) -> list:
    return [FlowField(rng.normal(0.0, scale, (height, width)),
                      rng.normal(0.0, scale, (height, width))) for _ in range(count)]


def random_masks(rng: np.random.Generator, count: int, height: int, width: int,
                 p: float = 0.4) -> MaskSequence:
    return MaskSequence([(rng.random((height, width)) < p).astype(np.uint8)
                         for _ in range(count)])
