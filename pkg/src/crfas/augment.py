"""Deterministic, seedable view augmentation.

All operations act on (C, H, W) float arrays with values in [0, 1] and
are pure given their parameters; the only randomness lives in
`compose_views`, which draws every parameter from a stream keyed on
(seed, sample_id, view_index). Pipeline order is fixed:
crop -> color -> flip -> cutout -> (blur, off by default) -> patch shuffle,
so the tile shuffle runs last and earlier draws do not depend on it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


PIPELINE_ORDER = ("crop", "color", "flip", "cutout", "blur", "psa")


@dataclass
class AugmentConfig:
    crop: bool = True
    crop_scale: tuple[float, float] = (0.8, 1.0)
    color: bool = True
    color_mult: float = 0.2
    color_add: float = 0.1
    flip: bool = True
    flip_p: float = 0.5
    cutout: bool = True
    cutout_frac: float = 0.25
    cutout_fill: float = 0.0
    psa: bool = True
    psa_grid: int = 3
    blur: bool = False
    blur_sigma: float = 1.0

    def validate(self, side: int) -> None:
        if self.psa and side % self.psa_grid:
            raise ValueError(f"image side {side} not divisible by patch grid {self.psa_grid}")
        if not (0.0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0):
            raise ValueError(f"bad crop scale range {self.crop_scale}")

    def to_dict(self) -> dict:
        return {
            "order": list(PIPELINE_ORDER),
            "crop": self.crop, "crop_scale": list(self.crop_scale),
            "color": self.color, "color_mult": self.color_mult, "color_add": self.color_add,
            "flip": self.flip, "flip_p": self.flip_p,
            "cutout": self.cutout, "cutout_frac": self.cutout_frac, "cutout_fill": self.cutout_fill,
            "psa": self.psa, "psa_grid": self.psa_grid,
            "blur": self.blur, "blur_sigma": self.blur_sigma,
        }

    @staticmethod
    def from_dict(d: dict) -> "AugmentConfig":
        cfg = AugmentConfig()
        for key, value in d.items():
            if key == "order":
                if tuple(value) != PIPELINE_ORDER:
                    raise ValueError(f"config pipeline order {value} does not match {list(PIPELINE_ORDER)}")
                continue
            if not hasattr(cfg, key):
                raise ValueError(f"unknown augment field {key!r}")
            if key == "crop_scale":
                value = tuple(float(v) for v in value)
            setattr(cfg, key, value)
        return cfg


def patch_shuffle(image: np.ndarray, g: int, perm: np.ndarray) -> np.ndarray:
    """Rearrange the g x g tile grid of a square image by `perm`.

    Output tile at grid position k holds the input tile perm[k]; the pixel
    multiset is preserved exactly.
    """
    c, h, w = image.shape
    if h != w:
        raise ValueError(f"patch_shuffle needs a square image, got {h}x{w}")
    if h % g:
        raise ValueError(f"image side {h} not divisible by grid {g}")
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(g * g)):
        raise ValueError(f"not a permutation of {g * g} tiles: {perm.tolist()}")
    t = h // g
    tiles = image.reshape(c, g, t, g, t).transpose(1, 3, 0, 2, 4).reshape(g * g, c, t, t)
    shuffled = tiles[perm]
    return shuffled.reshape(g, g, c, t, t).transpose(2, 0, 3, 1, 4).reshape(c, h, w)


def cutout(image: np.ndarray, center: tuple[int, int], side_px: int, fill: float = 0.0) -> np.ndarray:
    """Fill a square of side `side_px` centered at (row, col), clipped to bounds."""
    if side_px < 0:
        raise ValueError(f"negative cutout side {side_px}")
    if side_px == 0:
        return image.copy()
    _, h, w = image.shape
    cy, cx = center
    half = side_px // 2
    top, bottom = max(0, cy - half), min(h, cy - half + side_px)
    left, right = max(0, cx - half), min(w, cx - half + side_px)
    out = image.copy()
    out[:, top:bottom, left:right] = fill
    return out


def color_jitter(image: np.ndarray, mult: float, add: float) -> np.ndarray:
    """Scale and shift all channels, then clamp back into [0, 1]."""
    if mult <= 0:
        raise ValueError(f"multiplicative jitter must be positive, got {mult}")
    return np.clip(image * mult + add, 0.0, 1.0)


def _bilinear_resize(image: np.ndarray, out_side: int) -> np.ndarray:
    c, h, w = image.shape
    if h == out_side and w == out_side:
        return image
    # pixel-center sampling; exact identity when sizes match is handled above
    sy = (np.arange(out_side) + 0.5) * (h / out_side) - 0.5
    sx = (np.arange(out_side) + 0.5) * (w / out_side) - 0.5
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(sy - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(sx - x0, 0.0, 1.0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(image.dtype)


def random_crop_flip(image: np.ndarray, crop_box: tuple[int, int, int], flip: bool) -> np.ndarray:
    """Crop (top, left, side), resize back to the input size, optionally mirror."""
    c, h, w = image.shape
    if h != w:
        raise ValueError(f"crop expects a square image, got {h}x{w}")
    top, left, side = crop_box
    if side < 1 or top < 0 or left < 0 or top + side > h or left + side > w:
        raise ValueError(f"crop box {crop_box} outside {h}x{w} image")
    out = _bilinear_resize(image[:, top : top + side, left : left + side], h)
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable gaussian blur with edge clamping. Off by default in the pipeline."""
    if sigma <= 0:
        return image.copy()
    radius = max(1, int(round(3 * sigma)))
    xs = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(image, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    rows = sum(kernel[i] * padded[:, i : i + image.shape[1], :] for i in range(kernel.size))
    padded = np.pad(rows, ((0, 0), (0, 0), (radius, radius)), mode="edge")
    out = sum(kernel[i] * padded[:, :, i : i + image.shape[2]] for i in range(kernel.size))
    return out.astype(image.dtype)


def compose_views(
    image: np.ndarray,
    config: AugmentConfig,
    seed: int,
    sample_id: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Produce the two augmented views of one image.

    Each view is an independent draw of the full pipeline; draws are
    reproducible from (seed, sample_id, view_index) alone.
    """
    c, h, w = image.shape
    if h != w:
        raise ValueError(f"compose_views expects square images, got {h}x{w}")
    config.validate(h)
    views = []
    for view_index in (1, 2):
        rng = np.random.default_rng(np.random.SeedSequence((seed, sample_id, view_index)))
        out = image
        if config.crop:
            lo, hi = config.crop_scale
            side = int(round(h * rng.uniform(lo, hi)))
            side = max(1, min(h, side))
            top = int(rng.integers(0, h - side + 1))
            left = int(rng.integers(0, w - side + 1))
            out = random_crop_flip(out, (top, left, side), flip=False)
        if config.color:
            mult = 1.0 + rng.uniform(-config.color_mult, config.color_mult)
            offset = rng.uniform(-config.color_add, config.color_add)
            out = color_jitter(out, mult, offset)
        if config.flip and rng.random() < config.flip_p:
            out = np.ascontiguousarray(out[:, :, ::-1])
        if config.cutout:
            side_px = int(round(config.cutout_frac * h))
            cy = int(rng.integers(0, h))
            cx = int(rng.integers(0, w))
            out = cutout(out, (cy, cx), side_px, config.cutout_fill)
        if config.blur:
            out = gaussian_blur(out, config.blur_sigma)
        if config.psa:
            perm = rng.permutation(config.psa_grid ** 2)
            out = patch_shuffle(out, config.psa_grid, perm)
        views.append(np.ascontiguousarray(out, dtype=image.dtype))
    return views[0], views[1]
