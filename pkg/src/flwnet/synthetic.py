"""Synthetic paired low/normal-light data built from scikit-image sample photos.

Stand-in for a real paired dataset when none is on disk. The reference is
a random crop of a sample photo with a random exposure; the low-light
input scales its linear radiance down, adds sensor-like noise and is
re-encoded to 8 bits. Requires the optional ``scikit-image`` dependency.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from flwnet import imaging

__all__ = ["SOURCES", "source_images", "linear_to_srgb", "degrade", "make_pairs", "write_pairs"]

SOURCES = (
    "astronaut",
    "coffee",
    "chelsea",
    "rocket",
    "immunohistochemistry",
    "hubble_deep_field",
    "retina",
    "colorwheel",
)


def source_images() -> list[np.ndarray]:
    from skimage import data

    imgs = []
    for name in SOURCES:
        img = getattr(data, name)()
        imgs.append(np.asarray(img)[..., :3])
    left, right, _ = data.stereo_motorcycle()
    imgs += [left, right]
    return imgs


def linear_to_srgb(lin: np.ndarray) -> np.ndarray:
    lin = np.clip(lin, 0.0, 1.0)
    return np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * np.power(lin, 1 / 2.4) - 0.055)


def _crop_resize(src: np.ndarray, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Random crop with the target aspect ratio covering 50-100% of the source, then resize."""
    h, w = size
    sh, sw = src.shape[:2]
    scale = rng.uniform(0.5, 1.0)
    ch = int(min(sh, sw * h / w) * scale)
    cw = int(ch * w / h)
    top = int(rng.integers(0, sh - ch + 1))
    left = int(rng.integers(0, sw - cw + 1))
    crop = Image.fromarray(src[top : top + ch, left : left + cw])
    out = np.asarray(crop.resize((w, h), Image.Resampling.BICUBIC))
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return out


def degrade(
    high: np.ndarray,
    rng: np.random.Generator,
    exposure: tuple[float, float] = (0.04, 0.15),
    noise: tuple[float, float] = (0.0005, 0.003),
) -> np.ndarray:
    """Low-light version of an sRGB image: darker linear radiance, noise, 8-bit quantisation."""
    lin = imaging.srgb_to_linear(high) * rng.uniform(*exposure)
    sigma = rng.uniform(*noise)
    # signal-dependent shot noise plus a read-noise floor
    lin = lin + rng.normal(size=lin.shape) * np.sqrt(sigma * lin + sigma**2)
    return imaging.to_bytes(linear_to_srgb(lin)) / 255.0


def make_pairs(
    n: int,
    size: tuple[int, int] = (400, 600),
    seed: int = 0,
    ref_exposure: tuple[float, float] = (0.6, 1.4),
) -> list[imaging.PairedSample]:
    """``n`` deterministic surrogate pairs named ``pair_000.png`` onward."""
    rng = np.random.default_rng(seed)
    sources = source_images()
    pairs = []
    for i in range(n):
        src = sources[i % len(sources)]
        base = imaging.srgb_to_linear(_crop_resize(src, size, rng) / 255.0)
        high = imaging.to_bytes(linear_to_srgb(base * rng.uniform(*ref_exposure))) / 255.0
        low = degrade(high, rng)
        pairs.append(imaging.make_pair(low, high, f"pair_{i:03d}.png"))
    return pairs


def write_pairs(pairs: list[imaging.PairedSample], root: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``root/low`` and ``root/high`` PNG directories; returns both paths."""
    root = Path(root)
    low_dir, high_dir = root / "low", root / "high"
    low_dir.mkdir(parents=True, exist_ok=True)
    high_dir.mkdir(parents=True, exist_ok=True)
    for p in pairs:
        imaging.save_image(p.low, low_dir / p.name)
        imaging.save_image(p.high, high_dir / p.name)
    return low_dir, high_dir
