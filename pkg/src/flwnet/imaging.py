"""Image I/O, colour conversions and paired-data handling.

Images are ``float64`` numpy arrays of shape ``(H, W, 3)`` holding sRGB
values in ``[0, 1]`` (channel-interleaved). Single planes are ``(H, W)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "ImageError",
    "PairedSample",
    "DatasetManifest",
    "validate_image",
    "load_image",
    "save_image",
    "to_bytes",
    "v_channel",
    "histogram",
    "mean_v",
    "srgb_to_linear",
    "srgb_to_lab",
    "make_pair",
    "PatchWindow",
    "draw_window",
    "sample_patch",
]

_EIGHT_BIT_MODES = {"1", "L", "P", "RGB", "RGBA", "LA"}

# sRGB primaries, D65 (IEC 61966-2-1)
_RGB_TO_XYZ = np.array(
    [
        [0.4124, 0.3576, 0.1805],
        [0.2126, 0.7152, 0.0722],
        [0.0193, 0.1192, 0.9505],
    ]
)
# white = XYZ of RGB (1, 1, 1), so every gray lands exactly on the neutral axis
D65_WHITE = _RGB_TO_XYZ.sum(axis=1)


class ImageError(ValueError):
    """Raised for undecodable, malformed or out-of-range images."""


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check the ImageRGB contract and return the array as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"{name}: expected shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageError(f"{name}: empty image {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ImageError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ImageError(f"{name}: values outside [0, 1]")
    return arr


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Decode an 8-bit image file into an ImageRGB (exact ``byte / 255``)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in _EIGHT_BIT_MODES:
                raise ImageError(f"{path}: unsupported bit depth / mode {mode!r}")
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except ImageError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise ImageError(f"{path}: cannot decode ({exc})") from exc
    return rgb.astype(np.float64) / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantise to uint8 with round-half-up."""
    arr = validate_image(img)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``img`` as an 8-bit RGB PNG (or any format PIL infers from the suffix)."""
    data = to_bytes(img)
    path = Path(path)
    try:
        Image.fromarray(data).save(path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def v_channel(img: np.ndarray) -> np.ndarray:
    """HSV value: per-pixel maximum over R, G, B."""
    return np.asarray(img).max(axis=-1)


def histogram(plane: np.ndarray, bins: int = 32) -> np.ndarray:
    """Normalised histogram with half-open bins ``[k/B, (k+1)/B)``.

    The value 1.0 is counted in the last bin.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    values = np.asarray(plane, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("empty plane")
    idx = np.minimum(np.floor(values * bins).astype(np.int64), bins - 1)
    idx = np.maximum(idx, 0)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    return counts / values.size


def mean_v(img: np.ndarray) -> float:
    return float(v_channel(img).mean())


def srgb_to_linear(img: np.ndarray) -> np.ndarray:
    c = np.asarray(img, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    delta = 6.0 / 29.0
    return np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)


def srgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB -> linear RGB -> XYZ (D65) -> CIELAB. Returns ``(..., 3)`` with L in [0, 100]."""
    lin = srgb_to_linear(img)
    xyz = lin @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / D65_WHITE)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


@dataclass(frozen=True)
class PairedSample:
    """Aligned low/high images plus the reference brightness ``mu_ref``."""

    low: np.ndarray
    high: np.ndarray
    mu_ref: float
    name: str = ""

    def __post_init__(self):
        if self.low.shape != self.high.shape:
            raise ImageError(f"pair shape mismatch: {self.low.shape} vs {self.high.shape}")


def make_pair(low: np.ndarray, high: np.ndarray, name: str = "") -> PairedSample:
    low = validate_image(low, "low")
    high = validate_image(high, "high")
    return PairedSample(low, high, mean_v(high), name)


@dataclass
class DatasetManifest:
    """Paired file list discovered from ``low/`` and ``high/`` directories."""

    entries: list[tuple[Path, Path]] = field(default_factory=list)

    @classmethod
    def from_dirs(
        cls, low_dir: str | os.PathLike, high_dir: str | os.PathLike, check: bool = True
    ) -> DatasetManifest:
        """Pair files with identical names across the two directories.

        With ``check=True`` every pair is decoded once to confirm that both
        images exist and share dimensions.
        """
        low_dir, high_dir = Path(low_dir), Path(high_dir)
        for d in (low_dir, high_dir):
            if not d.is_dir():
                raise FileNotFoundError(f"not a directory: {d}")
        high_names = {p.name for p in high_dir.iterdir() if p.is_file()}
        entries = [
            (p, high_dir / p.name)
            for p in sorted(low_dir.iterdir())
            if p.is_file() and p.name in high_names
        ]
        manifest = cls(entries)
        if check:
            for low_path, high_path in entries:
                a, b = load_image(low_path), load_image(high_path)
                if a.shape != b.shape:
                    raise ImageError(f"size mismatch for {low_path.name}: {a.shape} vs {b.shape}")
        return manifest

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, index: int) -> PairedSample:
        low_path, high_path = self.entries[index]
        return make_pair(load_image(low_path), load_image(high_path), low_path.name)

    def load_all(self) -> list[PairedSample]:
        return [self.load(i) for i in range(len(self))]


@dataclass(frozen=True)
class PatchWindow:
    top: int
    left: int
    size: int
    flip_h: bool = False
    flip_v: bool = False

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = arr[self.top : self.top + self.size, self.left : self.left + self.size]
        if self.flip_h:
            out = out[:, ::-1]
        if self.flip_v:
            out = out[::-1]
        return np.ascontiguousarray(out)


def draw_window(
    height: int, width: int, size: int, rng: np.random.Generator, flips: bool = True
) -> PatchWindow:
    """Random crop window; draw order is fixed (top, left, then the two flip coins)."""
    if size < 1 or size > min(height, width):
        raise ValueError(f"patch size {size} does not fit a {height}x{width} image")
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    flip_h = flip_v = False
    if flips:
        flip_h = bool(rng.random() < 0.5)
        flip_v = bool(rng.random() < 0.5)
    return PatchWindow(top, left, size, flip_h, flip_v)


def sample_patch(
    pair: PairedSample,
    size: int,
    rng: np.random.Generator,
    flips: bool = True,
) -> PairedSample:
    """Random aligned crop of ``size x size`` with optional synchronised flips.

    A given generator state always yields the same window; ``mu_ref`` is
    recomputed on the cropped reference.
    """
    win = draw_window(*pair.low.shape[:2], size, rng, flips)
    high = win.apply(pair.high)
    return PairedSample(win.apply(pair.low), high, mean_v(high), pair.name)
