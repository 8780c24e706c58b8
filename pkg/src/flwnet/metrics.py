"""Full-reference evaluation: PSNR, SSIM and mean CIEDE2000 colour difference."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import torch

from flwnet import imaging
from flwnet.losses import ssim_loss

__all__ = [
    "INF_PSNR",
    "psnr",
    "ssim_metric",
    "delta_e2000",
    "ciede2000",
    "ImageScores",
    "EvalReport",
    "score_pair",
    "evaluate_dataset",
    "parse_mu_mode",
]

INF_PSNR = math.inf


def _check_pair(out: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = np.asarray(out, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if out.shape != ref.shape:
        raise ValueError(f"shape mismatch: {out.shape} vs {ref.shape}")
    return out, ref


def psnr(out: np.ndarray, ref: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` with peak 1; identical images give ``INF_PSNR``."""
    out, ref = _check_pair(out, ref)
    mse = float(np.mean((out - ref) ** 2))
    if mse == 0.0:
        return INF_PSNR
    return 10.0 * math.log10(1.0 / mse)


def ssim_metric(out: np.ndarray, ref: np.ndarray) -> float:
    """``1 - ssim_loss`` evaluated in float64."""
    out, ref = _check_pair(out, ref)
    with torch.no_grad():
        return 1.0 - float(ssim_loss(out, ref))


def delta_e2000(
    lab1: np.ndarray, lab2: np.ndarray, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0
) -> np.ndarray:
    """Elementwise CIEDE2000 between Lab arrays of shape ``(..., 3)``."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    if lab1.shape != lab2.shape or lab1.shape[-1] != 3:
        raise ValueError(f"Lab shape mismatch: {lab1.shape} vs {lab2.shape}")
    L1, a1, b1 = np.moveaxis(lab1, -1, 0)
    L2, a2, b2 = np.moveaxis(lab2, -1, 0)

    C1 = np.hypot(a1, b1)
    C2 = np.hypot(a2, b2)
    Cbar7 = ((C1 + C2) / 2) ** 7
    G = 0.5 * (1 - np.sqrt(Cbar7 / (Cbar7 + 25.0**7)))
    a1p = (1 + G) * a1
    a2p = (1 + G) * a2
    C1p = np.hypot(a1p, b1)
    C2p = np.hypot(a2p, b2)
    # hue angle is 0 by convention for achromatic colours
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, np.degrees(np.arctan2(b1, a1p)) % 360)
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, np.degrees(np.arctan2(b2, a2p)) % 360)

    dLp = L2 - L1
    dCp = C2p - C1p
    chroma0 = C1p * C2p == 0
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, np.where(dh < -180, dh + 360, dh))
    dh = np.where(chroma0, 0.0, dh)
    dHp = 2 * np.sqrt(C1p * C2p) * np.sin(np.radians(dh / 2))

    Lbar = (L1 + L2) / 2
    Cbarp = (C1p + C2p) / 2
    hsum = h1p + h2p
    far = np.abs(h1p - h2p) > 180
    hbar = np.where(far, np.where(hsum < 360, (hsum + 360) / 2, (hsum - 360) / 2), hsum / 2)
    hbar = np.where(chroma0, hsum, hbar)

    T = (
        1
        - 0.17 * np.cos(np.radians(hbar - 30))
        + 0.24 * np.cos(np.radians(2 * hbar))
        + 0.32 * np.cos(np.radians(3 * hbar + 6))
        - 0.20 * np.cos(np.radians(4 * hbar - 63))
    )
    dtheta = 30 * np.exp(-(((hbar - 275) / 25) ** 2))
    Cbarp7 = Cbarp**7
    RC = 2 * np.sqrt(Cbarp7 / (Cbarp7 + 25.0**7))
    SL = 1 + 0.015 * (Lbar - 50) ** 2 / np.sqrt(20 + (Lbar - 50) ** 2)
    SC = 1 + 0.045 * Cbarp
    SH = 1 + 0.015 * Cbarp * T
    RT = -np.sin(np.radians(2 * dtheta)) * RC

    tL = dLp / (kL * SL)
    tC = dCp / (kC * SC)
    tH = dHp / (kH * SH)
    return np.sqrt(tL**2 + tC**2 + tH**2 + RT * tC * tH)


def ciede2000(out: np.ndarray, ref: np.ndarray) -> float:
    """Mean per-pixel CIEDE2000 between two sRGB images."""
    out, ref = _check_pair(out, ref)
    return float(np.mean(delta_e2000(imaging.srgb_to_lab(out), imaging.srgb_to_lab(ref))))


@dataclass(frozen=True)
class ImageScores:
    name: str
    psnr: float
    ssim: float
    de2000: float


def score_pair(out: np.ndarray, ref: np.ndarray, name: str = "") -> ImageScores:
    return ImageScores(name, psnr(out, ref), ssim_metric(out, ref), ciede2000(out, ref))


def _mean(values: list[float], what: str) -> float:
    finite = [v for v in values if math.isfinite(v)]
    if len(finite) < len(values):
        warnings.warn(
            f"{len(values) - len(finite)} infinite {what} value(s) excluded from the mean",
            RuntimeWarning,
            stacklevel=3,
        )
    return float(np.mean(finite)) if finite else math.nan


@dataclass
class EvalReport:
    """Per-image scores (sorted by name), dataset means and per-entry failures."""

    images: list[ImageScores] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)
    mu_mode: str = ""

    def __post_init__(self):
        self.images = sorted(self.images, key=lambda s: s.name)

    def means(self) -> dict[str, float]:
        if not self.images:
            return {"psnr": math.nan, "ssim": math.nan, "de2000": math.nan}
        return {
            "psnr": _mean([s.psnr for s in self.images], "PSNR"),
            "ssim": float(np.mean([s.ssim for s in self.images])),
            "de2000": float(np.mean([s.de2000 for s in self.images])),
        }

    def to_dict(self) -> dict:
        def enc(v: float):
            return "inf" if math.isinf(v) else v

        return {
            "mu_mode": self.mu_mode,
            "images": [
                {"name": s.name, "psnr": enc(s.psnr), "ssim": s.ssim, "de2000": s.de2000}
                for s in self.images
            ],
            "means": {k: enc(v) for k, v in self.means().items()},
            "errors": dict(sorted(self.errors.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        rows = [(s.name, s.psnr, s.ssim, s.de2000) for s in self.images]
        m = self.means()
        rows.append(("mean", m["psnr"], m["ssim"], m["de2000"]))
        width = max([len("image")] + [len(r[0]) for r in rows])
        lines = [f"{'image':<{width}}  {'PSNR':>8}  {'SSIM':>7}  {'dE00':>7}"]
        lines.append("-" * len(lines[0]))
        for name, p, s, d in rows:
            ptxt = "inf" if math.isinf(p) else f"{p:.3f}"
            lines.append(f"{name:<{width}}  {ptxt:>8}  {s:>7.4f}  {d:>7.3f}")
        for name, msg in sorted(self.errors.items()):
            lines.append(f"{name:<{width}}  error: {msg}")
        return "\n".join(lines)


def parse_mu_mode(text: str) -> float | None:
    """``"ref"`` -> ``None`` (use the reference), ``"fixed:0.4"`` -> ``0.4``."""
    text = text.strip().lower()
    if text in ("ref", "from_reference"):
        return None
    if text.startswith("fixed:"):
        mu = float(text.split(":", 1)[1])
        if not 0.0 < mu <= 1.0:
            raise ValueError(f"mu must lie in (0, 1], got {mu}")
        return mu
    raise ValueError(f"mu mode must be 'ref' or 'fixed:<value>', got {text!r}")


def evaluate_dataset(
    enhance_fn: Callable[[np.ndarray, float], np.ndarray] | Any,
    manifest: imaging.DatasetManifest,
    mu: float | None = 0.4,
) -> EvalReport:
    """Enhance every low image and score it against its reference.

    ``mu=None`` takes ``mean_v`` of each reference; a float is used for all
    images. Entries that fail to decode are recorded in ``errors``.
    Anything with an ``enhance(img, mu)`` method (a ``ModelCheckpoint``)
    may be passed in place of the function.
    """
    enhance_fn = getattr(enhance_fn, "enhance", enhance_fn)
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    scores, errors = [], {}
    for i, (low_path, _) in enumerate(manifest.entries):
        try:
            pair = manifest.load(i)
        except (OSError, ValueError) as exc:
            errors[low_path.name] = str(exc)
            continue
        target = pair.mu_ref if mu is None else mu
        scores.append(score_pair(enhance_fn(pair.low, target), pair.high, pair.name))
    mode = "from_reference" if mu is None else f"fixed:{mu}"
    return EvalReport(scores, errors, mode)
