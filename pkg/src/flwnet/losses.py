"""Training losses: L1, SSIM and the three relative losses.

All functions take ``(N, 3, H, W)`` tensors (a single ``(H, W, 3)`` numpy
image is also accepted and promoted to a float64 batch of one). Every
reduction is a mean, so magnitudes do not depend on resolution.

The relative losses reach zero whenever the output matches the reference
up to a feature-preserving transform:

* colour: per-pixel RGB direction (any positive per-pixel scale),
* brightness: min-subtracted ``k x k`` blocks (any per-block affine map),
* structure: the same on forward-difference gradient maps.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from flwnet._blockcos import block_cosine
from flwnet.diffcore import (
    EPS_NORM,
    block_min_subtract,
    cosine_sim,
    reflect_pad,
    unfold_blocks,
)

__all__ = [
    "LOSS_NAMES",
    "RelLossConfig",
    "LossBundle",
    "parse_loss_flags",
    "as_batch",
    "l1_loss",
    "ssim_index",
    "ssim_loss",
    "color_loss",
    "image_gradients",
    "brightness_loss",
    "structure_loss",
    "total_loss",
]

LOSS_NAMES = ("l1", "ssim", "color", "brightness", "structure")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class RelLossConfig:
    block_k: int = 5
    block_stride: int = 1
    grad_op: str = "forward"
    eps_norm: float = EPS_NORM

    def __post_init__(self):
        if self.block_k < 1 or self.block_k % 2 == 0:
            raise ValueError(f"block_k must be odd, got {self.block_k}")
        if self.block_stride < 1:
            raise ValueError(f"block_stride must be >= 1, got {self.block_stride}")
        if self.grad_op != "forward":
            raise ValueError(f"only forward differences are supported, got {self.grad_op!r}")


@dataclass
class LossBundle:
    """Per-component losses (0-d tensors) and their unit-weight sum."""

    l1: torch.Tensor
    ssim: torch.Tensor
    color: torch.Tensor
    brightness: torch.Tensor
    structure: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def parse_loss_flags(text: str | None) -> frozenset[str]:
    """``"l1,ssim"`` -> ``{"l1", "ssim"}``; ``None``/``"all"`` enables every component."""
    if text is None or text.strip().lower() == "all":
        return frozenset(LOSS_NAMES)
    names = {s.strip().lower() for s in text.split(",") if s.strip()}
    unknown = names - set(LOSS_NAMES)
    if unknown:
        raise ValueError(f"unknown loss component(s): {', '.join(sorted(unknown))}")
    if not names:
        raise ValueError("at least one loss component must be enabled")
    return frozenset(names)


def as_batch(img) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        return img if img.ndim == 4 else img.unsqueeze(0)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def _pair(out, ref) -> tuple[torch.Tensor, torch.Tensor]:
    out, ref = as_batch(out), as_batch(ref)
    if out.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(out.shape)} vs {tuple(ref.shape)}")
    return out, ref.to(out.dtype)


def l1_loss(out, ref) -> torch.Tensor:
    out, ref = _pair(out, ref)
    return (out - ref).abs().mean()


@lru_cache(maxsize=8)
def _gauss_1d(dtype: torch.dtype) -> torch.Tensor:
    x = torch.arange(SSIM_WINDOW, dtype=torch.float64) - (SSIM_WINDOW - 1) / 2
    g = torch.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return (g / g.sum()).to(dtype)


def _gauss_filter(x: torch.Tensor) -> torch.Tensor:
    """Separable 11x11 Gaussian over valid positions only, channel-wise."""
    C = x.shape[1]
    g = _gauss_1d(x.dtype)
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(C, 1, 1, SSIM_WINDOW), groups=C)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(C, 1, SSIM_WINDOW, 1), groups=C)


def ssim_index(out, ref) -> torch.Tensor:
    """Mean SSIM (Gaussian window 11, sigma 1.5, data range 1), averaged over channels."""
    out, ref = _pair(out, ref)
    if min(out.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    mu_x = _gauss_filter(out)
    mu_y = _gauss_filter(ref)
    sxx = _gauss_filter(out * out) - mu_x * mu_x
    syy = _gauss_filter(ref * ref) - mu_y * mu_y
    sxy = _gauss_filter(out * ref) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def ssim_loss(out, ref) -> torch.Tensor:
    return 1 - ssim_index(out, ref)


def color_loss(out, ref, eps: float = EPS_NORM) -> torch.Tensor:
    """1 - mean per-pixel cosine between RGB vectors."""
    out, ref = _pair(out, ref)
    u = out.permute(0, 2, 3, 1)
    v = ref.permute(0, 2, 3, 1)
    return 1 - cosine_sim(u, v, eps).mean()


def image_gradients(x: torch.Tensor) -> torch.Tensor:
    """Forward differences ``(N, C, H, W)`` -> ``(N, 2C, H, W)``: d/dx maps then d/dy maps.

    The last column of d/dx and the last row of d/dy are zero.
    """
    gx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    gy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return torch.cat([gx, gy], dim=1)


def _block_similarity_loss(x: torch.Tensor, y: torch.Tensor, cfg: RelLossConfig, impl: str):
    k, s, eps = cfg.block_k, cfg.block_stride, cfg.eps_norm
    if impl == "kernel":
        r = k // 2
        if r and min(x.shape[-2:]) <= r:
            raise ValueError(f"block size {k} too large for {tuple(x.shape[-2:])} maps")
        sim = block_cosine(reflect_pad(x, r), reflect_pad(y, r), k, s, eps)
    elif impl == "reference":
        bx = block_min_subtract(unfold_blocks(x, k, s))
        by = block_min_subtract(unfold_blocks(y, k, s))
        sim = cosine_sim(bx, by, eps)
    else:
        raise ValueError(f"unknown impl {impl!r}")
    return 1 - sim.mean()


def brightness_loss(out, ref, cfg: RelLossConfig = RelLossConfig(), impl: str = "kernel"):
    """1 - mean cosine of min-subtracted blocks, per colour channel.

    ``impl="reference"`` routes through the explicit unfold/min/cosine
    primitives; the default fused kernel gives the same value and gradient.
    """
    out, ref = _pair(out, ref)
    return _block_similarity_loss(out, ref, cfg, impl)


def structure_loss(out, ref, cfg: RelLossConfig = RelLossConfig(), impl: str = "kernel"):
    """The brightness construction applied to forward-difference gradient maps."""
    out, ref = _pair(out, ref)
    return _block_similarity_loss(image_gradients(out), image_gradients(ref), cfg, impl)


def total_loss(
    out,
    ref,
    cfg: RelLossConfig = RelLossConfig(),
    enabled: frozenset[str] | set[str] = frozenset(LOSS_NAMES),
    impl: str = "kernel",
) -> LossBundle:
    """Unit-weight sum of the enabled components; disabled ones report 0."""
    out, ref = _pair(out, ref)
    unknown = set(enabled) - set(LOSS_NAMES)
    if unknown:
        raise ValueError(f"unknown loss component(s): {sorted(unknown)}")
    zero = out.new_zeros(())
    parts = {
        "l1": (lambda: l1_loss(out, ref)),
        "ssim": (lambda: ssim_loss(out, ref)),
        "color": (lambda: color_loss(out, ref, cfg.eps_norm)),
        "brightness": (lambda: brightness_loss(out, ref, cfg, impl)),
        "structure": (lambda: structure_loss(out, ref, cfg, impl)),
    }
    values = {name: (fn() if name in enabled else zero) for name, fn in parts.items()}
    total = zero
    for name in LOSS_NAMES:
        total = total + values[name]
    return LossBundle(total=total, **values)
