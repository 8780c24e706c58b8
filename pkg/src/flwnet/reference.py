"""Plain numpy re-implementation of the forward computations in extended precision.

Serves as the finite-difference oracle for gradient checks. Everything
here runs in ``np.longdouble`` (80-bit on x86, machine epsilon ~1e-19),
so central differences with ``h = 1e-6`` resolve gradients down to about
1e-12 absolute, well below what a float64 objective allows. The code
shares no arithmetic with the torch path: convolutions are im2col
products and blocks are explicit ``sliding_window_view`` arrays.

Arrays are ``(N, C, H, W)`` unless noted.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from flwnet import imaging

__all__ = [
    "LD",
    "as_ld",
    "linear",
    "conv2d",
    "activation",
    "unfold_blocks",
    "block_min_subtract",
    "cosine_sim",
    "apply_curve",
    "gfe_coefficients",
    "forward",
    "l1_loss",
    "ssim_loss",
    "color_loss",
    "image_gradients",
    "block_loss",
    "brightness_loss",
    "structure_loss",
    "total_loss",
]

LD = np.longdouble
_SQ_FLOOR = LD("1e-30")


def as_ld(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x).astype(LD)


def linear(x, W, b):
    return x @ W.T + b


def conv2d(x, K, b):
    """3x3 cross-correlation with zero padding 1; ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(N, H * W, C * 9)
    out = cols @ K.reshape(K.shape[0], -1).T + b  # (N, HW, Cout)
    out = out.transpose(0, 2, 1).reshape(N, K.shape[0], H, W)
    return out[0] if squeeze else out


def activation(x, kind: str):
    if kind == "relu":
        return np.where(x > 0, x, LD(0))
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return LD(1) / (LD(1) + np.exp(-x))
    raise ValueError(f"unknown activation {kind!r}")


def _reflect(x, r: int):
    if r == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    return np.pad(x, pad, mode="reflect")


def unfold_blocks(x, k: int, stride: int = 1):
    """``(..., H, W)`` -> ``(..., n_blocks, k*k)`` with the same centre rule as the torch op."""
    H, W = x.shape[-2:]
    win = sliding_window_view(_reflect(x, k // 2), (k, k), axis=(-2, -1))
    off = stride // 2
    win = win[..., off::stride, off::stride, :, :]
    ny, nx = win.shape[-4], win.shape[-3]
    return win.reshape(*x.shape[:-2], ny * nx, k * k)


def block_min_subtract(blocks):
    return blocks - blocks.min(axis=-1, keepdims=True)


def cosine_sim(u, v, eps: float = 1e-6):
    eps = LD(eps)
    dot = (u * v).sum(-1)
    nu = np.sqrt(np.maximum((u * u).sum(-1), _SQ_FLOOR))
    nv = np.sqrt(np.maximum((v * v).sum(-1), _SQ_FLOOR))
    sim = dot / (nu * nv + eps)
    return np.where((nu < eps) & (nv < eps), LD(1), sim)


def apply_curve(v, alpha):
    """``alpha`` is ``(t,)`` for a plane or ``(N, t)`` for a batch ``(N, ...)``."""
    for k in range(alpha.shape[-1]):
        a = alpha[k] if alpha.ndim == 1 else alpha[:, k].reshape((-1,) + (1,) * (v.ndim - 1))
        v = v + a * v * (1 - v)
    return v


def gfe_coefficients(hist, mu, params: dict, layers: int = 5):
    """MLP on ``[hist, mu]``; ``hist`` is ``(N, B)``, ``mu`` is ``(N,)``."""
    h = np.concatenate([hist, np.asarray(mu, dtype=LD).reshape(-1, 1)], axis=1)
    for i in range(layers):
        h = linear(h, params[f"gfe.layer{i}.weight"], params[f"gfe.layer{i}.bias"])
        h = activation(h, "tanh" if i == layers - 1 else "relu")
    return h


def forward(
    x, mu, params: dict, bins: int = 32, layers: int = 5, inject_at: int = 2, n_convs: int = 5
):
    """Whole pipeline: V-channel histogram and curve, then the convolutional refiner."""
    v = x.max(axis=1, keepdims=True)
    hist = np.stack(
        [imaging.histogram(np.asarray(v[n, 0], dtype=np.float64), bins) for n in range(len(x))]
    ).astype(LD)
    alpha = gfe_coefficients(hist, mu, params, layers)
    proposal = apply_curve(v, alpha)
    h = x
    for i in range(n_convs):
        if i == inject_at:
            h = np.concatenate([h, proposal], axis=1)
        h = conv2d(h, params[f"len.conv{i}.weight"], params[f"len.conv{i}.bias"])
        h = activation(h, "sigmoid" if i == n_convs - 1 else "relu")
    return h


def l1_loss(out, ref):
    return np.abs(out - ref).mean()


def _gauss(size: int = 11, sigma: float = 1.5):
    x = np.arange(size, dtype=LD) - LD(size - 1) / 2
    g = np.exp(-(x * x) / (2 * LD(sigma) ** 2))
    return g / g.sum()


def _filter(x, g):
    rows = sliding_window_view(x, len(g), axis=-1) @ g
    return sliding_window_view(rows, len(g), axis=-2) @ g


def ssim_loss(out, ref):
    g = _gauss()
    c1, c2 = LD("1e-4"), LD("9e-4")
    mx, my = _filter(out, g), _filter(ref, g)
    sxx = _filter(out * out, g) - mx * mx
    syy = _filter(ref * ref, g) - my * my
    sxy = _filter(out * ref, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return 1 - s.mean()


def color_loss(out, ref, eps: float = 1e-6):
    return 1 - cosine_sim(np.moveaxis(out, 1, -1), np.moveaxis(ref, 1, -1), eps).mean()


def image_gradients(x):
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    gy[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    return np.concatenate([gx, gy], axis=1)


def block_loss(x, y, k: int = 5, stride: int = 1, eps: float = 1e-6):
    bx = block_min_subtract(unfold_blocks(x, k, stride))
    by = block_min_subtract(unfold_blocks(y, k, stride))
    return 1 - cosine_sim(bx, by, eps).mean()


def brightness_loss(out, ref, k: int = 5, stride: int = 1, eps: float = 1e-6):
    return block_loss(out, ref, k, stride, eps)


def structure_loss(out, ref, k: int = 5, stride: int = 1, eps: float = 1e-6):
    return block_loss(image_gradients(out), image_gradients(ref), k, stride, eps)


def total_loss(
    out, ref, enabled=("l1", "ssim", "color", "brightness", "structure"), k=5, stride=1, eps=1e-6
):
    parts = {
        "l1": lambda: l1_loss(out, ref),
        "ssim": lambda: ssim_loss(out, ref),
        "color": lambda: color_loss(out, ref, eps),
        "brightness": lambda: brightness_loss(out, ref, k, stride, eps),
        "structure": lambda: structure_loss(out, ref, k, stride, eps),
    }
    total = LD(0)
    for name in ("l1", "ssim", "color", "brightness", "structure"):
        if name in enabled:
            total = total + parts[name]()
    return total
