"""Differentiable primitives on torch tensors and a finite-difference checker.

Gradients come from torch autograd. Every primitive here is exercised by
:func:`gradcheck`, which compares autograd against central differences
evaluated in float64 or, given an oracle, in extended precision.

A ``ParameterStore`` is a plain ordered ``dict`` mapping names such as
``"gfe.layer0.weight"`` to tensors.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "ParameterStore",
    "NonFiniteError",
    "EPS_NORM",
    "check_finite",
    "linear",
    "conv2d",
    "activation",
    "block_centers",
    "reflect_pad",
    "reflect_pad_adjoint",
    "unfold_blocks",
    "fold_blocks",
    "block_min_subtract",
    "cosine_sim",
    "param_count",
    "clone_params",
    "params_dtype",
    "gradcheck_report",
    "gradcheck",
]

ParameterStore = dict[str, torch.Tensor]

EPS_NORM = 1e-6
# sqrt() of an exactly-zero sum of squares has an infinite derivative
_SQ_FLOOR = 1e-30


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where the contract requires finite values."""


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Affine map ``W x + b`` on the last axis of ``x``."""
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ValueError(
            f"linear: shapes do not conform x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)}"
        )
    return F.linear(x, W, b)


def conv2d(x: torch.Tensor, K: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    ``x`` is ``(C, H, W)`` or batched ``(N, C, H, W)``.
    """
    if K.ndim != 4 or K.shape[2:] != (3, 3):
        raise ValueError(f"conv2d: kernel must be (C_out, C_in, 3, 3), got {tuple(K.shape)}")
    if b.shape != (K.shape[0],):
        raise ValueError(f"conv2d: bias shape {tuple(b.shape)} does not match {K.shape[0]} outputs")
    if x.ndim not in (3, 4) or x.shape[-3] != K.shape[1]:
        raise ValueError(f"conv2d: input {tuple(x.shape)} incompatible with kernel {tuple(K.shape)}")
    if x.ndim == 3:
        return F.conv2d(x.unsqueeze(0), K, b, padding=1).squeeze(0)
    return F.conv2d(x, K, b, padding=1)


_ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": torch.relu,  # subgradient 0 at the kink
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
}


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


def block_centers(n: int, stride: int) -> range:
    """Centre coordinates along one axis: the middle of each ``stride``-wide tile."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return range(stride // 2, n, stride)


def _check_block_args(shape: tuple[int, ...], k: int) -> int:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"block size must be odd and positive, got {k}")
    r = k // 2
    h, w = shape[-2:]
    if r > 0 and (r >= h or r >= w):
        raise ValueError(f"block size {k} exceeds the reflect-padded extent of a {h}x{w} input")
    return r


def reflect_pad(x: torch.Tensor, r: int) -> torch.Tensor:
    """Reflection padding (edge pixel not repeated) of the last two axes."""
    if r == 0:
        return x
    lead = x.shape[:-2]
    flat = x.reshape(-1, 1, *x.shape[-2:])
    out = F.pad(flat, (r, r, r, r), mode="reflect")
    return out.reshape(*lead, *out.shape[-2:])


def _reflect_index(n: int, r: int) -> np.ndarray:
    p = np.arange(-r, n + r)
    p = np.abs(p)
    return np.where(p > n - 1, 2 * (n - 1) - p, p)


def reflect_pad_adjoint(g: torch.Tensor, r: int) -> torch.Tensor:
    """Adjoint of :func:`reflect_pad`: fold padded entries back onto their sources."""
    if r == 0:
        return g
    h, w = g.shape[-2] - 2 * r, g.shape[-1] - 2 * r
    rows = torch.as_tensor(_reflect_index(h, r), device=g.device)
    cols = torch.as_tensor(_reflect_index(w, r), device=g.device)
    out = g.new_zeros(*g.shape[:-2], h, g.shape[-1])
    out.index_add_(g.ndim - 2, rows, g)
    res = g.new_zeros(*g.shape[:-2], h, w)
    res.index_add_(g.ndim - 1, cols, out)
    return res


def unfold_blocks(x: torch.Tensor, k: int, stride: int = 1) -> torch.Tensor:
    """Extract ``k x k`` neighbourhoods centred on pixels.

    ``x`` is ``(C, H, W)`` (or ``(B, C, H, W)``); the result is
    ``(C, N, k*k)`` (or ``(B, C, N, k*k)``), each row one block in
    row-major order. Borders use reflection padding. With ``stride > 1``
    the centres are the middles of ``stride x stride`` tiles, so
    ``stride == k`` tiles the image.
    """
    r = _check_block_args(tuple(x.shape), k)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    B, C, H, W = x.shape
    xp = reflect_pad(x, r)
    cols = F.unfold(xp, k)  # (B, C*k*k, H*W)
    cols = cols.reshape(B, C, k * k, H, W)
    cy, cx = block_centers(H, stride), block_centers(W, stride)
    if stride > 1:
        cols = cols[:, :, :, cy.start :: stride, cx.start :: stride]
    blocks = cols.reshape(B, C, k * k, len(cy) * len(cx)).transpose(2, 3)
    return blocks.squeeze(0) if squeeze else blocks


def fold_blocks(
    blocks: torch.Tensor, shape: tuple[int, int], k: int, stride: int = 1
) -> torch.Tensor:
    """Adjoint of :func:`unfold_blocks`: scatter-add block entries back onto pixels."""
    H, W = shape
    r = _check_block_args(shape, k)
    squeeze = blocks.ndim == 3
    if squeeze:
        blocks = blocks.unsqueeze(0)
    B, C, N, kk = blocks.shape
    cy, cx = block_centers(H, stride), block_centers(W, stride)
    if kk != k * k or N != len(cy) * len(cx):
        raise ValueError(f"fold_blocks: block tensor {tuple(blocks.shape)} inconsistent with k={k}")
    Hp, Wp = H + 2 * r, W + 2 * r
    grid = blocks.reshape(B, C, len(cy), len(cx), k, k)
    padded = blocks.new_zeros(B, C, Hp, Wp)
    ys = torch.as_tensor(list(cy))
    xs = torch.as_tensor(list(cx))
    for dy in range(k):
        for dx in range(k):
            sub = padded[:, :, dy : dy + H, dx : dx + W]
            sub[:, :, ys[:, None], xs[None, :]] += grid[..., dy, dx]
    out = reflect_pad_adjoint(padded, r)
    return out.squeeze(0) if squeeze else out


def block_min_subtract(blocks: torch.Tensor) -> torch.Tensor:
    """Subtract each block's minimum (last axis).

    The gradient of the minimum goes to the first minimal entry in
    row-major order (``torch.argmin`` returns the first occurrence).
    """
    idx = torch.argmin(blocks, dim=-1, keepdim=True)
    return blocks - torch.gather(blocks, -1, idx)


def cosine_sim(u: torch.Tensor, v: torch.Tensor, eps: float = EPS_NORM) -> torch.Tensor:
    """Cosine similarity along the last axis.

    ``<u, v> / (|u| |v| + eps)``; when both norms are below ``eps`` the
    pair counts as identical and scores exactly 1.
    """
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"cosine_sim: length mismatch {u.shape[-1]} vs {v.shape[-1]}")
    dot = (u * v).sum(-1)
    nu = (u * u).sum(-1).clamp_min(_SQ_FLOOR).sqrt()
    nv = (v * v).sum(-1).clamp_min(_SQ_FLOOR).sqrt()
    sim = dot / (nu * nv + eps)
    degenerate = (nu < eps) & (nv < eps)
    return torch.where(degenerate, torch.ones_like(sim), sim)


def param_count(params: ParameterStore, prefix: str = "") -> int:
    return sum(t.numel() for name, t in params.items() if name.startswith(prefix))


def clone_params(
    params: ParameterStore, dtype: torch.dtype | None = None, requires_grad: bool = False
) -> ParameterStore:
    return {
        name: t.detach().to(dtype or t.dtype).clone().requires_grad_(requires_grad)
        for name, t in params.items()
    }


def params_dtype(params: ParameterStore) -> torch.dtype:
    return next(iter(params.values())).dtype


def _entry_indices(
    numel: int, max_entries: int | None, rng: np.random.Generator | None
) -> Iterable[int]:
    if max_entries is None or numel <= max_entries:
        return range(numel)
    rng = rng or np.random.default_rng(0)
    return sorted(rng.choice(numel, size=max_entries, replace=False).tolist())


def gradcheck_report(
    f: Callable[[ParameterStore], torch.Tensor],
    params: ParameterStore,
    h: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    oracle: Callable[[dict[str, np.ndarray]], float] | None = None,
) -> dict[str, float]:
    """Worst relative error per parameter tensor.

    The analytic gradient is taken in the dtype of ``params``. The central
    differences ``(f(p + h) - f(p - h)) / 2h`` run on a float64 copy of
    the same point, or, when ``oracle`` is given, on an ``np.longdouble``
    copy passed to ``oracle`` (an independent extended-precision objective,
    see :mod:`flwnet.reference`). Either way a float32 gradient is judged
    against a higher-precision reference. ``f`` must cast its constant
    inputs to the dtype of the parameters it is called with.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``. Large
    tensors can be subsampled with ``max_entries``.
    """
    work = clone_params(params, requires_grad=True)
    value = f(work)
    if value.numel() != 1:
        raise ValueError("gradcheck: f must return a scalar")
    check_finite(value.detach(), "gradcheck objective")
    names = list(work)
    grads = torch.autograd.grad(value, [work[n] for n in names], allow_unused=True)
    analytic = {
        n: (g if g is not None else torch.zeros_like(work[n])).detach().double()
        for n, g in zip(names, grads)
    }

    if oracle is None:
        probe = clone_params(params, dtype=torch.float64)
        flats = {n: probe[n].view(-1) for n in names}

        def evaluate() -> float:
            return f(probe).item()

        step = h
    else:
        probe = {n: params[n].detach().cpu().numpy().astype(np.longdouble) for n in names}
        flats = {n: probe[n].reshape(-1) for n in names}

        def evaluate():
            return oracle(probe)

        step = np.longdouble(h)
    report: dict[str, float] = {}
    with torch.no_grad():
        for name in names:
            flat = flats[name]
            worst = 0.0
            a_flat = analytic[name].view(-1)
            for i in _entry_indices(flat.shape[0], max_entries, rng):
                orig = flat[i].item() if oracle is None else flat[i]
                flat[i] = orig + step
                fp = evaluate()
                flat[i] = orig - step
                fm = evaluate()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"gradcheck: non-finite objective perturbing {name}[{i}]")
                num = float((fp - fm) / (2 * step))
                ana = a_flat[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
            report[name] = worst
    return report


def gradcheck(
    f: Callable[[ParameterStore], torch.Tensor],
    params: ParameterStore,
    h: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    oracle: Callable[[dict[str, np.ndarray]], float] | None = None,
) -> float:
    """Worst relative error between autograd and central differences over all parameters."""
    report = gradcheck_report(f, params, h=h, max_entries=max_entries, rng=rng, oracle=oracle)
    return max(report.values(), default=0.0)
