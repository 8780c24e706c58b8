"""Fused min-subtracted block cosine similarity with a hand-written adjoint.

For every block centre ``c`` of a reflect-padded map pair ``(x, y)``::

    a = block_x(c) - min(block_x(c)),  b = block_y(c) - min(block_y(c))
    s(c) = <a, b> / (|a| |b| + eps)        (1 when |a| < eps and |b| < eps)

This equals ``cosine_sim(block_min_subtract(unfold_blocks(.)))`` from
:mod:`flwnet.diffcore` without materialising the ``k*k`` times larger
block tensor. The block sums come from separable window sums of
``x, y, x*x, y*y, x*y`` and are expanded around the block minimum, all in
float64 (the expansion cancels to ~1e-14, far below ``eps**2``). The
backward pass is the transposed window sum plus a scatter of the minimum's
gradient onto the first minimal entry in row-major order.
"""

from __future__ import annotations

import numpy as np
import torch
from numba import njit

_SQ_FLOOR = 1e-30


@njit(cache=True)
def _window_sums(x, y, k):
    """Valid ``k x k`` window sums of x, y, x*x, y*y, x*y: (M, A, B) -> (5, M, A-k+1, B-k+1)."""
    M, A, B = x.shape
    na, nb = A - k + 1, B - k + 1
    out = np.zeros((5, M, na, nb))
    rows = np.empty((5, A, nb))
    for m in range(M):
        rows[:] = 0.0
        for i in range(A):
            for d in range(k):
                for j in range(nb):
                    a = x[m, i, j + d]
                    b = y[m, i, j + d]
                    rows[0, i, j] += a
                    rows[1, i, j] += b
                    rows[2, i, j] += a * a
                    rows[3, i, j] += b * b
                    rows[4, i, j] += a * b
        for q in range(5):
            for i in range(na):
                for d in range(k):
                    for j in range(nb):
                        out[q, m, i, j] += rows[q, i + d, j]
    return out


@njit(cache=True)
def _transpose_sums(c, k):
    """Adjoint of the valid window sum for stacked maps: (Q, M, H, W) -> (Q, M, H+k-1, W+k-1)."""
    Q, M, H, W = c.shape
    Hp, Wp = H + k - 1, W + k - 1
    out = np.zeros((Q, M, Hp, Wp))
    rows = np.empty((H, Wp))
    for q in range(Q):
        for m in range(M):
            rows[:] = 0.0
            for i in range(H):
                for d in range(k):
                    for j in range(W):
                        rows[i, j + d] += c[q, m, i, j]
            for i in range(H):
                for d in range(k):
                    for j in range(Wp):
                        out[q, m, i + d, j] += rows[i, j]
    return out


@njit(cache=True)
def _block_min(p, k, stride, ny, nx):
    """Per-centre block minimum (value only; vectorises well)."""
    M, Hp, Wp = p.shape
    off = stride // 2
    rmin = np.empty((Hp, nx))
    mins = np.empty((M, ny, nx))
    for m in range(M):
        for i in range(Hp):
            for cj in range(nx):
                rmin[i, cj] = p[m, i, off + cj * stride]
            for d in range(1, k):
                for cj in range(nx):
                    rmin[i, cj] = min(rmin[i, cj], p[m, i, off + cj * stride + d])
        for ci in range(ny):
            i0 = off + ci * stride
            for cj in range(nx):
                mins[m, ci, cj] = rmin[i0, cj]
            for d in range(1, k):
                for cj in range(nx):
                    mins[m, ci, cj] = min(mins[m, ci, cj], rmin[i0 + d, cj])
    return mins


@njit(cache=True)
def _block_argmin(p, k, stride, ny, nx):
    """Per-centre minimum and its flat padded index (first in row-major order).

    Sliding minimum along rows first, then down the k rows. Strict ``<``
    keeps the earliest column within a row and the earliest row overall.
    """
    M, Hp, Wp = p.shape
    off = stride // 2
    rmin = np.empty((M, Hp, nx))
    rarg = np.empty((M, Hp, nx), dtype=np.int64)
    for m in range(M):
        for i in range(Hp):
            for cj in range(nx):
                j0 = off + cj * stride
                rmin[m, i, cj] = p[m, i, j0]
                rarg[m, i, cj] = i * Wp + j0
            for d in range(1, k):
                for cj in range(nx):
                    j = off + cj * stride + d
                    v = p[m, i, j]
                    if v < rmin[m, i, cj]:
                        rmin[m, i, cj] = v
                        rarg[m, i, cj] = i * Wp + j
    mins = np.empty((M, ny, nx))
    args = np.empty((M, ny, nx), dtype=np.int64)
    for m in range(M):
        for ci in range(ny):
            i0 = off + ci * stride
            for cj in range(nx):
                mins[m, ci, cj] = rmin[m, i0, cj]
                args[m, ci, cj] = rarg[m, i0, cj]
            for d in range(1, k):
                for cj in range(nx):
                    v = rmin[m, i0 + d, cj]
                    if v < mins[m, ci, cj]:
                        mins[m, ci, cj] = v
                        args[m, ci, cj] = rarg[m, i0 + d, cj]
    return mins, args


@njit(cache=True)
def _similarity(sx, sy, sxx, syy, sxy, mx, my, K, eps, out, stats):
    """Expand the window sums around the minima; ``stats`` keeps (dot, |a|^2, |b|^2, sum a, sum b)."""
    M, ny, nx = out.shape
    for m in range(M):
        for i in range(ny):
            for j in range(nx):
                a0 = mx[m, i, j]
                b0 = my[m, i, j]
                suma = sx[m, i, j] - K * a0
                sumb = sy[m, i, j] - K * b0
                dot = sxy[m, i, j] - b0 * sx[m, i, j] - a0 * sy[m, i, j] + K * a0 * b0
                sa = max(sxx[m, i, j] - 2.0 * a0 * sx[m, i, j] + K * a0 * a0, 0.0)
                sb = max(syy[m, i, j] - 2.0 * b0 * sy[m, i, j] + K * b0 * b0, 0.0)
                stats[m, i, j, 0] = dot
                stats[m, i, j, 1] = sa
                stats[m, i, j, 2] = sb
                stats[m, i, j, 3] = suma
                stats[m, i, j, 4] = sumb
                na = np.sqrt(max(sa, _SQ_FLOOR))
                nb = np.sqrt(max(sb, _SQ_FLOOR))
                if na < eps and nb < eps:
                    out[m, i, j] = 1.0
                else:
                    out[m, i, j] = dot / (na * nb + eps)


@njit(cache=True)
def _coefficients(g, stats, mx, my, eps, H, W, stride):
    """Per-centre adjoint weights placed on the full ``(H, W)`` centre grid.

    With ``u = g / D`` and ``w = g * dot * nb / (na D^2)`` the gradient of
    the x-side is ``sum_c u (y_p - my) - w (x_p - mx)`` over centres whose
    block covers ``p``, minus the same quantity summed over the block at
    the block's argmin.
    """
    M, ny, nx = g.shape
    off = stride // 2
    # rows of C: u, u*my, u*mx, wa, wa*mx, wb, wb*my
    C = np.zeros((7, M, H, W))
    tot_x = np.zeros((M, ny, nx))
    tot_y = np.zeros((M, ny, nx))
    for m in range(M):
        for ci in range(ny):
            for cj in range(nx):
                gc = g[m, ci, cj]
                if gc == 0.0:
                    continue
                dot = stats[m, ci, cj, 0]
                sa = stats[m, ci, cj, 1]
                sb = stats[m, ci, cj, 2]
                na = np.sqrt(max(sa, _SQ_FLOOR))
                nb = np.sqrt(max(sb, _SQ_FLOOR))
                if na < eps and nb < eps:
                    continue
                D = na * nb + eps
                u = gc / D
                wa = gc * dot * nb / (na * D * D) if sa > _SQ_FLOOR else 0.0
                wb = gc * dot * na / (nb * D * D) if sb > _SQ_FLOOR else 0.0
                i = off + ci * stride
                j = off + cj * stride
                C[0, m, i, j] = u
                C[1, m, i, j] = u * my[m, ci, cj]
                C[2, m, i, j] = u * mx[m, ci, cj]
                C[3, m, i, j] = wa
                C[4, m, i, j] = wa * mx[m, ci, cj]
                C[5, m, i, j] = wb
                C[6, m, i, j] = wb * my[m, ci, cj]
                tot_x[m, ci, cj] = u * stats[m, ci, cj, 4] - wa * stats[m, ci, cj, 3]
                tot_y[m, ci, cj] = u * stats[m, ci, cj, 3] - wb * stats[m, ci, cj, 4]
    return C, tot_x, tot_y


@njit(cache=True)
def _scatter_min(grad, idx, tot):
    M, ny, nx = tot.shape
    Wp = grad.shape[2]
    for m in range(M):
        for i in range(ny):
            for j in range(nx):
                t = tot[m, i, j]
                if t != 0.0:
                    f = idx[m, i, j]
                    grad[m, f // Wp, f % Wp] -= t


def _grid(n_padded: int, k: int, stride: int) -> int:
    n = n_padded - 2 * (k // 2)
    return len(range(stride // 2, n, stride))


def _as_f64(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().reshape(-1, *t.shape[-2:]).to(torch.float64).numpy())


def _centres(full: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return full
    off = stride // 2
    return np.ascontiguousarray(full[:, off::stride, off::stride])


class BlockCosine(torch.autograd.Function):
    """``(..., Hp, Wp)`` padded maps -> ``(..., ny, nx)`` block similarities."""

    @staticmethod
    def forward(ctx, xp, yp, k: int, stride: int, eps: float):
        lead = xp.shape[:-2]
        Hp, Wp = xp.shape[-2:]
        ny, nx = _grid(Hp, k, stride), _grid(Wp, k, stride)
        xa, ya = _as_f64(xp), _as_f64(yp)
        mx = _block_min(xa, k, stride, ny, nx)
        my = _block_min(ya, k, stride, ny, nx)
        sums = _window_sums(xa, ya, k)
        if stride > 1:
            off = stride // 2
            sums = np.ascontiguousarray(sums[:, :, off::stride, off::stride])
        stats = np.empty((xa.shape[0], ny, nx, 5))
        out = np.empty((xa.shape[0], ny, nx))
        _similarity(sums[0], sums[1], sums[2], sums[3], sums[4], mx, my, float(k * k), eps, out, stats)
        ctx.arrays = (xa, ya, mx, my, stats)
        ctx.meta = (k, stride, eps, xp.shape, yp.shape, xp.dtype, yp.dtype)
        return torch.from_numpy(out).reshape(*lead, ny, nx).to(xp.dtype)

    @staticmethod
    def backward(ctx, grad):
        xa, ya, mx, my, stats = ctx.arrays
        k, stride, eps, xshape, yshape, xdtype, ydtype = ctx.meta
        want_x, want_y = ctx.needs_input_grad[0], ctx.needs_input_grad[1]
        Hp, Wp = xa.shape[1:]
        H, W = Hp - 2 * (k // 2), Wp - 2 * (k // 2)
        ny, nx = mx.shape[1:]
        g = np.ascontiguousarray(
            grad.detach().reshape(xa.shape[0], ny, nx).to(torch.float64).numpy()
        )
        C, tot_x, tot_y = _coefficients(g, stats, mx, my, eps, H, W, stride)
        out_x = out_y = None
        if want_x:
            # T(u) * y - T(u my) - x * T(wa) + T(wa mx), then the minimum's share
            T = _transpose_sums(C[np.array([0, 1, 3, 4])], k)
            gx = ya * T[0] - T[1] - xa * T[2] + T[3]
            _, ax = _block_argmin(xa, k, stride, ny, nx)
            _scatter_min(gx, ax, tot_x)
            out_x = torch.from_numpy(gx).reshape(xshape).to(xdtype)
        if want_y:
            T = _transpose_sums(C[np.array([0, 2, 5, 6])], k)
            gy = xa * T[0] - T[1] - ya * T[2] + T[3]
            _, ay = _block_argmin(ya, k, stride, ny, nx)
            _scatter_min(gy, ay, tot_y)
            out_y = torch.from_numpy(gy).reshape(yshape).to(ydtype)
        return out_x, out_y, None, None, None


def block_cosine(xp: torch.Tensor, yp: torch.Tensor, k: int, stride: int = 1, eps: float = 1e-6):
    return BlockCosine.apply(xp, yp, k, stride, eps)
