"""Gradient verification suite: every primitive, every loss and the end-to-end objective.

Each item builds random inputs for a trial, wraps the differentiable
inputs as a parameter store, and compares the torch gradient (in the
requested precision) with central differences of the extended-precision
re-implementation in :mod:`flwnet.reference`.

Inputs are kept away from the non-smooth points the check cannot see
through: ReLU inputs and L1 residuals have magnitude >= 0.05, block
entries are distinct. Random values are rounded to float32 first so both
precisions evaluate exactly the same point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from flwnet import diffcore, gfe, losses, network
from flwnet import reference as R
from flwnet.losses import LOSS_NAMES, RelLossConfig

__all__ = ["TOLERANCE", "CheckResult", "ITEMS", "run_suite", "format_results"]

TOLERANCE = {32: 1e-3, 64: 1e-5}
H_STEP = 1e-6
E2E_SIZE = 16
E2E_ENTRIES = 8

_DTYPES = {32: torch.float32, 64: torch.float64}


@dataclass(frozen=True)
class CheckResult:
    item: str
    worst: float
    tolerance: float
    trials: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


# An item maps (rng) -> (params as float64 numpy, torch objective, longdouble oracle, max_entries)
Case = tuple[dict[str, np.ndarray], Callable, Callable, "int | None"]


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _away_from_zero(rng, shape, margin=0.05, scale=1.0):
    mag = margin + scale * rng.random(shape)
    return _f32(np.where(rng.random(shape) < 0.5, -mag, mag))


def _case_linear(rng) -> Case:
    n_in, n_out = rng.integers(1, 9, size=2)
    p = {"x": _f32(rng.normal(size=n_in)), "W": _f32(rng.normal(size=(n_out, n_in))),
         "b": _f32(rng.normal(size=n_out))}
    r = _f32(rng.normal(size=n_out))

    def f(ps):
        return (torch.as_tensor(r, dtype=ps["x"].dtype) * diffcore.linear(ps["x"], ps["W"], ps["b"])).sum()

    def o(ps):
        return (R.as_ld(r) * R.linear(ps["x"], ps["W"], ps["b"])).sum()

    return p, f, o, None


def _case_conv2d(rng) -> Case:
    c_in, c_out = rng.integers(1, 4, size=2)
    h, w = rng.integers(3, 8, size=2)
    p = {"x": _f32(rng.normal(size=(c_in, h, w))), "K": _f32(rng.normal(size=(c_out, c_in, 3, 3))),
         "b": _f32(rng.normal(size=c_out))}
    r = _f32(rng.normal(size=(c_out, h, w)))

    def f(ps):
        return (torch.as_tensor(r, dtype=ps["x"].dtype) * diffcore.conv2d(ps["x"], ps["K"], ps["b"])).sum()

    def o(ps):
        return (R.as_ld(r) * R.conv2d(ps["x"], ps["K"], ps["b"])).sum()

    return p, f, o, None


def _case_activation(kind: str):
    def case(rng) -> Case:
        shape = tuple(rng.integers(1, 6, size=2))
        x = _away_from_zero(rng, shape, scale=2.0) if kind == "relu" else _f32(rng.normal(size=shape) * 2)
        r = _f32(rng.normal(size=shape))

        def f(ps):
            return (torch.as_tensor(r, dtype=ps["x"].dtype) * diffcore.activation(ps["x"], kind)).sum()

        def o(ps):
            return (R.as_ld(r) * R.activation(ps["x"], kind)).sum()

        return {"x": x}, f, o, None

    return case


def _case_unfold(rng) -> Case:
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 4))
    c = int(rng.integers(1, 3))
    h, w = rng.integers(k // 2 + 1, 9, size=2)
    x = _f32(rng.normal(size=(c, h, w)))
    n = len(diffcore.block_centers(h, stride)) * len(diffcore.block_centers(w, stride))
    r = _f32(rng.normal(size=(c, n, k * k)))

    def f(ps):
        return (torch.as_tensor(r, dtype=ps["x"].dtype) * diffcore.unfold_blocks(ps["x"], k, stride)).sum()

    def o(ps):
        return (R.as_ld(r) * R.unfold_blocks(ps["x"], k, stride)).sum()

    return {"x": x}, f, o, None


def _distinct(rng, shape, spacing=0.05):
    """Entries whose pairwise gaps along the last axis are at least ``spacing``."""
    ranks = np.argsort(rng.random(shape), axis=-1)
    return _f32(ranks * spacing + rng.random(shape) * spacing * 0.5 + rng.normal(size=shape[:-1] + (1,)))


def _case_block_min(rng) -> Case:
    c, n = rng.integers(1, 4, size=2)
    kk = int(rng.choice([1, 9, 25]))
    blocks = _distinct(rng, (c, n, kk))
    r = _f32(rng.normal(size=(c, n, kk)))

    def f(ps):
        return (torch.as_tensor(r, dtype=ps["b"].dtype) * diffcore.block_min_subtract(ps["b"])).sum()

    def o(ps):
        return (R.as_ld(r) * R.block_min_subtract(ps["b"])).sum()

    return {"b": blocks}, f, o, None


def _case_cosine(rng) -> Case:
    n = int(rng.integers(2, 10))
    p = {"u": _f32(rng.normal(size=n)), "v": _f32(rng.normal(size=n))}

    def f(ps):
        return diffcore.cosine_sim(ps["u"], ps["v"])

    def o(ps):
        return R.cosine_sim(ps["u"], ps["v"])

    return p, f, o, None


def _case_curve(rng) -> Case:
    shape = tuple(rng.integers(1, 6, size=2))
    t = int(rng.integers(1, 9))
    p = {"v": _f32(0.05 + 0.9 * rng.random(shape)), "alpha": _f32(rng.uniform(-0.9, 0.9, size=t))}
    r = _f32(rng.normal(size=shape))

    def f(ps):
        return (torch.as_tensor(r, dtype=ps["v"].dtype) * gfe.apply_curve(ps["v"], ps["alpha"])).sum()

    def o(ps):
        return (R.as_ld(r) * R.apply_curve(ps["v"], ps["alpha"])).sum()

    return p, f, o, None


def _case_gfe(rng) -> Case:
    cfg = gfe.GfeConfig()
    params = gfe.init_gfe_params(cfg, torch.Generator().manual_seed(int(rng.integers(2**31))), torch.float64)
    # a non-zero head so the check sees every layer
    params["gfe.layer4.weight"] = torch.as_tensor(rng.normal(size=(cfg.t, cfg.hidden_width)) * 0.3)
    hist = rng.random(cfg.bins) ** 3
    hist = _f32(hist / hist.sum())
    mu = float(_f32(rng.uniform(0.1, 0.9)))
    r = _f32(rng.normal(size=cfg.t))
    p = {k: _f32(v.numpy()) for k, v in params.items()}

    def f(ps):
        dtype = ps["gfe.layer0.weight"].dtype
        return (torch.as_tensor(r, dtype=dtype) * gfe.extract_features(hist, mu, ps, cfg)).sum()

    def o(ps):
        return (R.as_ld(r) * R.gfe_coefficients(R.as_ld(hist)[None], np.array([mu]), ps)[0]).sum()

    return p, f, o, None


def _image_pair(rng, h, w, l1_margin: bool = False):
    ref = 0.1 + 0.8 * rng.random((1, 3, h, w))
    if l1_margin:
        out = ref + _away_from_zero(rng, ref.shape, scale=0.05)
    else:
        out = 0.1 + 0.8 * rng.random((1, 3, h, w))
    return _f32(out), _f32(ref)


def _case_loss(name: str):
    cfg = RelLossConfig()

    def case(rng) -> Case:
        lo = 11 if name == "ssim" else 6
        h, w = rng.integers(lo, 15, size=2)
        out, ref = _image_pair(rng, h, w, l1_margin=(name == "l1"))

        def f(ps):
            return losses.total_loss(ps["out"], torch.as_tensor(ref), cfg, {name}).total

        def o(ps):
            return R.total_loss(ps["out"], R.as_ld(ref), (name,))

        return {"out": out}, f, o, None

    return case


def _case_end_to_end(rng) -> Case:
    seed = int(rng.integers(2**31))
    params = network.init_params(seed=seed, dtype=torch.float64)
    params["gfe.layer4.weight"] = torch.as_tensor(rng.normal(size=(8, 16)) * 0.3)
    x, y = _image_pair(rng, E2E_SIZE, E2E_SIZE)
    x = _f32(x * 0.4)  # a dark input, as in training
    mu = float(_f32(y.max(axis=1).mean()))
    p = {k: _f32(v.numpy()) for k, v in params.items()}

    def f(ps):
        dtype = ps["len.conv0.weight"].dtype
        out = network.forward_batch(torch.as_tensor(x, dtype=dtype), torch.tensor([mu], dtype=dtype), ps)
        return losses.total_loss(out, torch.as_tensor(y)).total

    def o(ps):
        return R.total_loss(R.forward(R.as_ld(x), np.array([mu]), ps), R.as_ld(y))

    return p, f, o, E2E_ENTRIES


ITEMS: dict[str, Callable] = {
    "linear": _case_linear,
    "conv2d": _case_conv2d,
    "activation.relu": _case_activation("relu"),
    "activation.tanh": _case_activation("tanh"),
    "activation.sigmoid": _case_activation("sigmoid"),
    "unfold_blocks": _case_unfold,
    "block_min_subtract": _case_block_min,
    "cosine_sim": _case_cosine,
    "apply_curve": _case_curve,
    "extract_features": _case_gfe,
    **{f"loss.{n}": _case_loss(n) for n in LOSS_NAMES},
    "end_to_end": _case_end_to_end,
}


def run_item(name: str, precision: int = 64, trials: int = 3, seed: int = 0) -> CheckResult:
    dtype = _DTYPES[precision]
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, sum(map(ord, name))])
        p, f, o, max_entries = ITEMS[name](rng)
        params = {k: torch.as_tensor(v, dtype=dtype) for k, v in p.items()}
        report = diffcore.gradcheck_report(
            f, params, h=H_STEP, max_entries=max_entries, rng=rng, oracle=o
        )
        worst = max(worst, max(report.values()))
    return CheckResult(name, worst, TOLERANCE[precision], trials, time.perf_counter() - t0)


def run_suite(
    precision: int = 64,
    trials: int = 3,
    seed: int = 0,
    items: list[str] | None = None,
    on_result: Callable[[CheckResult], None] | None = None,
) -> list[CheckResult]:
    if precision not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {precision}")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    results = []
    for name in items or list(ITEMS):
        res = run_item(name, precision, trials, seed)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.item) for r in results)
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(
            f"{r.item:<{width}}  worst rel. err {r.worst:.3e}  (tol {r.tolerance:g})  "
            f"{r.seconds:6.2f}s  {status}"
        )
    return "\n".join(lines)
