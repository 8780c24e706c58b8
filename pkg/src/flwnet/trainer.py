"""Adam training of the GFE + LEN pipeline on paired crops.

Each step draws ``batch_size`` random pairs (with replacement) from a
seeded generator, crops them, sets the per-sample target brightness to
the mean V of the cropped reference, and minimises the unit-weight sum of
the enabled losses. Runs with the same config and seed produce identical
loss logs and checkpoints.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from flwnet import imaging, network, reference
from flwnet.checkpoint import ModelCheckpoint, save_checkpoint
from flwnet.diffcore import (
    NonFiniteError,
    ParameterStore,
    clone_params,
    gradcheck_report,
    params_dtype,
)
from flwnet.gfe import GfeConfig
from flwnet.losses import LOSS_NAMES, RelLossConfig, parse_loss_flags, total_loss
from flwnet.network import LenConfig

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "TrainingError",
    "GradientGateError",
    "TrainResult",
    "train",
    "gradient_gate",
    "validation_loss",
    "LOG_FIELDS",
]

LOG_FIELDS = ("step", *LOSS_NAMES, "total", "wall_time")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 171
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 30000
    crop: int = 128
    flips: bool = True
    losses: tuple[str, ...] = LOSS_NAMES
    seed: int = 0
    checkpoint_every: int = 1000
    gradcheck_gate: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")
        losses = self.losses
        if isinstance(losses, str):
            losses = parse_loss_flags(losses)
        # canonical order keeps the effective config stable
        flags = parse_loss_flags(",".join(losses))
        object.__setattr__(self, "losses", tuple(n for n in LOSS_NAMES if n in flags))

    @property
    def enabled(self) -> frozenset[str]:
        return frozenset(self.losses)


@dataclass
class AdamState:
    m: ParameterStore
    v: ParameterStore
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParameterStore) -> AdamState:
        return cls(
            {k: torch.zeros_like(p, requires_grad=False) for k, p in params.items()},
            {k: torch.zeros_like(p, requires_grad=False) for k, p in params.items()},
        )


def adam_step(
    params: ParameterStore,
    grads: dict[str, torch.Tensor],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[ParameterStore, AdamState]:
    """Bias-corrected Adam, applied in place. Non-finite gradients abort before any update."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise NonFiniteError(f"adam_step: {bad} non-finite gradient entries in {name}")
    state.step += 1
    t = state.step
    c1 = 1 - cfg.beta1**t
    c2 = 1 - cfg.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            denom = (v / c2).sqrt_().add_(cfg.adam_eps)
            p.addcdiv_(m / c1, denom, value=-cfg.learning_rate)
    return params, state


class TrainingError(RuntimeError):
    """Training aborted; ``checkpoint`` holds the last good state."""

    def __init__(self, msg: str, checkpoint: ModelCheckpoint | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class GradientGateError(TrainingError):
    pass


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    log: list[dict] = field(default_factory=list)


def _as_bytes(data) -> tuple[list[np.ndarray], list[np.ndarray], list[str]]:
    """Keep the dataset as uint8 arrays; crops are converted to reals on demand."""
    if isinstance(data, imaging.DatasetManifest):
        if len(data) == 0:
            raise ValueError("dataset is empty")
        pairs = (data.load(i) for i in range(len(data)))
    else:
        pairs = list(data)
        if not pairs:
            raise ValueError("dataset is empty")
    lows, highs, names = [], [], []
    for p in pairs:
        lows.append(imaging.to_bytes(p.low))
        highs.append(imaging.to_bytes(p.high))
        names.append(p.name)
    return lows, highs, names


def _draw_batch(lows, highs, cfg: TrainConfig, rng: np.random.Generator, dtype):
    idx = rng.integers(0, len(lows), size=cfg.batch_size)
    lo, hi, mus = [], [], []
    for i in idx:
        win = imaging.draw_window(*lows[i].shape[:2], cfg.crop, rng, cfg.flips)
        low = win.apply(lows[i]) / 255.0
        high = win.apply(highs[i]) / 255.0
        lo.append(low)
        hi.append(high)
        mus.append(imaging.mean_v(high))
    x = torch.from_numpy(np.stack(lo).transpose(0, 3, 1, 2).copy()).to(dtype)
    y = torch.from_numpy(np.stack(hi).transpose(0, 3, 1, 2).copy()).to(dtype)
    mu = torch.tensor(mus, dtype=dtype)
    # the target brightness must be the crop's own reference mean
    crop_mu = y.double().amax(dim=1).mean(dim=(1, 2))
    assert torch.allclose(mu.double(), crop_mu, rtol=0, atol=1e-6), "mu does not match crops"
    return x, y, mu


def gradient_gate(
    params: ParameterStore,
    low: np.ndarray,
    high: np.ndarray,
    gfe_cfg: GfeConfig,
    len_cfg: LenConfig,
    rel_cfg: RelLossConfig,
    enabled: frozenset[str],
    size: int = 16,
    tol: float = 1e-5,
    max_entries: int = 4,
    bias_jitter: float = 0.05,
) -> dict[str, float]:
    """Float64 gradcheck of the training objective on a small crop; raises on failure.

    Central differences come from the extended-precision reference
    implementation, evaluated at the same parameter values. Biases are
    offset by small seeded values first: zero-initialised biases over the
    black regions of real 8-bit images put ReLU inputs exactly on the kink,
    where no finite difference agrees with a subgradient.
    """
    p64 = clone_params(params, dtype=torch.float64)
    jitter = np.random.default_rng(1)
    for name, p in p64.items():
        if name.endswith(".bias"):
            p += torch.as_tensor(jitter.uniform(-bias_jitter, bias_jitter, p.shape))
    low = np.ascontiguousarray(low[:size, :size])
    high = np.ascontiguousarray(high[:size, :size])
    x = network.image_to_tensor(low, torch.float64)
    y = network.image_to_tensor(high, torch.float64)
    mu = imaging.mean_v(high)

    def objective(ps: ParameterStore) -> torch.Tensor:
        out = network.forward_batch(x, torch.tensor([mu], dtype=torch.float64), ps, gfe_cfg, len_cfg)
        return total_loss(out, y, rel_cfg, enabled).total

    xr, yr = reference.as_ld(x), reference.as_ld(y)

    def oracle(ps) -> float:
        out = reference.forward(
            xr, np.array([mu]), ps, gfe_cfg.bins, gfe_cfg.layers, len_cfg.inject_at
        )
        return reference.total_loss(
            out, yr, enabled, rel_cfg.block_k, rel_cfg.block_stride, rel_cfg.eps_norm
        )

    report = gradcheck_report(
        objective, p64, h=1e-6, max_entries=max_entries, rng=np.random.default_rng(0), oracle=oracle
    )
    worst = max(report, key=report.get)
    if report[worst] >= tol:
        raise GradientGateError(
            f"gradient sanity gate failed: {worst} rel. err {report[worst]:.3e} >= {tol:g}"
        )
    return report


def validation_loss(
    params: ParameterStore,
    pairs: Sequence[imaging.PairedSample],
    gfe_cfg: GfeConfig = GfeConfig(),
    len_cfg: LenConfig = LenConfig(),
    rel_cfg: RelLossConfig = RelLossConfig(),
    enabled: frozenset[str] = frozenset(LOSS_NAMES),
) -> float:
    """Mean total loss over full validation pairs, each enhanced with its own reference mu."""
    dtype = params_dtype(params)
    values = []
    with torch.no_grad():
        for p in pairs:
            x = network.image_to_tensor(p.low, dtype)
            y = network.image_to_tensor(p.high, dtype)
            mu = torch.tensor([p.mu_ref], dtype=dtype)
            out = network.forward_batch(x, mu, params, gfe_cfg, len_cfg)
            values.append(float(total_loss(out, y, rel_cfg, enabled).total))
    return float(np.mean(values))


def _snapshot(params, state, gfe_cfg, len_cfg, cfg, rel_cfg) -> ModelCheckpoint:
    return ModelCheckpoint(
        gfe_cfg,
        len_cfg,
        {k: v.detach().clone() for k, v in params.items()},
        step=state.step,
        seed=cfg.seed,
        adam_m={k: v.clone() for k, v in state.m.items()},
        adam_v={k: v.clone() for k, v in state.v.items()},
        meta={"train": _jsonable(asdict(cfg)), "loss": asdict(rel_cfg)},
    )


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def train(
    data: imaging.DatasetManifest | Sequence[imaging.PairedSample],
    cfg: TrainConfig = TrainConfig(),
    gfe_cfg: GfeConfig = GfeConfig(),
    len_cfg: LenConfig = LenConfig(),
    rel_cfg: RelLossConfig = RelLossConfig(),
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    init: ModelCheckpoint | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train and return the final checkpoint plus the per-step loss log.

    The loss log is appended to ``log_path`` as JSON lines (truncated on a
    fresh start). ``checkpoint_path`` is rewritten atomically every
    ``checkpoint_every`` steps and at the end. A non-finite loss or
    gradient aborts with :class:`TrainingError` carrying (and saving to
    ``checkpoint_path``) the last good state.
    """
    lows, highs, _ = _as_bytes(data)
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        params = network.init_params(gfe_cfg, len_cfg, cfg.seed)
        state = AdamState.zeros_like(params)
    else:
        gfe_cfg, len_cfg = init.gfe_cfg, init.len_cfg
        params = {k: v.detach().clone() for k, v in init.params.items()}
        if init.adam_m is not None:
            state = AdamState(
                {k: v.clone() for k, v in init.adam_m.items()},
                {k: v.clone() for k, v in init.adam_v.items()},
                init.step,
            )
        else:
            state = AdamState.zeros_like(params)
            state.step = init.step
    dtype = params_dtype(params)
    for p in params.values():
        p.requires_grad_(True)
    enabled = cfg.enabled

    if cfg.gradcheck_gate:
        gate_size = min(16, *lows[0].shape[:2])
        try:
            gradient_gate(
                params, lows[0] / 255.0, highs[0] / 255.0, gfe_cfg, len_cfg, rel_cfg, enabled,
                size=gate_size,
            )
        except GradientGateError as exc:
            raise GradientGateError(str(exc), None) from None

    ckpt_path = Path(checkpoint_path) if checkpoint_path is not None else None
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w" if state.step == 0 else "a", encoding="utf-8")

    names = list(params)
    log: list[dict] = []
    t0 = time.perf_counter()
    def abort(msg: str, cause: BaseException | None = None):
        # failures are detected before the update, so the live state is the last good one
        good = _snapshot(params, state, gfe_cfg, len_cfg, cfg, rel_cfg)
        if ckpt_path is not None:
            save_checkpoint(good, ckpt_path)
        raise TrainingError(msg, good) from cause

    try:
        while state.step < cfg.max_steps:
            x, y, mu = _draw_batch(lows, highs, cfg, rng, dtype)
            out = network.forward_batch(x, mu, params, gfe_cfg, len_cfg)
            bundle = total_loss(out, y, rel_cfg, enabled)
            values = bundle.as_dict()
            if not all(math.isfinite(v) for v in values.values()):
                abort(f"non-finite loss at step {state.step}: {values}")
            grads = torch.autograd.grad(bundle.total, [params[n] for n in names])
            record = {"step": state.step, **values, "wall_time": time.perf_counter() - t0}
            try:
                adam_step(params, dict(zip(names, grads)), state, cfg)
            except NonFiniteError as exc:
                abort(str(exc), exc)
            log.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(record)
            every = cfg.checkpoint_every
            if ckpt_path is not None and every and state.step % every == 0:
                save_checkpoint(_snapshot(params, state, gfe_cfg, len_cfg, cfg, rel_cfg), ckpt_path)
    finally:
        if log_fh is not None:
            log_fh.close()

    final = _snapshot(params, state, gfe_cfg, len_cfg, cfg, rel_cfg)
    for p in final.params.values():
        p.requires_grad_(False)
    if ckpt_path is not None:
        save_checkpoint(final, ckpt_path)
    return TrainResult(final, log)
