"""Global feature extraction: histogram + target brightness -> tone-curve coefficients.

A small MLP reads the V-channel histogram concatenated with ``mu`` and
emits ``t`` coefficients in (-1, 1). The quadratic curve
``v <- v + a * v * (1 - v)`` is then applied ``t`` times to the V channel,
giving the global brightness proposal that feeds the local network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from flwnet import imaging
from flwnet.diffcore import ParameterStore, activation, linear

__all__ = [
    "GfeConfig",
    "init_gfe_params",
    "check_gfe_params",
    "histogram_batch",
    "extract_features",
    "apply_curve",
    "propose_batch",
    "propose",
]


@dataclass(frozen=True)
class GfeConfig:
    bins: int = 32
    t: int = 8
    hidden_width: int = 16
    layers: int = 5

    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(n_out, n_in)`` for each affine layer."""
        widths = [self.bins + 1] + [self.hidden_width] * (self.layers - 1) + [self.t]
        return [(widths[i + 1], widths[i]) for i in range(self.layers)]

    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())


def _name(i: int, kind: str) -> str:
    return f"gfe.layer{i}.{kind}"


def init_gfe_params(
    cfg: GfeConfig = GfeConfig(),
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> ParameterStore:
    """He-uniform hidden layers; the output layer starts at zero so the curve is the identity."""
    params: ParameterStore = {}
    shapes = cfg.layer_shapes()
    for i, (n_out, n_in) in enumerate(shapes):
        if i == len(shapes) - 1:
            W = torch.zeros(n_out, n_in, dtype=dtype)
        else:
            bound = (6.0 / n_in) ** 0.5
            W = (torch.rand(n_out, n_in, generator=generator, dtype=dtype) * 2 - 1) * bound
        params[_name(i, "weight")] = W
        params[_name(i, "bias")] = torch.zeros(n_out, dtype=dtype)
    return params


def check_gfe_params(params: ParameterStore, cfg: GfeConfig) -> None:
    for i, (n_out, n_in) in enumerate(cfg.layer_shapes()):
        for kind, shape in (("weight", (n_out, n_in)), ("bias", (n_out,))):
            name = _name(i, kind)
            if name not in params:
                raise KeyError(f"missing parameter {name}")
            if tuple(params[name].shape) != shape:
                raise ValueError(
                    f"{name}: shape {tuple(params[name].shape)} inconsistent with config {shape}"
                )


def histogram_batch(v: torch.Tensor, bins: int) -> torch.Tensor:
    """Per-sample normalised histograms of ``v`` with shape ``(N, ...)`` -> ``(N, bins)``.

    Same binning rule as :func:`flwnet.imaging.histogram`; carries no gradient.
    """
    with torch.no_grad():
        n = v.shape[0]
        flat = v.reshape(n, -1)
        idx = torch.floor(flat.double() * bins).clamp_(0, bins - 1).long()
        idx += torch.arange(n)[:, None] * bins  # one bincount for the whole batch
        counts = torch.bincount(idx.reshape(-1), minlength=n * bins).reshape(n, bins)
        return (counts.double() / flat.shape[1]).to(v.dtype)


def extract_features(
    hist: torch.Tensor | np.ndarray,
    mu: torch.Tensor | float,
    params: ParameterStore,
    cfg: GfeConfig = GfeConfig(),
) -> torch.Tensor:
    """Curve coefficients for a histogram (``(B,)`` or batched ``(N, B)``) and brightness ``mu``."""
    check_gfe_params(params, cfg)
    dtype = params[_name(0, "weight")].dtype
    hist = torch.as_tensor(hist, dtype=dtype)
    if hist.shape[-1] != cfg.bins:
        raise ValueError(f"histogram has {hist.shape[-1]} bins, config expects {cfg.bins}")
    mu = torch.as_tensor(mu, dtype=dtype)
    mu = mu.reshape(*hist.shape[:-1], 1) if mu.numel() > 1 else mu.expand(*hist.shape[:-1], 1)
    h = torch.cat([hist, mu], dim=-1)
    last = cfg.layers - 1
    for i in range(cfg.layers):
        h = linear(h, params[_name(i, "weight")], params[_name(i, "bias")])
        h = activation(h, "tanh" if i == last else "relu")
    return h


def apply_curve(v: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Iterate ``v <- v + a_k v (1 - v)`` for each coefficient.

    ``v`` is a plane ``(H, W)`` with ``alpha`` of shape ``(t,)``, or a batch
    ``(N, ...)`` with ``alpha`` of shape ``(N, t)``.
    """
    if alpha.ndim == 1:
        coeffs = [alpha[k] for k in range(alpha.shape[0])]
    else:
        view = (alpha.shape[0],) + (1,) * (v.ndim - 1)
        coeffs = [alpha[:, k].reshape(view) for k in range(alpha.shape[1])]
    for a in coeffs:
        v = torch.addcmul(v, a * v, 1 - v)
    return v


def propose_batch(
    x: torch.Tensor, mu: torch.Tensor, params: ParameterStore, cfg: GfeConfig = GfeConfig()
) -> torch.Tensor:
    """Global proposal for a batch ``(N, 3, H, W)`` -> ``(N, 1, H, W)``."""
    v = x.amax(dim=1, keepdim=True)
    hist = histogram_batch(v, cfg.bins)
    alpha = extract_features(hist, mu, params, cfg)
    return apply_curve(v, alpha)


def propose(
    img: np.ndarray, mu: float, params: ParameterStore, cfg: GfeConfig = GfeConfig()
) -> np.ndarray:
    """Global brightness proposal (an ImagePlane) for one ImageRGB."""
    img = imaging.validate_image(img)
    if not 0.0 < mu <= 1.0:
        raise ValueError(f"mu must lie in (0, 1], got {mu}")
    v = imaging.v_channel(img)
    dtype = params[_name(0, "weight")].dtype
    with torch.no_grad():
        alpha = extract_features(imaging.histogram(v, cfg.bins), mu, params, cfg)
        out = apply_curve(torch.as_tensor(v, dtype=dtype), alpha)
    return out.double().numpy()
