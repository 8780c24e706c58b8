"""JSON run configuration with sections mirroring the config dataclasses.

::

    {"train": {...TrainConfig}, "loss": {...RelLossConfig},
     "gfe": {...GfeConfig}, "len": {...LenConfig}}

Unknown sections or keys are rejected with an error naming them.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from flwnet.gfe import GfeConfig
from flwnet.losses import RelLossConfig
from flwnet.network import LenConfig
from flwnet.trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_config"]

_SECTIONS = {"train": TrainConfig, "loss": RelLossConfig, "gfe": GfeConfig, "len": LenConfig}


class ConfigError(ValueError):
    pass


def _build(cls, section: str, values: dict[str, Any]):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: RelLossConfig = field(default_factory=RelLossConfig)
    gfe: GfeConfig = field(default_factory=GfeConfig)
    len: LenConfig = field(default_factory=LenConfig)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        for key in data:
            if key not in _SECTIONS:
                raise ConfigError(f"unknown config key {key}")
        return cls(**{k: _build(_SECTIONS[k], k, v) for k, v in data.items()})

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for name in _SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def override(self, section: str, **values) -> RunConfig:
        """Apply non-``None`` overrides to one section (flags win over the file)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        merged = {**asdict(getattr(self, section)), **values}
        return replace(self, **{section: _build(_SECTIONS[section], section, merged)})


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)
