"""Binary checkpoint container.

Layout::

    b"FLWN" | version (1 byte) | header length (uint32 LE) | JSON header
    | float32 LE tensor payloads | CRC32 of the payload (uint32 LE)

The header holds both configs, the step count, the training seed and a
tensor directory (name, shape, byte offset into the payload). JSON is
written with sorted keys and no whitespace so identical checkpoints
serialise to identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from flwnet import network
from flwnet.diffcore import ParameterStore
from flwnet.gfe import GfeConfig, check_gfe_params
from flwnet.network import LenConfig

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CheckpointError",
    "ModelCheckpoint",
    "save_checkpoint",
    "load_checkpoint",
    "atomic_write",
]

MAGIC = b"FLWN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sBI")
_CRC = struct.Struct("<I")


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


@dataclass
class ModelCheckpoint:
    gfe_cfg: GfeConfig
    len_cfg: LenConfig
    params: ParameterStore
    step: int = 0
    seed: int = 0
    adam_m: ParameterStore | None = None
    adam_v: ParameterStore | None = None
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        check_gfe_params(self.params, self.gfe_cfg)
        for i, (c_out, c_in) in enumerate(self.len_cfg.conv_shapes()):
            name = f"len.conv{i}.weight"
            if name not in self.params:
                raise KeyError(f"missing parameter {name}")
            if tuple(self.params[name].shape) != (c_out, c_in, 3, 3):
                raise ValueError(f"{name}: shape inconsistent with {self.len_cfg}")
        if (self.adam_m is None) != (self.adam_v is None):
            raise ValueError("Adam moments must be given together")

    @classmethod
    def fresh(
        cls, gfe_cfg: GfeConfig = GfeConfig(), len_cfg: LenConfig = LenConfig(), seed: int = 0
    ) -> ModelCheckpoint:
        return cls(gfe_cfg, len_cfg, network.init_params(gfe_cfg, len_cfg, seed), seed=seed)

    def enhance(self, img: np.ndarray, mu: float) -> np.ndarray:
        return network.enhance(img, mu, self.params, self.gfe_cfg, self.len_cfg)

    def param_counts(self) -> dict[str, int]:
        return network.total_param_count(self.params)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = dict(self.params)
        if self.adam_m is not None:
            out.update({f"adam.m.{k}": v for k, v in self.adam_m.items()})
            out.update({f"adam.v.{k}": v for k, v in self.adam_v.items()})
        return out


def _to_le_f32(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a sibling temp file, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def to_bytes(ckpt: ModelCheckpoint) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, t in ckpt.tensors().items():
        blob = _to_le_f32(t)
        directory.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = {
        "gfe": asdict(ckpt.gfe_cfg),
        "len": asdict(ckpt.len_cfg),
        "step": ckpt.step,
        "seed": ckpt.seed,
        "has_adam": ckpt.adam_m is not None,
        "meta": ckpt.meta,
        "tensors": directory,
        "payload_bytes": len(payload),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return (
        _PREFIX.pack(MAGIC, ckpt.version, len(head))
        + head
        + payload
        + _CRC.pack(zlib.crc32(payload))
    )


def from_bytes(data: bytes) -> ModelCheckpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    start = _PREFIX.size + head_len
    try:
        header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
        n_payload = int(header["payload_bytes"])
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    end = start + n_payload
    if len(data) != end + _CRC.size:
        raise CheckpointError(
            f"checksum error: expected {end + _CRC.size} bytes, file has {len(data)}"
        )
    payload = data[start:end]
    (crc,) = _CRC.unpack_from(data, end)
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checksum error: payload CRC32 mismatch")

    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(shape))
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    adam_m = adam_v = None
    if header["has_adam"]:
        adam_m = {k[len("adam.m.") :]: v for k, v in tensors.items() if k.startswith("adam.m.")}
        adam_v = {k[len("adam.v.") :]: v for k, v in tensors.items() if k.startswith("adam.v.")}
    return ModelCheckpoint(
        gfe_cfg=GfeConfig(**header["gfe"]),
        len_cfg=LenConfig(**header["len"]),
        params=params,
        step=header["step"],
        seed=header["seed"],
        adam_m=adam_m,
        adam_v=adam_v,
        meta=header["meta"],
        version=version,
    )


def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> None:
    atomic_write(path, to_bytes(ckpt))


def load_checkpoint(path: str | os.PathLike) -> ModelCheckpoint:
    return from_bytes(Path(path).read_bytes())
