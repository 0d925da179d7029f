"""Checkpoint container: model config + named arrays, bit-exact.

Layout: {magic "RTRC", version u16, config block (u32 length + key=value
lines)} then u32 record count and per-tensor records
{name u16+utf8, dtype u8, rank u8, dims u32[], raw data LE}.

Everything a resumed run needs rides in the same record table: parameters,
optimizer moments, RNG stream counters and step counters (as i64 scalars).
"""

from __future__ import annotations

import struct

import numpy as np

from .model import ModelConfig
from .tensor import Tensor

__all__ = ["save_checkpoint", "load_checkpoint", "params_to_arrays", "arrays_to_params"]

_MAGIC = b"RTRC"
_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.float32: 0, np.float64: 1, np.int64: 2}

_CFG_FIELDS = ("latent_h", "latent_w", "width", "heads", "layers", "window", "vocab", "patch")


def _pack_config(cfg: ModelConfig) -> bytes:
    text = "\n".join(f"{f}={getattr(cfg, f)}" for f in _CFG_FIELDS)
    return text.encode("utf-8")


def _unpack_config(blob: bytes) -> ModelConfig:
    fields = {}
    for line in blob.decode("utf-8").splitlines():
        key, val = line.split("=", 1)
        if key not in _CFG_FIELDS:
            raise ValueError(f"unknown config field {key!r} in checkpoint")
        fields[key] = int(val)
    return ModelConfig(**fields)


def save_checkpoint(path, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        cfg_blob = _pack_config(cfg)
        fh.write(struct.pack("<4sHI", _MAGIC, _VERSION, len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            code = _CODES.get(arr.dtype.type)
            if code is None:
                raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            # rank/shape taken before any contiguity copy: 0-d must stay 0-d
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def load_checkpoint(path):
    """Returns (ModelConfig, {name: array})."""
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sHI"))
        magic, version, cfg_len = struct.unpack("<4sHI", head)
        if magic != _MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = _unpack_config(fh.read(cfg_len))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", fh.read(2))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            dt = _DTYPES[code]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise ValueError(f"checkpoint truncated in record {name!r}")
            arrays[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
    return cfg, arrays


def params_to_arrays(params: dict[str, Tensor], prefix: str = "p.") -> dict[str, np.ndarray]:
    return {prefix + name: p.data for name, p in params.items()}


def arrays_to_params(arrays: dict[str, np.ndarray], prefix: str = "p.") -> dict[str, Tensor]:
    out = {}
    for name, arr in arrays.items():
        if name.startswith(prefix):
            out[name[len(prefix):]] = Tensor(arr, requires_grad=True)
    return out
