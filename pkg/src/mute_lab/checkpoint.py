"""Versioned binary checkpoints.

Layout (all integers little-endian):

    magic "MUTE" | u32 version | u32 len + config text | u64 step
    | u32 len + rng-state JSON | u32 param count
    | per param: u16 name len, name, u8 ndim, u32 dims..., f64 data
    | u8 optimizer flag | if set: u64 adam step, first-moment blocks,
      second-moment blocks (f64, shapes follow the parameter order)

The config text is sorted `key=value` lines describing the model, so a
checkpoint is self-contained: the model is rebuilt from it, then the
stored parameter blocks overwrite the fresh initialization.  Round
trips are bitwise exact because values travel as raw float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from .errors import CheckpointFormatError
from .model import ModelConfig, MuteModel
from .multiunit import NoiseKind

MAGIC = b"MUTE"
VERSION = 1


def config_to_text(config: ModelConfig) -> str:
    items = {}
    for f in fields(ModelConfig):
        v = getattr(config, f.name)
        if f.name == "noises":
            v = ",".join(str(k) for k in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        items[f.name] = str(v)
    return "".join(f"{k}={items[k]}\n" for k in sorted(items))


def config_from_text(text: str) -> ModelConfig:
    raw = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        raw[key] = value
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in raw:
            continue
        v = raw.pop(f.name)
        kind = str(f.type)
        if f.name == "noises":
            kwargs[f.name] = tuple(NoiseKind.parse(s) for s in v.split(","))
        elif kind == "bool":
            kwargs[f.name] = v == "true"
        elif kind == "int":
            kwargs[f.name] = int(v)
        elif kind == "float":
            kwargs[f.name] = float(v)
        else:
            kwargs[f.name] = v
    if raw:
        raise CheckpointFormatError(f"unknown config keys {sorted(raw)}")
    return ModelConfig(**kwargs)


@dataclass
class CheckpointData:
    config: ModelConfig
    seed: int
    step: int
    params: dict
    adam: tuple | None  # (step, m dict, v dict)


def _write_block(fh, data: bytes):
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError("unexpected end of checkpoint file")
    return data


def _read_block(fh) -> bytes:
    (n,) = struct.unpack("<I", _read(fh, 4))
    return _read(fh, n)


def _write_array(fh, a: np.ndarray):
    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_array(fh, shape) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    flat = np.frombuffer(_read(fh, 8 * count), dtype="<f8")
    return flat.reshape(shape).astype(np.float64)


def save_checkpoint(path, model: MuteModel, step: int, adam=None) -> None:
    """``adam`` is (adam step, m dict, v dict) or an object with
    ``.t``, ``.m``, ``.v`` attributes, or None."""
    params = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_block(fh, config_to_text(model.config).encode("utf-8"))
        fh.write(struct.pack("<Q", step))
        rng_state = json.dumps({"master_seed": model.seed}, sort_keys=True)
        _write_block(fh, rng_state.encode("utf-8"))
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.data.ndim))
            for dim in t.data.shape:
                fh.write(struct.pack("<I", dim))
            _write_array(fh, t.data)
        if adam is None:
            fh.write(struct.pack("<B", 0))
            return
        if isinstance(adam, tuple):
            t_step, m, v = adam
        else:
            t_step, m, v = adam.t, adam.m, adam.v
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack("<Q", t_step))
        for name in params:
            _write_array(fh, m[name])
        for name in params:
            _write_array(fh, v[name])


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise CheckpointFormatError("bad magic; not a checkpoint file")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported version {version}")
        config = config_from_text(_read_block(fh).decode("utf-8"))
        (step,) = struct.unpack("<Q", _read(fh, 8))
        rng_state = json.loads(_read_block(fh).decode("utf-8"))
        (count,) = struct.unpack("<I", _read(fh, 4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1))
            shape = tuple(struct.unpack("<I", _read(fh, 4))[0]
                          for _ in range(ndim))
            params[name] = _read_array(fh, shape)
        (flag,) = struct.unpack("<B", _read(fh, 1))
        adam = None
        if flag:
            (t_step,) = struct.unpack("<Q", _read(fh, 8))
            m = {n: _read_array(fh, a.shape) for n, a in params.items()}
            v = {n: _read_array(fh, a.shape) for n, a in params.items()}
            adam = (t_step, m, v)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointFormatError("trailing bytes after checkpoint")
    return CheckpointData(config=config, seed=int(rng_state["master_seed"]),
                          step=int(step), params=params, adam=adam)


def restore_model(ckpt: CheckpointData) -> MuteModel:
    """Rebuild the model and overwrite every parameter from the file."""
    model = MuteModel(ckpt.config, seed=ckpt.seed)
    params = model.named_parameters()
    missing = set(params) - set(ckpt.params)
    extra = set(ckpt.params) - set(params)
    if missing or extra:
        raise CheckpointFormatError(
            f"parameter mismatch: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}")
    for name, t in params.items():
        stored = ckpt.params[name]
        if stored.shape != t.data.shape:
            raise CheckpointFormatError(
                f"{name}: shape {stored.shape} != model {t.data.shape}")
        t.data = stored.copy()
    return model
