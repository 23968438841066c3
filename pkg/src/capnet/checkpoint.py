"""Binary checkpoint format (all integers and floats little-endian)::

    b"AICAB1"
    u32 config_len, config text (UTF-8, ``key = value`` lines)
    u32 n_tensors, then per tensor (sorted by name):
        u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f64 data[prod(dims)]
    u8  has_adam
    if has_adam:
        u64 t, f64 learning_rate, beta1, beta2, epsilon
        u32 n_tensors + tensors (first moments, names as parameters)
        u32 n_tensors + tensors (second moments)
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .config import Config, parse_config_text
from .core import AdamState, ParamStore
from .errors import ConfigurationError, FormatError

MAGIC = b"AICAB1"


@dataclass
class Checkpoint:
    config: Config
    params: ParamStore
    adam: Optional[AdamState] = None


def _write_tensors(f, tensors: Dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def _read(f, n: int) -> bytes:
    pos = f.tell()
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"checkpoint truncated at byte {pos}")
    return b


def _read_tensors(f) -> Dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read(f, 4))
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", _read(f, 4))
        name = _read(f, ln).decode("utf-8")
        (rank,) = struct.unpack("<I", _read(f, 4))
        dims = struct.unpack(f"<{rank}Q", _read(f, 8 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(_read(f, 8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    return out


def dumps(ckpt: Checkpoint) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    cfg = ckpt.config.serialize().encode("utf-8")
    f.write(struct.pack("<I", len(cfg)))
    f.write(cfg)
    _write_tensors(f, {n: ckpt.params[n] for n in ckpt.params.names()})
    if ckpt.adam is None:
        f.write(b"\x00")
    else:
        a = ckpt.adam
        f.write(b"\x01")
        f.write(struct.pack("<Q4d", a.t, a.learning_rate, a.beta1, a.beta2, a.epsilon))
        _write_tensors(f, a.m)
        _write_tensors(f, a.v)
    return f.getvalue()


def loads(buf: bytes) -> Checkpoint:
    f = io.BytesIO(buf)
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r} at byte 0")
    (ln,) = struct.unpack("<I", _read(f, 4))
    try:
        cfg = parse_config_text(_read(f, ln).decode("utf-8"))
    except ConfigurationError as exc:
        raise FormatError(f"checkpoint config: {exc}") from None
    params = ParamStore()
    for name, arr in _read_tensors(f).items():
        params.add(name, arr)
    flag = _read(f, 1)
    adam = None
    if flag == b"\x01":
        t, lr, b1, b2, eps = struct.unpack("<Q4d", _read(f, 40))
        adam = AdamState(lr, b1, b2, eps, t, _read_tensors(f), _read_tensors(f))
    elif flag != b"\x00":
        raise FormatError(f"bad adam flag at byte {f.tell() - 1}")
    if f.read(1):
        raise FormatError(f"trailing bytes after checkpoint at byte {f.tell() - 1}")
    return Checkpoint(cfg, params, adam)


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.write_bytes(dumps(ckpt))
    return path


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def check_compatible(ckpt: Checkpoint, expected: ParamStore) -> None:
    """Raise unless ``ckpt`` holds exactly ``expected``'s names and shapes."""
    want, got = expected.shapes(), ckpt.params.shapes()
    missing = sorted(set(want) - set(got))
    extra = sorted(set(got) - set(want))
    wrong = sorted(n for n in set(want) & set(got) if want[n] != got[n])
    if missing or extra or wrong:
        parts = []
        if missing:
            parts.append(f"missing {missing}")
        if extra:
            parts.append(f"unexpected {extra}")
        if wrong:
            parts.append("shape mismatch " + ", ".join(f"{n} {got[n]} vs {want[n]}" for n in wrong))
        raise ConfigurationError("checkpoint does not match config: " + "; ".join(parts))
