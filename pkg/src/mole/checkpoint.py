"""Checkpoint container: a little-endian binary archive of named tensors.

Layout:
    magic   8 bytes  "MOLECKPT"
    version u32
    count   u32      number of tensors
    then per tensor:
        name_len u16, name bytes (utf-8),
        dtype    u8   (0=float32, 1=float64, 2=float16, 3=int64),
        rank     u8,
        extents  u64 * rank,
        data     raw row-major little-endian bytes

Round-trips are bit-exact. Model configuration rides along as two auxiliary
tensors ("__config_ints", "__config_floats") so a checkpoint alone is enough
to rebuild the model.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig, VARIANTS
from .model import ModelParams

MAGIC = b"MOLECKPT"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<f2"): 2,
    np.dtype("<i8"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

_CONFIG_INTS = "__config_ints"
_CONFIG_FLOATS = "__config_floats"


class CheckpointError(IOError):
    """Malformed or unreadable checkpoint file."""


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t)
            if arr.dtype.newbyteorder("<") not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
            code = _DTYPE_CODES[arr.dtype.newbyteorder("<")]
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            code, rank = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            raw = data[off : off + nbytes]
            if len(raw) != nbytes:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            off += nbytes
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt tensor table ({exc})")
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return tensors


def _encode_config(cfg: ModelConfig, inference_form: bool) -> dict[str, np.ndarray]:
    ints = np.array(
        [VARIANTS.index(cfg.variant), cfg.L, cfg.d, cfg.n_heads, cfg.D_s,
         cfg.D_r, cfg.N, cfg.k, cfg.vocab, cfg.max_seq, int(inference_form)],
        dtype=np.int64,
    )
    floats = np.array([cfg.rotary_fraction], dtype=np.float64)
    return {_CONFIG_INTS: ints, _CONFIG_FLOATS: floats}


def _decode_config(tensors: dict[str, np.ndarray]) -> tuple[ModelConfig, bool]:
    try:
        ints = tensors[_CONFIG_INTS]
        floats = tensors[_CONFIG_FLOATS]
    except KeyError:
        raise CheckpointError("checkpoint carries no model configuration")
    (variant_i, L, d, heads, D_s, D_r, N, k, vocab, max_seq, infer) = (int(v) for v in ints)
    cfg = ModelConfig(
        variant=VARIANTS[variant_i], L=L, d=d, n_heads=heads, D_s=D_s, D_r=D_r,
        N=N, k=k, vocab=vocab, rotary_fraction=float(floats[0]), max_seq=max_seq,
    )
    return cfg, bool(infer)


def save_model(path: str | Path, params: ModelParams) -> None:
    tensors = dict(params.tensors)
    tensors.update(_encode_config(params.cfg, params.inference_form))
    write_tensors(path, tensors)


def load_model(path: str | Path) -> ModelParams:
    tensors = read_tensors(path)
    cfg, inference_form = _decode_config(tensors)
    weights = {k: v for k, v in tensors.items() if not k.startswith("__config")}
    return ModelParams(cfg, weights, inference_form)
