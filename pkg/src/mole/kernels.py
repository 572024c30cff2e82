"""Deterministic dense numeric primitives.

Every routine here is a pure function over numpy arrays (float32 or float64)
with a fixed accumulation order, so results are bit-reproducible across runs
and across batch groupings. Nothing in this module goes through BLAS: the
contraction loops run in a fixed sequential order, which makes a batched
matmul produce bit-identical rows to a one-row-at-a-time matmul. Several
equivalence guarantees elsewhere in the package (lookup-table inference vs
the training-form forward, chunked vs unchunked table builds) lean on that
property.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

FLOAT_DTYPES = (np.float32, np.float64)

ROTARY_BASE = 10000.0


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


def _check_float(x: np.ndarray, name: str) -> None:
    if x.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"{name} must be float32 or float64, got {x.dtype}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes with broadcast leading axes.

    Accumulates over the contraction axis in a fixed sequential (k-ascending)
    order: each output element sees exactly the operation sequence
    ``acc = acc + a[..., i, k] * b[..., k, j]`` for k = 0, 1, ..., K-1, which
    is bit-identical to a naive triple loop in the same dtype.
    """
    _check_float(a, "a")
    _check_float(b, "b")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents disagree: {a.shape} @ {b.shape}")
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    m, kdim, n = a.shape[-2], a.shape[-1], b.shape[-1]
    out = np.zeros(lead + (m, n), dtype=a.dtype)
    tmp = np.empty_like(out)
    for k in range(kdim):
        np.multiply(a[..., :, k : k + 1], b[..., k : k + 1, :], out=tmp)
        np.add(out, tmp, out=out)
    return out


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax (max-subtracted) along ``axis``."""
    logits = np.asarray(logits)
    _check_float(logits, "logits")
    if logits.size == 0 or logits.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Root-mean-square normalization over the last axis: g * x / sqrt(mean(x^2) + eps)."""
    _check_float(x, "x")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"gain shape {gain.shape} does not match width {x.shape[-1]}")
    ms = np.mean(np.square(x), axis=-1, keepdims=True, dtype=x.dtype)
    inv = 1.0 / np.sqrt(ms + x.dtype.type(eps))
    return (x * inv * gain).astype(x.dtype)


def rmsnorm_backward(
    x: np.ndarray, gain: np.ndarray, dy: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``rmsnorm`` w.r.t. input and gain.

    Returns (dx, dgain) where dgain is summed over all leading axes.
    """
    d = x.shape[-1]
    ms = np.mean(np.square(x), axis=-1, keepdims=True, dtype=x.dtype)
    rms = np.sqrt(ms + x.dtype.type(eps))
    inv = 1.0 / rms
    gdy = dy * gain
    dot = np.sum(gdy * x, axis=-1, keepdims=True, dtype=x.dtype)
    dx = gdy * inv - x * dot * (inv**3) / x.dtype.type(d)
    dgain = np.sum(dy * x * inv, axis=tuple(range(x.ndim - 1)), dtype=x.dtype)
    return dx.astype(x.dtype), dgain.astype(x.dtype)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact-erf Gaussian error linear unit: x * Phi(x)."""
    x = np.asarray(x)
    _check_float(x, "x")
    half = x.dtype.type(0.5)
    inv_sqrt2 = x.dtype.type(1.0 / np.sqrt(2.0))
    return (x * half * (1.0 + erf(x * inv_sqrt2))).astype(x.dtype)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of exact-erf GELU: Phi(x) + x * phi(x)."""
    x = np.asarray(x)
    half = x.dtype.type(0.5)
    inv_sqrt2 = x.dtype.type(1.0 / np.sqrt(2.0))
    inv_sqrt2pi = x.dtype.type(1.0 / np.sqrt(2.0 * np.pi))
    phi = inv_sqrt2pi * np.exp(-half * x * x)
    cdf = half * (1.0 + erf(x * inv_sqrt2))
    return (cdf + x * phi).astype(x.dtype)


def rotary_angles(
    positions: np.ndarray, rot_dims: int, dtype: np.dtype
) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables for the rotated span.

    ``positions`` has shape (T,); output shape (T, rot_dims // 2) with pair i
    at frequency ROTARY_BASE ** (-2 i / rot_dims).
    """
    half = rot_dims // 2
    exponents = -2.0 * np.arange(half, dtype=np.float64) / float(rot_dims)
    freqs = ROTARY_BASE**exponents
    theta = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(theta).astype(dtype), np.sin(theta).astype(dtype)


def apply_rotary(
    x: np.ndarray,
    positions: np.ndarray,
    rotary_fraction: float,
    inverse: bool = False,
) -> np.ndarray:
    """Rotate the leading span of each head with geometric frequencies.

    ``x`` has shape (..., T, n_heads, d_head); the first
    ``rotary_fraction * d_head`` dimensions of every head are rotated in
    half-split pairs (i, i + span/2), the rest pass through unchanged.
    ``inverse=True`` applies the transpose rotation (used by backprop).
    """
    _check_float(x, "x")
    d_head = x.shape[-1]
    span_f = rotary_fraction * d_head
    span = int(round(span_f))
    if abs(span - span_f) > 1e-9 or span <= 0 or span % 2 != 0:
        raise ShapeError(
            f"rotary span {span_f} (fraction {rotary_fraction} of d_head {d_head}) "
            "must be a positive even integer"
        )
    cos, sin = rotary_angles(positions, span, x.dtype)
    if inverse:
        sin = -sin
    half = span // 2
    x1 = x[..., :, :, :half]
    x2 = x[..., :, :, half:span]
    c = cos[..., :, None, :]
    s = sin[..., :, None, :]
    out = x.copy()
    out[..., :, :, :half] = x1 * c - x2 * s
    out[..., :, :, half:span] = x1 * s + x2 * c
    return out
