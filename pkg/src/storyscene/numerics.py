"""Dense float64 tensor substrate for the attention and sampling code.

Tensors are plain C-contiguous ``numpy.ndarray`` values in float64; numpy
already provides elementwise arithmetic, reshaping and reductions, so only
the operations with non-obvious contracts live here. Every function checks
that its output is finite: NaN/Inf never escape this module.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

Tensor = np.ndarray


def as_tensor(values, name: str = "tensor") -> Tensor:
    """Coerce to a C-order float64 array and reject non-finite entries."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _check_finite(arr: Tensor, op: str) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{op} produced non-finite values")
    return arr


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (m, k) and b (k, n)."""
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents disagree: {a.shape} x {b.shape}")
    return _check_finite(a @ b, "matmul")


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability.

    Each output row is nonnegative and sums to 1 (within 1e-9) for any
    finite input.
    """
    a = as_tensor(a, "a")
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {a.shape}")
    shifted = a - a.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return _check_finite(exps / exps.sum(axis=1, keepdims=True), "softmax_rows")


def masked_concat_kv(own: Tensor, other: Tensor, mask: Tensor,
                     mode: str = "drop") -> Tensor:
    """Concatenate a foreign key/value block after ``own``, gated by ``mask``.

    ``mask`` holds one value in [0, 1] per row of ``other``; a high value
    marks a subject token that must not leak across branches. ``zero`` mode
    scales foreign rows by (1 - mask) before concatenating; ``drop`` mode
    removes rows with mask >= 0.5 entirely so they receive no attention
    weight at all (zeroed rows would still attract softmax mass).
    """
    own = as_tensor(own, "own")
    other = as_tensor(other, "other")
    mask = as_tensor(mask, "mask").reshape(-1)
    if own.ndim != 2 or other.ndim != 2:
        raise DimensionError("masked_concat_kv expects 2-D token blocks")
    if own.shape[1] != other.shape[1]:
        raise DimensionError(f"feature widths disagree: {own.shape} vs {other.shape}")
    if mask.shape[0] != other.shape[0]:
        raise DimensionError(
            f"mask length {mask.shape[0]} != foreign token count {other.shape[0]}")
    if mode == "zero":
        kept = other * (1.0 - mask)[:, None]
    elif mode == "drop":
        kept = other[mask < 0.5]
    else:
        raise ValueError(f"unknown mode {mode!r}; expected 'zero' or 'drop'")
    return _check_finite(np.concatenate([own, kept], axis=0), "masked_concat_kv")
