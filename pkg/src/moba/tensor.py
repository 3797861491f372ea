"""Dense numeric kernels: matrix products, stable row softmax, block pooling,
and seeded normal sampling.

Arrays are row-major and carry one of two precisions. float64 is the
verification mode in which every documented tolerance holds; float32 is a
cheaper storage mode for benchmark-style runs. No operation lets NaN or Inf
escape: results are checked and an overflow raises NonFiniteError instead of
propagating silently.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DegenerateRowError,
    NonFiniteError,
    ParameterError,
    PartitionError,
    ShapeMismatchError,
)

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in _ALLOWED_DTYPES:
        raise ParameterError(f"unsupported precision {dt!s}; use float32 or float64")
    return dt


def _require_finite(arr: np.ndarray, context: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{context} contains NaN or Inf")


class Tensor:
    """Dense row-major array of finite float32 or float64 values.

    The payload is validated once on construction and then frozen
    (read-only), so a Tensor can be shared safely. Use ``.array`` for
    read access and ``astype`` to change precision.
    """

    __slots__ = ("array",)

    def __init__(self, values, dtype=None):
        arr = np.array(values, dtype=_as_dtype(dtype) if dtype is not None else None, order="C")
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        _require_finite(arr, "tensor payload")
        arr.setflags(write=False)
        self.array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for freshly computed arrays we own: no copy, still checked.
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        _require_finite(arr, "operation result")
        arr.setflags(write=False)
        t.array = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def dtype(self) -> np.dtype:
        return self.array.dtype

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the payload (read-only)."""
        return self.array.reshape(-1)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.array, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def zeros(shape, dtype="float64") -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=_as_dtype(dtype)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m, k] by b [k, p]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ParameterError(f"operands must share precision, got {a.dtype} and {b.dtype}")
    out = a.array @ b.array
    _require_finite(out, "matmul result")
    return Tensor._wrap(out)


def row_softmax(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Max-subtracted softmax along axis 1 on a raw array.

    ``mask`` is an optional additive array of 0 / -inf entries; masked
    positions come out exactly 0.0 because exp(-inf) == 0.0. A row with every
    entry masked raises DegenerateRowError rather than returning NaN.
    """
    z = x if mask is None else x + mask.astype(x.dtype, copy=False)
    row_max = z.max(axis=1)
    dead = np.isneginf(row_max)
    if dead.any():
        rows = np.flatnonzero(dead).tolist()
        raise DegenerateRowError(f"softmax rows fully masked: {rows}")
    w = np.exp(z - row_max[:, None])
    return w / w.sum(axis=1)[:, None]


def stable_softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row-wise softmax of a [m, n] tensor with an optional additive mask.

    The mask is a plain array (not a Tensor — it intentionally holds -inf)
    whose entries must be exactly 0 or -inf.
    """
    if x.ndim != 2:
        raise ShapeMismatchError(f"softmax needs a 2-D tensor, got shape {x.shape}")
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != x.shape:
            raise ShapeMismatchError(f"mask shape {m.shape} does not match input {x.shape}")
        if not ((m == 0) | np.isneginf(m)).all():
            raise ParameterError("mask entries must be exactly 0 or -inf")
    return Tensor._wrap(row_softmax(x.array, m))


def block_mean_pool(k: Tensor, partition) -> Tensor:
    """Per-block arithmetic mean of the rows of a [N, d] tensor.

    ``partition`` is a gating.BlockPartition; only its ``context_length``,
    ``row_starts`` and ``block_lengths`` attributes are used, so any
    compatible object works. The ragged final block averages over its true
    length, not the nominal block size.
    """
    if k.ndim != 2:
        raise ShapeMismatchError(f"block_mean_pool needs a 2-D tensor, got shape {k.shape}")
    if partition.context_length != k.shape[0]:
        raise PartitionError(
            f"partition covers {partition.context_length} rows, tensor has {k.shape[0]}"
        )
    lengths = np.asarray(partition.block_lengths, dtype=np.int64)
    if lengths.size == 0 or (lengths < 1).any():
        raise PartitionError("partition contains an empty block")
    starts = np.asarray(partition.row_starts, dtype=np.intp)
    sums = np.add.reduceat(k.array, starts, axis=0)
    return Tensor._wrap(sums / lengths[:, None].astype(k.array.dtype))


def seeded_random(shape, seed: int, dtype="float64") -> Tensor:
    """Deterministic standard-normal draw.

    Uses numpy's Philox (4x64 counter-based) bit generator keyed with
    ``seed`` and Generator.standard_normal, so the same (shape, seed, dtype)
    reproduces the same tensor bit for bit on any platform.
    """
    if int(seed) < 0:
        raise ParameterError(f"seed must be non-negative, got {seed}")
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    arr = rng.standard_normal(size=tuple(int(s) for s in shape), dtype=_as_dtype(dtype))
    return Tensor._wrap(np.asarray(arr))
