"""Dense, gathered, and grouped block-sparse attention.

Three routes compute the same mathematical object:

* ``dense_attention``: the plain softmax(Q K^T) V reference, optionally
  causal — the trusted baseline everything else is checked against;
* ``moba_attention_oracle``: per-query gather of the routed key blocks with
  one softmax over the gathered logits (simple, slow, obviously correct);
* ``moba_attention_pipeline``: queries are grouped by selected key block,
  each (block, query group) runs as one attention call on a contiguous
  reordered buffer, and the per-group partial results are stitched back
  together with online softmax in ascending block order.

History-block groups run unmasked (every key in a history block is strictly
before the query); the current-block group carries the in-block causal mask.
Partial results keep their running row max and normalizer, so the final
combination reproduces the exact global softmax rather than an approximation.

Grouped matmuls go through np.einsum, whose default evaluation accumulates in
a fixed, row-independent order. That keeps a query's output bit-identical when
unrelated queries join or leave a group (BLAS blocking would not), which the
causality checks rely on. Accumulation happens in float64 regardless of the
storage precision; float32 inputs produce float32 outputs by a final cast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DegenerateRowError,
    ParameterError,
    PipelineError,
    RoutingError,
    ShapeMismatchError,
)
from .gating import BlockPartition, RoutingTable, build_routing_table, make_partition
from .tensor import Tensor, row_softmax

_MODES = ("dense-causal", "moba", "swa", "sink")


@dataclass(frozen=True)
class AttentionConfig:
    """Static description of one attention setup.

    Mode-specific fields must be present exactly when the mode needs them:
    ``moba`` needs block_size and top_k; ``swa`` needs block_size and
    window_blocks; ``sink`` needs block_size, sink_blocks and recent_blocks;
    ``dense-causal`` allows none of them.
    """

    mode: str
    num_heads: int
    head_dim: int
    block_size: int | None = None
    top_k: int | None = None
    window_blocks: int | None = None
    sink_blocks: int | None = None
    recent_blocks: int | None = None
    scale: bool = True  # multiply logits by 1/sqrt(head_dim)

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(f"unknown attention mode {self.mode!r}; expected one of {_MODES}")
        if self.num_heads < 1 or self.head_dim < 1:
            raise ConfigError("num_heads and head_dim must be >= 1")
        required = {
            "dense-causal": (),
            "moba": ("block_size", "top_k"),
            "swa": ("block_size", "window_blocks"),
            "sink": ("block_size", "sink_blocks", "recent_blocks"),
        }[self.mode]
        optional_fields = ("block_size", "top_k", "window_blocks", "sink_blocks", "recent_blocks")
        for name in optional_fields:
            value = getattr(self, name)
            if name in required:
                if value is None:
                    raise ConfigError(f"mode {self.mode!r} requires {name}")
                if value < 1:
                    raise ConfigError(f"{name} must be >= 1, got {value}")
            elif value is not None:
                raise ConfigError(f"mode {self.mode!r} does not take {name}")


def _scale_factor(head_dim: int, scale: bool) -> float:
    return 1.0 / math.sqrt(head_dim) if scale else 1.0


def _check_qkv(Q: Tensor, K: Tensor, V: Tensor) -> tuple[int, int, int]:
    for name, t in (("Q", Q), ("K", K), ("V", V)):
        if t.ndim != 3:
            raise ShapeMismatchError(f"{name} must be [N, heads, dim], got {t.shape}")
    if not (Q.shape == K.shape == V.shape):
        raise ShapeMismatchError(
            f"Q/K/V must share shape, got {Q.shape}, {K.shape}, {V.shape}"
        )
    if Q.dtype != K.dtype or Q.dtype != V.dtype:
        raise ParameterError("Q/K/V must share precision")
    N, h, d = Q.shape
    if N == 0:
        raise ShapeMismatchError("attention over an empty context (N=0)")
    return N, h, d


@dataclass
class PartialAttention:
    """Un-normalized attention over a subset of keys, mergeable with others.

    ``out`` holds sum_j exp(logit_j - row_max) * v_j per row, ``row_max`` the
    running maximum logit, ``normalizer`` the matching sum of exponentials.
    Merging two partials rescales both to a shared maximum; merge is
    associative and commutative up to float rounding, so any grouping of the
    same key subsets finalizes to the same softmax output.
    """

    out: np.ndarray         # [rows, d]
    row_max: np.ndarray     # [rows]
    normalizer: np.ndarray  # [rows]

    def __post_init__(self):
        if self.out.ndim != 2 or self.row_max.shape != (self.out.shape[0],) \
                or self.normalizer.shape != (self.out.shape[0],):
            raise ShapeMismatchError(
                f"inconsistent partial shapes: out {self.out.shape}, "
                f"row_max {self.row_max.shape}, normalizer {self.normalizer.shape}"
            )

    @classmethod
    def from_logits(cls, logits: np.ndarray, values: np.ndarray) -> "PartialAttention":
        """Build a partial from raw logits [rows, keys] over values [keys, d].

        Logits may contain -inf (masked entries contribute exactly nothing).
        A row with zero keys or all entries masked yields a neutral partial
        (row_max -inf, normalizer 0)."""
        if logits.ndim != 2 or values.ndim != 2 or logits.shape[1] != values.shape[0]:
            raise ShapeMismatchError(
                f"logits {logits.shape} incompatible with values {values.shape}"
            )
        rows = logits.shape[0]
        d = values.shape[1]
        if logits.shape[1] == 0:
            return cls(
                out=np.zeros((rows, d)),
                row_max=np.full(rows, -np.inf),
                normalizer=np.zeros(rows),
            )
        m = logits.max(axis=1)
        with np.errstate(invalid="ignore"):
            shifted = np.where(np.isfinite(m)[:, None], logits - m[:, None], -np.inf)
        w = np.exp(shifted)
        out = np.einsum("rk,kd->rd", w, values)
        return cls(out=out, row_max=m, normalizer=w.sum(axis=1))

    def merge(self, other: "PartialAttention") -> "PartialAttention":
        if self.out.shape != other.out.shape:
            raise ShapeMismatchError(
                f"cannot merge partials of shapes {self.out.shape} and {other.out.shape}"
            )
        m = np.maximum(self.row_max, other.row_max)
        with np.errstate(invalid="ignore"):
            sa = np.where(np.isneginf(self.row_max), 0.0, np.exp(self.row_max - m))
            sb = np.where(np.isneginf(other.row_max), 0.0, np.exp(other.row_max - m))
        return PartialAttention(
            out=sa[:, None] * self.out + sb[:, None] * other.out,
            row_max=m,
            normalizer=sa * self.normalizer + sb * other.normalizer,
        )

    def finalize(self) -> np.ndarray:
        """Normalized attention output [rows, d]."""
        dead = self.normalizer == 0
        if dead.any():
            rows = np.flatnonzero(dead).tolist()
            raise DegenerateRowError(f"rows with zero attention mass: {rows}")
        return self.out / self.normalizer[:, None]


def online_softmax_combine(parts) -> Tensor:
    """Merge partial attentions over disjoint key subsets into the exact
    softmax-weighted output over their union."""
    parts = list(parts)
    if not parts:
        raise ParameterError("need at least one partial result")
    acc = parts[0]
    for p in parts[1:]:
        acc = acc.merge(p)
    return Tensor._wrap(acc.finalize())


def dense_attention(Q: Tensor, K: Tensor, V: Tensor, causal: bool, scale: bool = True) -> Tensor:
    """Full softmax(Q K^T) V per head; the reference implementation.

    ``causal`` masks strictly-future keys (query p attends to keys 1..p).
    """
    N, h, d = _check_qkv(Q, K, V)
    f = _scale_factor(d, scale)
    q64 = Q.array.astype(np.float64, copy=False)
    k64 = K.array.astype(np.float64, copy=False)
    v64 = V.array.astype(np.float64, copy=False)
    mask = None
    if causal:
        mask = np.where(np.triu(np.ones((N, N), dtype=bool), k=1), -np.inf, 0.0)
    out = np.empty((N, h, d))
    for j in range(h):
        logits = f * (q64[:, j, :] @ k64[:, j, :].T)
        probs = row_softmax(logits, mask)
        out[:, j, :] = probs @ v64[:, j, :]
    return Tensor._wrap(out.astype(Q.dtype, copy=False))


def gathered_key_indices(selected, partition: BlockPartition, query_pos: int) -> np.ndarray:
    """0-based key indices a query attends to, given its selected blocks.

    History blocks contribute all their positions; the current block is cut
    at the query position (keys 1..query_pos of that block's range).
    """
    cur = partition.block_of(query_pos)
    parts = []
    for b in selected:
        sl = partition.rows(b)
        stop = min(sl.stop, query_pos) if b == cur else sl.stop
        parts.append(np.arange(sl.start, stop, dtype=np.intp))
    if not parts:
        raise RoutingError(f"query {query_pos} selects no blocks")
    return np.concatenate(parts)


def moba_attention_oracle(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    routing: RoutingTable,
    partition: BlockPartition,
    scale: bool = True,
) -> Tensor:
    """Reference gathered attention: per (query, head), pull the routed keys
    into one contiguous set and run a single ordinary softmax over it."""
    N, h, d = _check_qkv(Q, K, V)
    if routing.partition != partition:
        raise RoutingError("routing table was built for a different partition")
    if routing.num_queries != N or routing.num_heads != h:
        raise RoutingError(
            f"routing table is [{routing.num_queries} x {routing.num_heads}], "
            f"tensors are [{N} x {h}]"
        )
    f = _scale_factor(d, scale)
    q64 = Q.array.astype(np.float64, copy=False)
    k64 = K.array.astype(np.float64, copy=False)
    v64 = V.array.astype(np.float64, copy=False)
    out = np.empty((N, h, d))
    for j in range(h):
        for p in range(1, N + 1):
            idx = gathered_key_indices(routing.selected(p, j), partition, p)
            logits = f * (k64[idx, j, :] @ q64[p - 1, j, :])
            m = logits.max()
            w = np.exp(logits - m)
            out[p - 1, j, :] = (w @ v64[idx, j, :]) / w.sum()
    return Tensor._wrap(out.astype(Q.dtype, copy=False))


@dataclass(frozen=True)
class QueryGroup:
    """One varlen segment of the pipeline: the queries assigned to a block."""

    block: int               # 1-based key block
    is_current: bool         # True: queries live in this block (causal inside)
    query_rows: np.ndarray   # ascending 0-based query rows


def plan_query_groups(gates: np.ndarray, partition: BlockPartition) -> list[QueryGroup]:
    """Group queries by selected key block, ascending block order.

    ``gates`` is the [N, blocks] boolean selection for one head. For each
    block the in-block (current) group comes first, then the history group of
    later queries that routed to it. Within a group query rows stay ascending,
    so gathering them is the explicit reorder step and scattering the results
    back is its exact inverse.
    """
    groups: list[QueryGroup] = []
    for b in range(1, partition.num_blocks + 1):
        rows = np.flatnonzero(gates[:, b - 1])
        sl = partition.rows(b)
        cur_rows = rows[(rows >= sl.start) & (rows < sl.stop)]
        hist_rows = rows[rows >= sl.stop]
        if (rows < sl.start).any():
            raise PipelineError(f"block {b} selected by an earlier query")
        groups.append(QueryGroup(block=b, is_current=True, query_rows=cur_rows))
        if hist_rows.size:
            groups.append(QueryGroup(block=b, is_current=False, query_rows=hist_rows))
    return groups


def _pipeline_head(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    gates: np.ndarray,
    partition: BlockPartition,
    f: float,
) -> np.ndarray:
    N, d = q.shape
    groups = plan_query_groups(gates, partition)
    perm = np.concatenate([g.query_rows for g in groups]) if groups else np.empty(0, np.intp)
    if np.bincount(perm, minlength=N).min() < 1:
        raise PipelineError("a query was assigned to no group")
    qbuf = q[perm]  # explicit reorder into one contiguous varlen buffer

    partials: list[PartialAttention] = []
    offset = 0
    for g in groups:
        rows = g.query_rows
        qg = qbuf[offset:offset + rows.size]
        offset += rows.size
        sl = partition.rows(g.block)
        logits = f * np.einsum("qd,kd->qk", qg, k[sl])
        if g.is_current:
            rel = rows - sl.start  # in-block causal cut: key j visible iff j <= query
            logits = np.where(np.arange(sl.stop - sl.start)[None, :] > rel[:, None], -np.inf, logits)
        partials.append(PartialAttention.from_logits(logits, v[sl]))

    # Inverse reorder + combine: scatter each group's partial back to its
    # query rows, merging in ascending block order (groups are already sorted).
    acc_m = np.full(N, -np.inf)
    acc_l = np.zeros(N)
    acc_out = np.zeros((N, d))
    for g, part in zip(groups, partials):
        rows = g.query_rows
        if rows.size == 0:
            continue
        m = np.maximum(acc_m[rows], part.row_max)
        with np.errstate(invalid="ignore"):
            sa = np.where(np.isneginf(acc_m[rows]), 0.0, np.exp(acc_m[rows] - m))
            sb = np.where(np.isneginf(part.row_max), 0.0, np.exp(part.row_max - m))
        acc_out[rows] = sa[:, None] * acc_out[rows] + sb[:, None] * part.out
        acc_l[rows] = sa * acc_l[rows] + sb * part.normalizer
        acc_m[rows] = m
    if (acc_l == 0).any():
        raise PipelineError("a query row received zero attention mass")
    return acc_out / acc_l[:, None]


def moba_attention_pipeline(Q: Tensor, K: Tensor, V: Tensor, config: AttentionConfig) -> Tensor:
    """Block-grouped attention: route, reorder queries per selected key block,
    run one attention call per group, then recombine with online softmax.

    Numerically equivalent to moba_attention_oracle on the same routing (the
    partials cover disjoint key subsets whose union is the gathered set)."""
    if config.mode != "moba":
        raise ConfigError(f"pipeline needs a moba-mode config, got {config.mode!r}")
    N, h, d = _check_qkv(Q, K, V)
    if h != config.num_heads or d != config.head_dim:
        raise ConfigError(
            f"config is for [{config.num_heads} x {config.head_dim}] heads, "
            f"tensors are [{h} x {d}]"
        )
    partition = make_partition(N, config.block_size)
    routing = build_routing_table(Q, K, partition, config.top_k)
    f = _scale_factor(d, config.scale)
    q64 = Q.array.astype(np.float64, copy=False)
    k64 = K.array.astype(np.float64, copy=False)
    v64 = V.array.astype(np.float64, copy=False)
    out = np.empty((N, h, d))
    for j in range(h):
        out[:, j, :] = _pipeline_head(
            q64[:, j, :], k64[:, j, :], v64[:, j, :],
            routing.gates[:, j, :], partition, f,
        )
    return Tensor._wrap(out.astype(Q.dtype, copy=False))
