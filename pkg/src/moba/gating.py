"""Block partitioning and query-to-block routing.

The context of length N splits into fixed-size blocks of B positions; block i
(1-based) covers positions [(i-1)*B + 1, min(i*B, N)], so only the final block
may be ragged. Routing picks, for each (query position, head), which key
blocks that query may attend to:

* a query always selects the block it lives in (the "current" block);
* a query never selects a block that starts after its own position;
* the remaining budget goes to the highest-scoring visible history blocks,
  with score ties resolved toward the lower block index so reruns and
  platforms agree exactly.

Sliding-window and attention-sink patterns reuse the same top-k gate: they
construct score vectors that force the wanted selection instead of carrying
separate masking logic.

Gating scores are always computed in float64, whatever the storage precision
of the inputs, so routing decisions never depend on the storage mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, PartitionError, RoutingError, ShapeMismatchError
from .tensor import Tensor, block_mean_pool


@dataclass(frozen=True)
class BlockPartition:
    """A fixed split of positions 1..context_length into num_blocks blocks."""

    context_length: int
    block_size: int
    num_blocks: int
    ranges: tuple[tuple[int, int], ...]  # 1-based inclusive [start, end] per block

    def block_of(self, pos: int) -> int:
        """1-based index of the block containing 1-based position ``pos``."""
        if not 1 <= pos <= self.context_length:
            raise ParameterError(
                f"position {pos} outside [1, {self.context_length}]"
            )
        return (pos - 1) // self.block_size + 1

    def rows(self, block: int) -> slice:
        """0-based half-open row slice covered by 1-based block ``block``."""
        if not 1 <= block <= self.num_blocks:
            raise ParameterError(f"block {block} outside [1, {self.num_blocks}]")
        start, end = self.ranges[block - 1]
        return slice(start - 1, end)

    def block_length(self, block: int) -> int:
        start, end = self.ranges[block - 1]
        return end - start + 1

    @property
    def row_starts(self) -> np.ndarray:
        """0-based start row of each block."""
        return np.asarray([s - 1 for s, _ in self.ranges], dtype=np.intp)

    @property
    def block_lengths(self) -> np.ndarray:
        return np.asarray([e - s + 1 for s, e in self.ranges], dtype=np.int64)


def make_partition(context_length: int, block_size: int) -> BlockPartition:
    """Partition positions 1..context_length into blocks of ``block_size``.

    The final block is allowed to be ragged (shorter than block_size).
    """
    if context_length < 1:
        raise ParameterError(f"context_length must be >= 1, got {context_length}")
    if block_size < 1:
        raise ParameterError(f"block_size must be >= 1, got {block_size}")
    num_blocks = -(-context_length // block_size)
    ranges = tuple(
        ((i - 1) * block_size + 1, min(i * block_size, context_length))
        for i in range(1, num_blocks + 1)
    )
    return BlockPartition(
        context_length=context_length,
        block_size=block_size,
        num_blocks=num_blocks,
        ranges=ranges,
    )


@dataclass(frozen=True)
class RoutingRow:
    """The selection one (query, head) pair made over the key blocks.

    ``scores`` is the post-mask vector that drove the top-k: -inf at blocks
    that start after the query, +inf at the forced current block, and the
    raw affinity elsewhere.
    """

    query_pos: int                  # 1-based
    top_k: int
    selected: tuple[int, ...]       # ascending, 1-based block indices
    gates: tuple[int, ...]          # one 0/1 per block
    scores: tuple[float, ...]       # post-mask scores, one per block


def affinity_scores(q: Tensor, pooled_keys: Tensor) -> np.ndarray:
    """Inner product of one query against each pooled block key.

    ``q`` has shape [d] or [1, d]; ``pooled_keys`` has shape [n, d]. Returns
    a float64 vector of n scores.
    """
    qa = q.array
    if qa.ndim == 2 and qa.shape[0] == 1:
        qa = qa[0]
    if qa.ndim != 1:
        raise ShapeMismatchError(f"query must be [d] or [1, d], got {q.shape}")
    pk = pooled_keys.array
    if pk.ndim != 2 or pk.shape[1] != qa.shape[0]:
        raise ShapeMismatchError(
            f"pooled keys must be [n, {qa.shape[0]}], got {pooled_keys.shape}"
        )
    return np.einsum(
        "d,nd->n",
        qa.astype(np.float64, copy=False),
        pk.astype(np.float64, copy=False),
    )


def moba_gate(scores, query_pos: int, partition: BlockPartition, k: int) -> RoutingRow:
    """Select ``min(k, visible blocks)`` key blocks for one query.

    Selection rule: blocks starting after ``query_pos`` get score -inf and are
    never selected; the query's current block is forced in (score +inf); the
    remaining k-1 slots go to the best-scoring history blocks. Ties resolve
    to the lower block index via a stable sort, so reruns are identical.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (partition.num_blocks,):
        raise ShapeMismatchError(
            f"need one score per block: got shape {s.shape}, "
            f"partition has {partition.num_blocks} blocks"
        )
    if k < 1:
        raise ParameterError("top-k must be >= 1: the current block is always selected")
    cur = partition.block_of(query_pos)  # validates query_pos
    masked = s.copy()
    masked[cur:] = -np.inf      # blocks that start after the query
    masked[cur - 1] = np.inf    # forced current-block selection
    take = min(k, cur)
    order = np.argsort(-masked, kind="stable")  # stable: ties go to the lower index
    chosen = np.sort(order[:take]) + 1
    gates = np.zeros(partition.num_blocks, dtype=np.int64)
    gates[chosen - 1] = 1
    return RoutingRow(
        query_pos=int(query_pos),
        top_k=int(k),
        selected=tuple(int(b) for b in chosen),
        gates=tuple(int(g) for g in gates),
        scores=tuple(float(v) for v in masked),
    )


def _forced_selection_row(query_pos: int, partition: BlockPartition, wanted) -> RoutingRow:
    # Express a deterministic window as a top-|wanted| gate: wanted history
    # blocks score 1, other visible blocks 0, current block is forced anyway.
    wanted = tuple(sorted(int(b) for b in wanted))
    scores = np.zeros(partition.num_blocks, dtype=np.float64)
    scores[np.asarray(wanted) - 1] = 1.0
    row = moba_gate(scores, query_pos, partition, k=len(wanted))
    if row.selected != wanted:  # defensive; cannot happen by construction
        raise RoutingError(f"forced selection produced {row.selected}, wanted {wanted}")
    return row


def swa_gate(query_pos: int, partition: BlockPartition, window_blocks: int) -> RoutingRow:
    """Sliding-window selection: the current block and the ``window_blocks - 1``
    blocks immediately before it (clipped at the start of the context)."""
    if window_blocks < 1:
        raise ParameterError(f"window_blocks must be >= 1, got {window_blocks}")
    cur = partition.block_of(query_pos)
    lo = max(1, cur - window_blocks + 1)
    return _forced_selection_row(query_pos, partition, range(lo, cur + 1))


def sink_gate(
    query_pos: int,
    partition: BlockPartition,
    sink_blocks: int,
    recent_blocks: int,
) -> RoutingRow:
    """Sink selection: the first ``sink_blocks`` blocks plus the most recent
    ``recent_blocks`` blocks (both clipped to what the query can see)."""
    if sink_blocks < 1:
        raise ParameterError(f"sink_blocks must be >= 1, got {sink_blocks}")
    if recent_blocks < 1:
        raise ParameterError(f"recent_blocks must be >= 1, got {recent_blocks}")
    cur = partition.block_of(query_pos)
    sinks = range(1, min(sink_blocks, cur) + 1)
    recent = range(max(1, cur - recent_blocks + 1), cur + 1)
    return _forced_selection_row(query_pos, partition, sorted(set(sinks) | set(recent)))


class RoutingTable:
    """Per (query position, head) block selections for one attention call.

    ``kind == "moba"`` tables enforce the full cardinality invariant
    (every row selects exactly min(top_k, current block index) blocks);
    ``kind == "custom"`` tables (sliding-window, sink) enforce only causality
    and the forced current block, since clipped windows vary per row.
    """

    def __init__(self, partition: BlockPartition, gates, scores, top_k=None, kind="moba"):
        gates = np.ascontiguousarray(np.asarray(gates, dtype=bool))
        scores = np.ascontiguousarray(np.asarray(scores, dtype=np.float64))
        if gates.ndim != 3 or scores.shape != gates.shape:
            raise RoutingError(
                f"gates/scores must both be [queries, heads, blocks]; "
                f"got {gates.shape} and {scores.shape}"
            )
        if kind not in ("moba", "custom"):
            raise RoutingError(f"unknown routing table kind {kind!r}")
        self.partition = partition
        self.top_k = None if top_k is None else int(top_k)
        self.kind = kind
        gates.setflags(write=False)
        scores.setflags(write=False)
        self.gates = gates
        self.scores = scores
        self._validate()

    def _validate(self) -> None:
        N, _, n = self.gates.shape
        part = self.partition
        if N != part.context_length or n != part.num_blocks:
            raise RoutingError(
                f"table shape {self.gates.shape} does not match partition "
                f"(N={part.context_length}, blocks={part.num_blocks})"
            )
        cur0 = (np.arange(N) // part.block_size)  # 0-based current block per query
        if not self.gates[np.arange(N), :, cur0].all():
            raise RoutingError("a query does not select its current block")
        future = np.arange(n)[None, :] > cur0[:, None]  # [N, n]
        if (self.gates & future[:, None, :]).any():
            raise RoutingError("a query selects a block that starts after it")
        if not np.isneginf(self.scores[np.broadcast_to(future[:, None, :], self.scores.shape)]).all():
            raise RoutingError("a future block carries a finite score")
        if self.kind == "moba":
            if self.top_k is None:
                raise RoutingError("moba tables need top_k")
            counts = self.gates.sum(axis=2)
            want = np.minimum(self.top_k, cur0 + 1)[:, None]
            if not (counts == want).all():
                raise RoutingError("selection cardinality violates min(top_k, visible blocks)")

    @property
    def num_queries(self) -> int:
        return self.gates.shape[0]

    @property
    def num_heads(self) -> int:
        return self.gates.shape[1]

    def selected(self, query_pos: int, head: int) -> tuple[int, ...]:
        """Ascending 1-based block indices selected by (query_pos, head)."""
        return tuple(int(b) + 1 for b in np.flatnonzero(self.gates[query_pos - 1, head]))

    def row(self, query_pos: int, head: int) -> RoutingRow:
        g = self.gates[query_pos - 1, head]
        k = self.top_k if self.top_k is not None else int(g.sum())
        return RoutingRow(
            query_pos=int(query_pos),
            top_k=k,
            selected=self.selected(query_pos, head),
            gates=tuple(int(v) for v in g),
            scores=tuple(float(v) for v in self.scores[query_pos - 1, head]),
        )

    @classmethod
    def from_rows(cls, partition: BlockPartition, rows, kind="custom", top_k=None):
        """Assemble a table from per-query lists of per-head RoutingRows."""
        N = len(rows)
        if N != partition.context_length:
            raise RoutingError(f"got rows for {N} queries, partition has {partition.context_length}")
        h = len(rows[0])
        gates = np.zeros((N, h, partition.num_blocks), dtype=bool)
        scores = np.full((N, h, partition.num_blocks), -np.inf)
        for qi, per_head in enumerate(rows):
            if len(per_head) != h:
                raise RoutingError("ragged per-head row lists")
            for hi, row in enumerate(per_head):
                if row.query_pos != qi + 1:
                    raise RoutingError(
                        f"row at index {qi} claims query_pos {row.query_pos}"
                    )
                gates[qi, hi] = np.asarray(row.gates, dtype=bool)
                scores[qi, hi] = np.asarray(row.scores, dtype=np.float64)
        return cls(partition, gates, scores, top_k=top_k, kind=kind)


def pooled_block_keys(K: Tensor, partition: BlockPartition) -> np.ndarray:
    """Mean-pooled keys per block and head: [N, h, d] -> float64 [n, h, d]."""
    if K.ndim != 3:
        raise ShapeMismatchError(f"keys must be [N, heads, dim], got {K.shape}")
    k64 = K.array.astype(np.float64, copy=False)
    cols = [
        block_mean_pool(Tensor(k64[:, j, :]), partition).array
        for j in range(K.shape[1])
    ]
    return np.stack(cols, axis=1)


def build_routing_table(Q: Tensor, K: Tensor, partition: BlockPartition, k: int) -> RoutingTable:
    """Routing for every (query, head) at once.

    Pools keys per block, scores each query against the pooled keys, masks
    blocks that start after the query, forces the current block, and keeps
    the best min(k, visible) per row. Bit-identical to calling
    affinity_scores + moba_gate row by row.
    """
    if Q.ndim != 3 or Q.shape != K.shape:
        raise ShapeMismatchError(
            f"Q and K must share shape [N, heads, dim], got {Q.shape} and {K.shape}"
        )
    if Q.shape[0] != partition.context_length:
        raise RoutingError(
            f"partition covers {partition.context_length} positions, tensors have {Q.shape[0]}"
        )
    if k < 1:
        raise ParameterError("top-k must be >= 1: the current block is always selected")
    N, h, _ = Q.shape
    n = partition.num_blocks
    pooled = pooled_block_keys(K, partition)
    scores = np.einsum("qhd,bhd->qhb", Q.array.astype(np.float64, copy=False), pooled)
    cur0 = np.arange(N) // partition.block_size
    future = np.arange(n)[None, :] > cur0[:, None]
    masked = np.where(future[:, None, :], -np.inf, scores)
    masked[np.arange(N), :, cur0] = np.inf
    counts = np.minimum(k, cur0 + 1)
    order = np.argsort(-masked, axis=2, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(n), order.shape).copy(), axis=2)
    gates = ranks < counts[:, None, None]
    return RoutingTable(partition, gates, masked, top_k=k, kind="moba")


def build_swa_table(partition: BlockPartition, num_heads: int, window_blocks: int) -> RoutingTable:
    """Position-deterministic sliding-window table (same row for every head)."""
    rows = [
        [swa_gate(p, partition, window_blocks)] * num_heads
        for p in range(1, partition.context_length + 1)
    ]
    return RoutingTable.from_rows(partition, rows, kind="custom")


def build_sink_table(
    partition: BlockPartition,
    num_heads: int,
    sink_blocks: int,
    recent_blocks: int,
) -> RoutingTable:
    """Position-deterministic sink table (same row for every head)."""
    rows = [
        [sink_gate(p, partition, sink_blocks, recent_blocks)] * num_heads
        for p in range(1, partition.context_length + 1)
    ]
    return RoutingTable.from_rows(partition, rows, kind="custom")
