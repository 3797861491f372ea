"""Operation-count accounting and segmentation sweeps.

Costs are exact multiply-add counts derived from the attention shapes, not
wall-clock measurements: a desk-scale numpy build says nothing honest about
kernel latency, but the arithmetic is the same arithmetic a fused kernel
performs, so the dense/sparse ratio is meaningful.

Counting convention: attention costs count the two matmuls (logits and
output) at 2 multiply-adds each, so a query attending to c keys costs
2*2*c*d per head. The gating-score cost N*n*d per head is reported
separately and enters no ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .attention import AttentionConfig
from .errors import ConfigError, ParameterError
from .model import TrainSchedule, default_toy_config, synthetic_corpus, train_run

_MODEL_EVAL_MAX_CONTEXT = 512


def per_query_gathered_keys(context_length: int, block_size: int, top_k: int) -> np.ndarray:
    """Exact number of keys each query attends to under block routing.

    Selection-independent: every history block contributes exactly
    ``block_size`` keys (the ragged final block is never anyone's history
    block), and the current block contributes the in-block prefix. So
    count(p) = (p - block_start(p) + 1) + (min(top_k, block(p)) - 1) * block_size.
    """
    if context_length < 1 or block_size < 1 or top_k < 1:
        raise ParameterError("context_length, block_size, top_k must all be >= 1")
    pos = np.arange(1, context_length + 1, dtype=np.int64)
    blk = (pos - 1) // block_size + 1
    within_current = pos - (blk - 1) * block_size
    selected = np.minimum(top_k, blk)
    return within_current + (selected - 1) * block_size


@dataclass(frozen=True)
class FlopReport:
    """Multiply-add counts for one (config, context length) pair."""

    context_length: int
    block_size: int
    top_k: int
    num_heads: int
    head_dim: int
    dense_flops: int
    moba_flops: int    # attention term only
    gating_flops: int  # reported separately, not part of any ratio
    ratio: float       # moba_flops / dense_flops
    theoretical_ratio: float  # 1 - sparsity = min(B*k, N) / N

    @property
    def sparsity(self) -> float:
        return 1.0 - self.theoretical_ratio


def flop_report(config: AttentionConfig, context_length: int) -> FlopReport:
    """Exact dense vs block-routed attention cost at one context length."""
    if config.mode != "moba":
        raise ConfigError(f"flop accounting needs a moba-mode config, got {config.mode!r}")
    N = int(context_length)
    if N < 1:
        raise ParameterError(f"context_length must be >= 1, got {N}")
    B, k = config.block_size, config.top_k
    d, h = config.head_dim, config.num_heads
    counts = per_query_gathered_keys(N, B, k)
    dense = 4 * d * h * (N * (N + 1) // 2)
    moba = 4 * d * h * int(counts.sum())
    num_blocks = -(-N // B)
    gating = N * num_blocks * d * h
    theoretical = float(Fraction(min(B * k, N), N))
    return FlopReport(
        context_length=N,
        block_size=B,
        top_k=k,
        num_heads=h,
        head_dim=d,
        dense_flops=int(dense),
        moba_flops=int(moba),
        gating_flops=int(gating),
        ratio=moba / dense,
        theoretical_ratio=theoretical,
    )


@dataclass(frozen=True)
class SweepEntry:
    block_count: int
    block_size: int
    top_k: int
    sparsity: float
    report: FlopReport
    final_loss: float | None = None


def segmentation_sweep(
    context_length: int,
    sparsity_target: float,
    block_counts,
    num_heads: int = 1,
    head_dim: int = 64,
    strict: bool = True,
    model_steps: int = 0,
    seed: int = 0,
) -> list[SweepEntry]:
    """Hold sparsity fixed while varying how finely the context is segmented.

    For each block count n the context splits into B = N/n blocks and the
    gate keeps k = round((1 - target) * n) of them; (n, k) pairs that cannot
    realize the target, or block counts that do not divide N in strict mode,
    raise ConfigError. With ``model_steps`` > 0 each configuration also
    trains a toy model at that context length and reports its final loss.
    """
    if not 0.0 <= sparsity_target < 1.0:
        raise ConfigError(f"sparsity_target must be in [0, 1), got {sparsity_target}")
    entries: list[SweepEntry] = []
    for bc in block_counts:
        bc = int(bc)
        if bc < 1 or bc > context_length:
            raise ConfigError(f"block count {bc} infeasible for N={context_length}")
        if context_length % bc != 0:
            if strict:
                raise ConfigError(
                    f"block count {bc} does not divide N={context_length} (strict mode)"
                )
            block_size = -(-context_length // bc)
        else:
            block_size = context_length // bc
        k = round((1.0 - sparsity_target) * bc)
        if k < 1 or abs((1.0 - k / bc) - sparsity_target) > 0.5 / bc + 1e-12:
            raise ConfigError(
                f"block count {bc} cannot realize sparsity {sparsity_target} "
                f"(nearest k = {k})"
            )
        config = AttentionConfig(
            mode="moba", num_heads=num_heads, head_dim=head_dim,
            block_size=block_size, top_k=k,
        )
        report = flop_report(config, context_length)
        final_loss = None
        if model_steps > 0:
            final_loss = _sweep_model_loss(context_length, block_size, k, model_steps, seed)
        entries.append(SweepEntry(
            block_count=bc,
            block_size=block_size,
            top_k=k,
            sparsity=1.0 - k / bc,
            report=report,
            final_loss=final_loss,
        ))
    return entries


def _sweep_model_loss(context_length, block_size, top_k, steps, seed) -> float:
    if context_length > _MODEL_EVAL_MAX_CONTEXT:
        raise ConfigError(
            f"model evaluation supports contexts up to {_MODEL_EVAL_MAX_CONTEXT}, "
            f"got {context_length}"
        )
    config = default_toy_config(
        max_context=context_length,
        block_size=block_size,
        top_k=top_k,
    )
    schedule = TrainSchedule(
        total_steps=steps,
        context_length=context_length,
        switch_fraction=1.0,
        seed=seed,
    )
    corpus = synthetic_corpus(length=max(8 * context_length, 1024), seed=seed)
    result = train_run(corpus, config, schedule)
    tail = result.losses[-min(5, len(result.records)):]
    return float(tail.mean())
