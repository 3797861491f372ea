"""Long-context loss metrics and power-law fitting.

Position-wise loss buckets answer "how does loss depend on how deep into the
context a token sits"; the trailing loss summarizes only the deepest tail of
full-length sequences. Both apply a minimum-length filter so short sequences
never dilute deep-position statistics. Scaling fits are ordinary least
squares on (log C, log L), i.e. the model L = a * C**b.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DegenerateBatchError, FitDomainError, ParameterError

logger = logging.getLogger(__name__)


def sparsity_ratio(context_length: int, block_size: int, top_k: int) -> Fraction:
    """Fraction of key positions a late query does NOT attend to:
    1 - min(block_size * top_k, N) / N, as an exact rational."""
    if context_length < 1 or block_size < 1 or top_k < 1:
        raise ParameterError("context_length, block_size, top_k must all be >= 1")
    if context_length < block_size:
        raise ParameterError(
            f"context_length {context_length} shorter than one block ({block_size})"
        )
    attended = min(block_size * top_k, context_length)
    return 1 - Fraction(attended, context_length)


@dataclass(frozen=True)
class LossBucket:
    lo: int          # inclusive 0-based position
    hi: int          # exclusive
    mean_loss: float
    token_count: int
    min_length: int  # sequences shorter than this were excluded (== hi)


@dataclass(frozen=True)
class PowerLawFit:
    coefficient: float    # a in L = a * C**b
    exponent: float       # b
    log_rms_residual: float
    point_count: int

    def predict(self, compute: float) -> float:
        return self.coefficient * compute ** self.exponent


def _check_loss_batch(per_token_losses, seq_lengths):
    if len(per_token_losses) != len(seq_lengths):
        raise ParameterError(
            f"{len(per_token_losses)} loss arrays but {len(seq_lengths)} lengths"
        )
    if not per_token_losses:
        raise ParameterError("empty batch")
    arrays = []
    for i, (arr, length) in enumerate(zip(per_token_losses, seq_lengths)):
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim != 1 or a.shape[0] != length:
            raise ParameterError(
                f"sequence {i}: declared length {length}, loss array shape {a.shape}"
            )
        arrays.append(a)
    return arrays, [int(s) for s in seq_lengths]


def positionwise_lm_loss(
    per_token_losses,
    seq_lengths,
    bucket_size: int,
) -> tuple[list[LossBucket], list[tuple[int, int]]]:
    """Mean loss per position bucket [lo, lo + bucket_size).

    A sequence contributes to a bucket only if it is long enough to fill it
    (length >= hi), so deep buckets are never diluted by short sequences.
    Returns (buckets, skipped) where ``skipped`` lists the [lo, hi) ranges
    that no sequence qualified for.
    """
    if bucket_size < 1:
        raise ParameterError(f"bucket_size must be >= 1, got {bucket_size}")
    arrays, lengths = _check_loss_batch(per_token_losses, seq_lengths)
    max_len = max(lengths)
    buckets: list[LossBucket] = []
    skipped: list[tuple[int, int]] = []
    for lo in range(0, max_len, bucket_size):
        hi = lo + bucket_size
        chunks = [a[lo:hi] for a, n in zip(arrays, lengths) if n >= hi]
        if not chunks:
            skipped.append((lo, hi))
            continue
        flat = np.concatenate(chunks)
        buckets.append(LossBucket(
            lo=lo, hi=hi,
            mean_loss=float(flat.mean()),
            token_count=int(flat.size),
            min_length=hi,
        ))
    if skipped:
        logger.warning("position buckets with no qualifying sequence: %s", skipped)
    return buckets, skipped


def trailing_lm_loss(per_token_losses, seq_lengths, max_len: int, tail_len: int) -> float:
    """Mean loss over the final ``tail_len`` positions, counting only
    sequences that reach ``max_len`` exactly."""
    if not 1 <= tail_len <= max_len:
        raise ParameterError(f"tail_len must be in [1, {max_len}], got {tail_len}")
    arrays, lengths = _check_loss_batch(per_token_losses, seq_lengths)
    if any(n > max_len for n in lengths):
        raise ParameterError("a sequence is longer than the declared max_len")
    tails = [a[max_len - tail_len:max_len] for a, n in zip(arrays, lengths) if n == max_len]
    if not tails:
        raise DegenerateBatchError(f"no sequence reaches max_len={max_len}")
    return float(np.concatenate(tails).mean())


def fit_power_law(points) -> PowerLawFit:
    """Least-squares fit of L = a * C**b in log space.

    ``points`` is a sequence of (compute, loss) pairs; both must be strictly
    positive. Residuals are reported as the RMS of log L - (log a + b log C).
    """
    pts = [(float(c), float(l)) for c, l in points]
    if len(pts) < 2:
        raise ParameterError(f"need at least 2 points to fit, got {len(pts)}")
    c = np.asarray([p[0] for p in pts])
    l = np.asarray([p[1] for p in pts])
    if (c <= 0).any() or (l <= 0).any():
        raise FitDomainError("compute and loss must be strictly positive")
    x = np.log(c)
    y = np.log(l)
    xm = x.mean()
    var = ((x - xm) ** 2).sum()
    if var == 0:
        raise ParameterError("all compute values are identical; slope is undefined")
    slope = ((x - xm) * (y - y.mean())).sum() / var
    intercept = y.mean() - slope * xm
    resid = y - (intercept + slope * x)
    return PowerLawFit(
        coefficient=math.exp(intercept),
        exponent=float(slope),
        log_rms_residual=float(np.sqrt((resid ** 2).mean())),
        point_count=len(pts),
    )
