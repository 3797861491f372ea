"""Gated block-sparse attention with a dense oracle, a grouped pipeline, a
toy hybrid trainer, and long-context loss metrics.

The package is organized bottom-up:

* ``tensor``: dense kernels (matmul, stable softmax, block pooling, seeded RNG)
* ``gating``: block partitions and query-to-block routing
* ``attention``: dense reference, gathered oracle, grouped pipeline,
  online-softmax recombination
* ``autodiff``: minimal reverse-mode tape for the toy model
* ``model``: decoder stack, Adam, hybrid schedule, training loop
* ``metrics``: position-bucket losses, trailing loss, power-law fits
* ``harness``: exact operation counts and segmentation sweeps
* ``verify``: the named acceptance suites (also behind ``moba verify``)
"""

from .attention import (
    AttentionConfig,
    PartialAttention,
    dense_attention,
    moba_attention_oracle,
    moba_attention_pipeline,
    online_softmax_combine,
)
from .autodiff import Node, backward, finite_difference_gradient
from .errors import MobaError
from .gating import (
    BlockPartition,
    RoutingRow,
    RoutingTable,
    affinity_scores,
    build_routing_table,
    make_partition,
    moba_gate,
    sink_gate,
    swa_gate,
)
from .harness import FlopReport, flop_report, segmentation_sweep
from .metrics import (
    LossBucket,
    PowerLawFit,
    fit_power_law,
    positionwise_lm_loss,
    sparsity_ratio,
    trailing_lm_loss,
)
from .model import (
    LayerStackConfig,
    TrainSchedule,
    layer_stack_forward,
    lm_loss,
    synthetic_corpus,
    train_run,
)
from .tensor import Tensor, block_mean_pool, matmul, seeded_random, stable_softmax_rows

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "BlockPartition",
    "FlopReport",
    "LayerStackConfig",
    "LossBucket",
    "MobaError",
    "Node",
    "PartialAttention",
    "PowerLawFit",
    "RoutingRow",
    "RoutingTable",
    "Tensor",
    "TrainSchedule",
    "affinity_scores",
    "backward",
    "block_mean_pool",
    "build_routing_table",
    "dense_attention",
    "finite_difference_gradient",
    "fit_power_law",
    "flop_report",
    "layer_stack_forward",
    "lm_loss",
    "make_partition",
    "matmul",
    "moba_attention_oracle",
    "moba_attention_pipeline",
    "moba_gate",
    "online_softmax_combine",
    "positionwise_lm_loss",
    "seeded_random",
    "segmentation_sweep",
    "sink_gate",
    "sparsity_ratio",
    "stable_softmax_rows",
    "swa_gate",
    "synthetic_corpus",
    "train_run",
    "trailing_lm_loss",
]
