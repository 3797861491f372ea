"""Toy decoder-only language model with per-layer attention modes and a
two-stage training schedule.

The stack is deliberately small: learned token and position embeddings,
pre-norm residual blocks (attention + GELU feed-forward), a final norm, and a
vocabulary head. Every layer runs the same fused masked-attention op; a
layer's mode only changes the boolean key mask (full causal, or the union of
routed blocks cut causally inside the current block). Routing therefore adds
no parameters, and with a saturated top-k the routed mask equals the causal
mask bit for bit, so "sparse" and "full" runs coincide exactly.

Training follows a token-budget schedule: sparse layer modes while
tokens_seen < floor(switch_fraction * total token budget), all-full after.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig
from .errors import (
    ConfigError,
    DegenerateBatchError,
    ParameterError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .gating import build_routing_table, make_partition
from .tensor import Tensor

_LAYER_MODES = ("moba", "full")
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class LayerStackConfig:
    """Shape and wiring of the toy decoder stack."""

    num_layers: int
    d_model: int
    ffn_dim: int
    vocab_size: int
    max_context: int
    attention: AttentionConfig
    layer_modes: tuple[str, ...]

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if len(self.layer_modes) != self.num_layers:
            raise ConfigError(
                f"{self.num_layers} layers but {len(self.layer_modes)} layer modes"
            )
        for m in self.layer_modes:
            if m not in _LAYER_MODES:
                raise ConfigError(f"unknown layer mode {m!r}; expected one of {_LAYER_MODES}")
        if self.attention.mode != "moba":
            raise ConfigError(
                "the stack's attention config must be moba-mode; full layers ignore it"
            )
        if self.d_model != self.attention.num_heads * self.attention.head_dim:
            raise ConfigError(
                f"d_model {self.d_model} != num_heads {self.attention.num_heads} "
                f"* head_dim {self.attention.head_dim}"
            )
        if self.ffn_dim < 1 or self.vocab_size < 2 or self.max_context < 1:
            raise ConfigError("ffn_dim >= 1, vocab_size >= 2, max_context >= 1 required")

    @classmethod
    def layerwise_hybrid(cls, full_last: int, **kwargs) -> "LayerStackConfig":
        """First layers sparse, the last ``full_last`` layers full."""
        num_layers = kwargs.pop("num_layers")
        if not 0 <= full_last <= num_layers:
            raise ConfigError(
                f"full_last must be in [0, {num_layers}], got {full_last}"
            )
        modes = ("moba",) * (num_layers - full_last) + ("full",) * full_last
        return cls(num_layers=num_layers, layer_modes=modes, **kwargs)


def default_toy_config(
    layer_modes=("moba", "moba"),
    d_model: int = 64,
    num_heads: int = 2,
    ffn_dim: int = 128,
    vocab_size: int = 64,
    max_context: int = 128,
    block_size: int = 32,
    top_k: int = 2,
) -> LayerStackConfig:
    """A byte-scale stack that trains in seconds on a CPU."""
    attention = AttentionConfig(
        mode="moba",
        num_heads=num_heads,
        head_dim=d_model // num_heads,
        block_size=block_size,
        top_k=top_k,
    )
    return LayerStackConfig(
        num_layers=len(layer_modes),
        d_model=d_model,
        ffn_dim=ffn_dim,
        vocab_size=vocab_size,
        max_context=max_context,
        attention=attention,
        layer_modes=tuple(layer_modes),
    )


@dataclass(frozen=True)
class TrainSchedule:
    """Step budget, hybrid switch point, and optimizer hyperparameters."""

    total_steps: int
    context_length: int
    switch_fraction: float = 1.0  # 1.0: never switch; 0.0: full from step 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.context_length < 1:
            raise ConfigError("context_length must be >= 1")
        if not 0.0 <= self.switch_fraction <= 1.0:
            raise ConfigError(
                f"switch_fraction must be in [0, 1], got {self.switch_fraction}"
            )
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def token_budget(self) -> int:
        return self.total_steps * self.context_length

    def switch_tokens(self) -> int:
        """Token count at which the sparse phase ends."""
        return math.floor(self.switch_fraction * self.token_budget)

    def mode_at(self, step: int) -> str:
        """Phase of a 0-based step: sparse layer modes or all-full."""
        return "moba" if step * self.context_length < self.switch_tokens() else "full"

    @property
    def switch_step(self) -> int:
        """First all-full step (== total_steps when there is no full phase)."""
        s = -(-self.switch_tokens() // self.context_length)
        return min(s, self.total_steps)


def init_params(config: LayerStackConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded parameter set; creation order is fixed so a seed pins every
    weight. Same shapes for every combination of layer modes."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(0,))
    rng = np.random.Generator(np.random.Philox(seed=ss))

    def normal(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    dm, ff, vs = config.d_model, config.ffn_dim, config.vocab_size
    params: dict[str, np.ndarray] = {
        "tok_emb": normal(vs, dm),
        "pos_emb": normal(config.max_context, dm),
    }
    for i in range(config.num_layers):
        p = f"layer{i}."
        params[p + "attn_norm.gain"] = np.ones(dm)
        params[p + "attn_norm.bias"] = np.zeros(dm)
        for proj in ("wq", "wk", "wv", "wo"):
            params[p + proj] = normal(dm, dm)
        for b in ("bq", "bk", "bv", "bo"):
            params[p + b] = np.zeros(dm)
        params[p + "ffn_norm.gain"] = np.ones(dm)
        params[p + "ffn_norm.bias"] = np.zeros(dm)
        params[p + "w1"] = normal(dm, ff)
        params[p + "b1"] = np.zeros(ff)
        params[p + "w2"] = normal(ff, dm)
        params[p + "b2"] = np.zeros(dm)
    params["out_norm.gain"] = np.ones(dm)
    params["out_norm.bias"] = np.zeros(dm)
    params["head_w"] = normal(dm, vs)
    params["head_b"] = np.zeros(vs)
    return params


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _moba_allowed_mask(
    q_flat: np.ndarray,
    k_flat: np.ndarray,
    config: LayerStackConfig,
) -> np.ndarray:
    """Boolean [heads, N, N] key mask from routing on the current projections.

    allowed[h, p, j] is True iff key j's block is selected by (p, h) and
    j <= p; with a saturated top-k this reduces to the plain causal mask."""
    attn = config.attention
    N = q_flat.shape[0]
    h, d = attn.num_heads, attn.head_dim
    partition = make_partition(N, attn.block_size)
    routing = build_routing_table(
        Tensor(q_flat.reshape(N, h, d)),
        Tensor(k_flat.reshape(N, h, d)),
        partition,
        attn.top_k,
    )
    key_block = np.arange(N) // attn.block_size  # 0-based block of each key
    allowed = routing.gates[:, :, key_block]     # [N, h, N]
    allowed = allowed & _causal_mask(N)[:, None, :]
    return allowed.transpose(1, 0, 2)


def forward_graph(
    params: dict[str, ad.Node],
    tokens: np.ndarray,
    config: LayerStackConfig,
    modes: tuple[str, ...],
) -> ad.Node:
    """Build the logits graph for one token window. ``modes`` overrides the
    per-layer attention modes (the trainer switches them mid-run)."""
    tokens = np.asarray(tokens)
    N = tokens.shape[0]
    if N > config.max_context:
        raise ConfigError(
            f"context overflow: {N} tokens, model supports {config.max_context}"
        )
    if tokens.min(initial=0) < 0 or tokens.max(initial=-1) >= config.vocab_size:
        raise ParameterError("token ids outside the vocabulary")
    if len(modes) != config.num_layers:
        raise ConfigError(f"need {config.num_layers} modes, got {len(modes)}")
    attn = config.attention
    h, d = attn.num_heads, attn.head_dim
    f = 1.0 / math.sqrt(d) if attn.scale else 1.0

    x = ad.add(
        ad.embedding(params["tok_emb"], tokens),
        ad.embedding(params["pos_emb"], np.arange(N)),
    )
    for i, mode in enumerate(modes):
        p = f"layer{i}."
        y = ad.layer_norm(x, params[p + "attn_norm.gain"], params[p + "attn_norm.bias"])
        qf = ad.add(ad.matmul(y, params[p + "wq"]), params[p + "bq"])
        kf = ad.add(ad.matmul(y, params[p + "wk"]), params[p + "bk"])
        vf = ad.add(ad.matmul(y, params[p + "wv"]), params[p + "bv"])
        q3 = ad.transpose(ad.reshape(qf, (N, h, d)), (1, 0, 2))
        k3 = ad.transpose(ad.reshape(kf, (N, h, d)), (1, 0, 2))
        v3 = ad.transpose(ad.reshape(vf, (N, h, d)), (1, 0, 2))
        if mode == "full":
            allowed = _causal_mask(N)
        else:
            allowed = _moba_allowed_mask(qf.value, kf.value, config)
        att = ad.masked_attention(q3, k3, v3, allowed, f)
        merged = ad.reshape(ad.transpose(att, (1, 0, 2)), (N, h * d))
        x = ad.add(x, ad.add(ad.matmul(merged, params[p + "wo"]), params[p + "bo"]))
        y2 = ad.layer_norm(x, params[p + "ffn_norm.gain"], params[p + "ffn_norm.bias"])
        hidden = ad.gelu(ad.add(ad.matmul(y2, params[p + "w1"]), params[p + "b1"]))
        x = ad.add(x, ad.add(ad.matmul(hidden, params[p + "w2"]), params[p + "b2"]))
    final = ad.layer_norm(x, params["out_norm.gain"], params["out_norm.bias"])
    return ad.add(ad.matmul(final, params["head_w"]), params["head_b"])


def layer_stack_forward(
    tokens,
    config: LayerStackConfig,
    params: dict[str, np.ndarray],
    modes: tuple[str, ...] | None = None,
) -> Tensor:
    """Deterministic logits [N, vocab] for a token window."""
    nodes = {name: ad.leaf(value) for name, value in params.items()}
    logits = forward_graph(nodes, tokens, config, tuple(modes or config.layer_modes))
    return Tensor._wrap(logits.value)


def token_losses(logits: Tensor, targets) -> np.ndarray:
    """Per-position cross-entropy, computed stably in float64."""
    z = logits.array.astype(np.float64, copy=False)
    if z.ndim != 2:
        raise ShapeMismatchError(f"logits must be [N, vocab], got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (z.shape[0],):
        raise ShapeMismatchError(f"targets must be [{z.shape[0]}], got {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= z.shape[1]:
        raise ParameterError("target ids outside the vocabulary")
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return lse - z[np.arange(z.shape[0]), targets]


def lm_loss(logits: Tensor, targets, loss_mask=None) -> float:
    """Mean next-token cross-entropy over unmasked positions."""
    per = token_losses(logits, targets)
    if loss_mask is None:
        return float(per.mean())
    msk = np.asarray(loss_mask, dtype=bool)
    if msk.shape != per.shape:
        raise ShapeMismatchError(f"mask must be {per.shape}, got {msk.shape}")
    count = int(msk.sum())
    if count == 0:
        raise DegenerateBatchError("every position is masked out of the loss")
    return float(per[msk].sum() / count)


class Adam:
    """Adam with bias correction; updates parameters in place."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def synthetic_corpus(
    length: int = 2048,
    vocab_size: int = 64,
    seed: int = 0,
    motif_length: int = 16,
    mutation_rate: float = 0.02,
) -> np.ndarray:
    """A learnable byte stream: one random motif tiled to ``length`` with a
    sprinkle of random substitutions so the task is not purely copyable."""
    if length < 2:
        raise ParameterError("corpus needs at least 2 tokens")
    if not 2 <= vocab_size <= 256:
        raise ParameterError("vocab_size must be in [2, 256] (byte-level)")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    motif = rng.integers(0, vocab_size, size=motif_length)
    tiled = np.tile(motif, -(-length // motif_length))[:length]
    noise = rng.integers(0, vocab_size, size=length)
    mutate = rng.random(length) < mutation_rate
    return np.where(mutate, noise, tiled).astype(np.int64)


@dataclass(frozen=True)
class StepRecord:
    step: int
    tokens_seen: int  # tokens consumed after completing this step
    mode: str
    loss: float


@dataclass
class TrainResult:
    records: list[StepRecord]
    params: dict[str, np.ndarray]
    config: LayerStackConfig
    schedule: TrainSchedule

    @property
    def losses(self) -> np.ndarray:
        return np.asarray([r.loss for r in self.records])


def _diverged(step: int, mode: str, params: dict[str, np.ndarray], logits_stats) -> TrainingDivergedError:
    diagnostics = {
        "step": step,
        "mode": mode,
        "logits": logits_stats,
        "params": {
            name: {
                "max_abs": float(np.max(np.abs(v))) if v.size else 0.0,
                "finite": bool(np.isfinite(v).all()),
            }
            for name, v in params.items()
        },
    }
    return TrainingDivergedError(
        f"non-finite loss at step {step}; aborting instead of emitting NaN",
        diagnostics,
    )


def train_run(
    corpus: np.ndarray,
    config: LayerStackConfig,
    schedule: TrainSchedule,
    loss_csv_path: str | None = None,
    checkpoint_path: str | None = None,
) -> TrainResult:
    """Train on random windows of ``corpus`` under the hybrid schedule.

    Deterministic given (corpus, config, schedule): parameter init and window
    sampling run on separate Philox streams derived from schedule.seed.
    """
    corpus = np.asarray(corpus)
    ctx = schedule.context_length
    if ctx > config.max_context:
        raise ConfigError(
            f"schedule context {ctx} exceeds model max_context {config.max_context}"
        )
    if corpus.ndim != 1 or corpus.shape[0] < ctx + 1:
        raise ParameterError(
            f"corpus must be 1-D with at least context_length+1 = {ctx + 1} tokens"
        )
    if corpus.min() < 0 or corpus.max() >= config.vocab_size:
        raise ParameterError("corpus tokens outside the vocabulary")

    params = init_params(config, schedule.seed)
    opt = Adam(params, schedule.learning_rate, schedule.beta1, schedule.beta2, schedule.eps)
    data_rng = np.random.Generator(
        np.random.Philox(seed=np.random.SeedSequence(entropy=int(schedule.seed), spawn_key=(1,)))
    )
    records: list[StepRecord] = []
    for step in range(schedule.total_steps):
        phase = schedule.mode_at(step)
        modes = config.layer_modes if phase == "moba" else ("full",) * config.num_layers
        offset = int(data_rng.integers(0, corpus.shape[0] - ctx))
        window = corpus[offset:offset + ctx + 1]
        nodes = {name: ad.leaf(value) for name, value in params.items()}
        logits = forward_graph(nodes, window[:-1], config, modes)
        loss = ad.cross_entropy(logits, window[1:])
        loss_value = float(loss.value)
        if not math.isfinite(loss_value):
            raise _diverged(step, phase, params, {
                "max": float(np.nanmax(logits.value)),
                "min": float(np.nanmin(logits.value)),
                "finite": bool(np.isfinite(logits.value).all()),
            })
        ad.backward(loss)
        opt.step({name: node.grad for name, node in nodes.items()})
        for name, value in params.items():
            if not np.isfinite(value).all():
                raise _diverged(step, phase, params, {"note": f"{name} became non-finite after update"})
        records.append(StepRecord(step=step, tokens_seen=(step + 1) * ctx, mode=phase, loss=loss_value))

    if loss_csv_path is not None:
        write_loss_csv(records, loss_csv_path)
    if checkpoint_path is not None:
        checkpoint_save(checkpoint_path, config, schedule, params, schedule.total_steps)
    return TrainResult(records=records, params=params, config=config, schedule=schedule)


def write_loss_csv(records, path: str) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "tokens_seen", "mode", "loss"])
        for r in records:
            writer.writerow([r.step, r.tokens_seen, r.mode, repr(r.loss)])


def layer_stack_config_to_dict(config: LayerStackConfig) -> dict:
    d = asdict(config)
    d["layer_modes"] = list(config.layer_modes)
    return d


def layer_stack_config_from_dict(d: dict) -> LayerStackConfig:
    d = dict(d)
    attention = AttentionConfig(**d.pop("attention"))
    d["layer_modes"] = tuple(d["layer_modes"])
    return LayerStackConfig(attention=attention, **d)


def train_schedule_from_dict(d: dict) -> TrainSchedule:
    return TrainSchedule(**d)


def checkpoint_save(
    path: str,
    config: LayerStackConfig,
    schedule: TrainSchedule,
    params: dict[str, np.ndarray],
    step: int,
) -> None:
    """Versioned checkpoint: npz archive written atomically (tmp + rename)."""
    meta = json.dumps({
        "format": CHECKPOINT_FORMAT,
        "step": int(step),
        "config": layer_stack_config_to_dict(config),
        "schedule": asdict(schedule),
    })
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.asarray(meta), **params)
    os.replace(tmp, path)


def checkpoint_load(path: str):
    """Returns (config, schedule, params, step)."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"][()]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {meta.get('format')!r}")
        params = {k: z[k] for k in z.files if k != "__meta__"}
    config = layer_stack_config_from_dict(meta["config"])
    schedule = train_schedule_from_dict(meta["schedule"])
    return config, schedule, params, meta["step"]
