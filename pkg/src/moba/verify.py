"""Named verification suites: one per acceptance criterion.

Both ``moba verify`` and tests/test_acceptance.py run these, so the CLI gate
and the pytest gate cannot drift apart. Every suite is deterministic given
its seed (instance generators run on Philox streams derived from it) and
reports the worst residual it saw next to the tolerance it enforced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionConfig,
    PartialAttention,
    dense_attention,
    gathered_key_indices,
    moba_attention_oracle,
    moba_attention_pipeline,
    online_softmax_combine,
)
from .gating import (
    build_routing_table,
    build_sink_table,
    build_swa_table,
    make_partition,
    moba_gate,
)
from .harness import flop_report
from .metrics import fit_power_law, positionwise_lm_loss, sparsity_ratio, trailing_lm_loss
from .model import TrainSchedule, default_toy_config, synthetic_corpus, train_run
from .tensor import Tensor, row_softmax

DEFAULT_SEED = 2026


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(seed=np.random.SeedSequence(entropy=int(seed), spawn_key=(tag,)))
    )


def _t(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, size=shape))


def saturation_equivalence(seed: int = DEFAULT_SEED) -> SuiteResult:
    """With top-k >= number of blocks, routed attention must equal dense
    causal attention on all three routes (tolerance 1e-10, 50 instances)."""
    rng = _rng(seed, 1)
    worst = 0.0
    for i in range(50):
        N = int(rng.integers(2, 257))
        h = int(rng.integers(1, 5))
        d = int(rng.integers(2, 17))
        B = int(rng.integers(1, N + 1))
        n = -(-N // B)
        k = n + int(rng.integers(0, 3))
        scale = bool(i % 2)
        Q, K, V = _t(rng, (N, h, d)), _t(rng, (N, h, d)), _t(rng, (N, h, d))
        dense = dense_attention(Q, K, V, causal=True, scale=scale).array
        part = make_partition(N, B)
        routing = build_routing_table(Q, K, part, k)
        oracle = moba_attention_oracle(Q, K, V, routing, part, scale=scale).array
        config = AttentionConfig(mode="moba", num_heads=h, head_dim=d,
                                 block_size=B, top_k=k, scale=scale)
        pipe = moba_attention_pipeline(Q, K, V, config).array
        worst = max(worst,
                    float(np.abs(oracle - dense).max()),
                    float(np.abs(pipe - dense).max()))
    return SuiteResult(
        "saturation-equivalence",
        worst <= 1e-10,
        f"max |routed - dense| = {worst:.3e} over 50 saturated instances (tol 1e-10)",
    )


def pipeline_oracle_equivalence(seed: int = DEFAULT_SEED) -> SuiteResult:
    """Grouped pipeline vs per-query gather oracle on random (N, B, k)
    instances (tolerance 1e-10, 100 instances)."""
    rng = _rng(seed, 2)
    worst = 0.0
    for i in range(100):
        N = int(rng.integers(2, 129))
        h = int(rng.integers(1, 5))
        d = int(rng.integers(2, 17))
        B = int(rng.integers(1, N + 1))
        n = -(-N // B)
        k = int(rng.integers(1, n + 1))
        scale = bool(i % 2)
        Q, K, V = _t(rng, (N, h, d)), _t(rng, (N, h, d)), _t(rng, (N, h, d))
        part = make_partition(N, B)
        routing = build_routing_table(Q, K, part, k)
        oracle = moba_attention_oracle(Q, K, V, routing, part, scale=scale).array
        config = AttentionConfig(mode="moba", num_heads=h, head_dim=d,
                                 block_size=B, top_k=k, scale=scale)
        pipe = moba_attention_pipeline(Q, K, V, config).array
        worst = max(worst, float(np.abs(pipe - oracle).max()))
    return SuiteResult(
        "pipeline-oracle-equivalence",
        worst <= 1e-10,
        f"max |pipeline - oracle| = {worst:.3e} over 100 instances (tol 1e-10)",
    )


def online_softmax(seed: int = DEFAULT_SEED) -> SuiteResult:
    """Partial-attention merging: split vs direct softmax, associativity,
    and permutation invariance (tolerance 1e-12, 1000 random vectors)."""
    rng = _rng(seed, 3)
    worst = 0.0
    for _ in range(1000):
        L = int(rng.integers(2, 41))
        d = int(rng.integers(1, 9))
        logits = rng.normal(0.0, 3.0, size=(1, L))
        values = rng.normal(0.0, 1.0, size=(L, d))
        direct = row_softmax(logits) @ values
        nparts = int(rng.integers(2, min(5, L) + 1))
        cuts = np.sort(rng.choice(np.arange(1, L), size=nparts - 1, replace=False))
        bounds = [0, *cuts.tolist(), L]
        parts = [
            PartialAttention.from_logits(logits[:, a:b], values[a:b])
            for a, b in zip(bounds[:-1], bounds[1:])
        ]
        combined = online_softmax_combine(parts).array
        worst = max(worst, float(np.abs(combined - direct).max()))
        if len(parts) >= 3:
            left = parts[0]
            for p in parts[1:]:
                left = left.merge(p)
            right = parts[-1]
            for p in reversed(parts[:-1]):
                right = p.merge(right)
            worst = max(worst, float(np.abs(left.finalize() - right.finalize()).max()))
        shuffled = [parts[j] for j in rng.permutation(len(parts))]
        permuted = online_softmax_combine(shuffled).array
        worst = max(worst, float(np.abs(permuted - direct).max()))
    return SuiteResult(
        "online-softmax",
        worst <= 1e-12,
        f"max combine error = {worst:.3e} over 1000 split/assoc/permute trials (tol 1e-12)",
    )


def causality(seed: int = DEFAULT_SEED) -> SuiteResult:
    """Mutating keys/values at positions > t must leave outputs at positions
    <= t bitwise unchanged on all three routes (100 instances, exact)."""
    rng = _rng(seed, 4)
    violations = 0
    for _ in range(100):
        N = int(rng.integers(4, 65))
        h = int(rng.integers(1, 3))
        d = int(rng.integers(2, 9))
        B = int(rng.integers(1, N + 1))
        n = -(-N // B)
        k = int(rng.integers(1, n + 1))
        t = int(rng.integers(1, N))  # 1-based: positions > t get mutated
        Q = _t(rng, (N, h, d))
        K1, V1 = _t(rng, (N, h, d)), _t(rng, (N, h, d))
        k2 = K1.array.copy()
        v2 = V1.array.copy()
        k2[t:] = rng.normal(0.0, 1.0, size=(N - t, h, d))
        v2[t:] = rng.normal(0.0, 1.0, size=(N - t, h, d))
        K2, V2 = Tensor(k2), Tensor(v2)
        part = make_partition(N, B)
        config = AttentionConfig(mode="moba", num_heads=h, head_dim=d,
                                 block_size=B, top_k=k)

        d1 = dense_attention(Q, K1, V1, causal=True).array
        d2 = dense_attention(Q, K2, V2, causal=True).array
        o1 = moba_attention_oracle(Q, K1, V1, build_routing_table(Q, K1, part, k), part).array
        o2 = moba_attention_oracle(Q, K2, V2, build_routing_table(Q, K2, part, k), part).array
        p1 = moba_attention_pipeline(Q, K1, V1, config).array
        p2 = moba_attention_pipeline(Q, K2, V2, config).array
        for a, b in ((d1, d2), (o1, o2), (p1, p2)):
            if not np.array_equal(a[:t], b[:t]):
                violations += 1
    return SuiteResult(
        "causality",
        violations == 0,
        f"{violations} prefix perturbations across 100 instances x 3 routes (must be exactly 0)",
    )


def _brute_gate(scores: np.ndarray, query_pos: int, block_size: int, k: int) -> tuple[int, ...]:
    # Independent selection oracle: sort history blocks by (-score, index).
    cur = (query_pos - 1) // block_size + 1
    history = sorted(range(1, cur), key=lambda b: (-scores[b - 1], b))
    return tuple(sorted([cur] + history[:min(k, cur) - 1]))


def gating_semantics(seed: int = DEFAULT_SEED) -> SuiteResult:
    """Exhaustive gate check at N=64, B=8 for k in {1,2,3} against a
    brute-force oracle, plus tie determinism and swa/sink vs an explicit
    masked dense reference (tolerance 1e-10)."""
    rng = _rng(seed, 5)
    part = make_partition(64, 8)
    failures: list[str] = []
    for k in (1, 2, 3):
        for p in range(1, 65):
            scores = rng.normal(0.0, 1.0, size=8)
            row = moba_gate(scores, p, part, k)
            brute = _brute_gate(scores, p, 8, k)
            cur = part.block_of(p)
            if row.selected != brute:
                failures.append(f"k={k} p={p}: {row.selected} != oracle {brute}")
            if cur not in row.selected:
                failures.append(f"k={k} p={p}: current block missing")
            if any(b > cur for b in row.selected):
                failures.append(f"k={k} p={p}: future block selected")
            if len(row.selected) != min(k, cur):
                failures.append(f"k={k} p={p}: cardinality {len(row.selected)}")
            if k == 3 and len(row.selected) - 1 > 2:
                failures.append(f"p={p}: more than 2 history blocks at k=3")
            for i in range(1, 9):
                if p <= (i - 1) * 8:
                    if not math.isinf(row.scores[i - 1]) or row.scores[i - 1] > 0:
                        failures.append(f"k={k} p={p}: future block {i} score not -inf")
                    if row.gates[i - 1] != 0:
                        failures.append(f"k={k} p={p}: future block {i} gated on")
        # All-equal scores: ties must resolve to the lowest history indices.
        for p in (17, 40, 64):
            row = moba_gate(np.zeros(8), p, part, k)
            cur = part.block_of(p)
            expect = tuple(sorted(set(range(1, min(k, cur))) | {cur}))
            if row.selected != expect:
                failures.append(f"tie k={k} p={p}: {row.selected} != {expect}")
            again = moba_gate(np.zeros(8), p, part, k)
            if again != row:
                failures.append(f"tie rerun differs at k={k} p={p}")

    # swa / sink against a full-matrix masked softmax reference.
    worst = 0.0
    N, h, d, B = 48, 2, 8, 8
    spart = make_partition(N, B)
    Q, K, V = _t(rng, (N, h, d)), _t(rng, (N, h, d)), _t(rng, (N, h, d))
    for table in (build_swa_table(spart, h, 2), build_sink_table(spart, h, 1, 2)):
        out = moba_attention_oracle(Q, K, V, table, spart).array
        ref = _masked_dense_reference(Q, K, V, table, spart)
        worst = max(worst, float(np.abs(out - ref).max()))
    if worst > 1e-10:
        failures.append(f"swa/sink vs masked dense: {worst:.3e} > 1e-10")
    return SuiteResult(
        "gating-semantics",
        not failures,
        failures[0] if failures else
        f"192 exhaustive rows x 3 k-values match the brute oracle; "
        f"swa/sink vs masked dense = {worst:.3e} (tol 1e-10)",
    )


def _masked_dense_reference(Q, K, V, table, partition) -> np.ndarray:
    """Full [N, N] -inf-masked softmax route (independent of the gather path)."""
    N, h, d = Q.shape
    f = 1.0 / math.sqrt(d)
    out = np.empty((N, h, d))
    for j in range(h):
        mask = np.full((N, N), -np.inf)
        for p in range(1, N + 1):
            idx = gathered_key_indices(table.selected(p, j), partition, p)
            mask[p - 1, idx] = 0.0
        logits = f * (Q.array[:, j, :] @ K.array[:, j, :].T)
        out[:, j, :] = row_softmax(logits, mask) @ V.array[:, j, :]
    return out


def sparsity_arithmetic(seed: int = DEFAULT_SEED) -> SuiteResult:
    """Exact rational sparsity values for the reference configurations."""
    cases = [
        ((8192, 512, 3), Fraction(13, 16), 0.8125),
        ((32768, 512, 3), Fraction(61, 64), 0.953125),
        ((1048576, 4096, 12), Fraction(61, 64), 0.953125),
        ((131072, 4096, 12), Fraction(5, 8), 0.625),
    ]
    failures = []
    for args, frac, dec in cases:
        got = sparsity_ratio(*args)
        if got != frac or float(got) != dec:
            failures.append(f"sparsity{args} = {got}, expected {frac} ({dec})")
    return SuiteResult(
        "sparsity-arithmetic",
        not failures,
        failures[0] if failures else
        "4 reference configurations match exactly (Fraction equality)",
    )


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(analytic - numeric).max()) / denom


def gradient_checks(seed: int = DEFAULT_SEED) -> SuiteResult:
    """Analytic backward vs central finite differences (eps 1e-5) on dense
    and routing-frozen block-sparse attention, relative error <= 1e-4 over 20
    routing-stable instances; plus exactly-zero gradients for keys in blocks
    never selected by the contributing query."""
    worst = 0.0
    stable = 0
    attempts = 0
    base_seed = 0
    while stable < 20 and attempts < 200:
        attempts += 1
        base_seed += 1
        rng = _rng(seed, 700 + base_seed)
        N = int(rng.integers(6, 11))
        h = int(rng.integers(1, 3))
        d = int(rng.integers(3, 5))
        B = int(rng.integers(1, N + 1))
        n = -(-N // B)
        k = int(rng.integers(1, n + 1))
        f = 1.0 / math.sqrt(d)
        q0 = 0.5 * rng.normal(size=(N, h, d))
        k0 = 0.5 * rng.normal(size=(N, h, d))
        v0 = 0.5 * rng.normal(size=(N, h, d))
        part = make_partition(N, B)
        causal = np.tril(np.ones((N, N), dtype=bool))

        base_gates = build_routing_table(Tensor(q0), Tensor(k0), part, k).gates
        flipped = False

        def routed_mask(qa, ka):
            nonlocal flipped
            gates = build_routing_table(Tensor(qa), Tensor(ka), part, k).gates
            if not np.array_equal(gates, base_gates):
                flipped = True
            key_block = np.arange(N) // B
            allowed = gates[:, :, key_block] & causal[:, None, :]
            return allowed.transpose(1, 0, 2)

        def run(qa, ka, va, mask):
            qn, kn, vn = ad.leaf(qa.transpose(1, 0, 2)), ad.leaf(ka.transpose(1, 0, 2)), ad.leaf(va.transpose(1, 0, 2))
            loss = ad.sum_all(ad.masked_attention(qn, kn, vn, mask, f))
            return loss, qn, kn, vn

        inst_worst = 0.0
        for mask_of in (lambda qa, ka: causal, routed_mask):
            loss, qn, kn, vn = run(q0, k0, v0, mask_of(q0, k0))
            ad.backward(loss)
            analytic = {
                "q": qn.grad.transpose(1, 0, 2),
                "k": kn.grad.transpose(1, 0, 2),
                "v": vn.grad.transpose(1, 0, 2),
            }
            for name in ("q", "k", "v"):
                def fd_fn(x: Tensor, _name=name, _mask_of=mask_of) -> float:
                    args = {"q": q0, "k": k0, "v": v0}
                    args[_name] = x.array
                    loss_p, *_ = run(args["q"], args["k"], args["v"],
                                     _mask_of(args["q"], args["k"]))
                    return float(loss_p.value)

                fd = ad.finite_difference_gradient(fd_fn, Tensor(q0 if name == "q" else k0 if name == "k" else v0))
                inst_worst = max(inst_worst, _rel_err(analytic[name], fd.array))
        if flipped:
            continue  # a probe crossed a routing boundary; instance is invalid
        stable += 1
        worst = max(worst, inst_worst)

    zero_ok, zero_detail = _zero_gradient_probe(seed)
    passed = stable == 20 and worst <= 1e-4 and zero_ok
    return SuiteResult(
        "gradient-checks",
        passed,
        f"max rel FD error = {worst:.3e} over {stable} routing-stable instances "
        f"(tol 1e-4, {attempts} sampled); {zero_detail}",
    )


def _zero_gradient_probe(seed: int) -> tuple[bool, str]:
    """Loss over a single late query: keys/values in blocks that query never
    selected must get exactly-zero gradients (routing itself carries none)."""
    rng = _rng(seed, 71)
    N, h, d, B, k = 8, 2, 3, 2, 2
    part = make_partition(N, B)
    q0 = rng.normal(size=(N, h, d))
    k0 = rng.normal(size=(N, h, d))
    v0 = rng.normal(size=(N, h, d))
    routing = build_routing_table(Tensor(q0), Tensor(k0), part, k)
    key_block = np.arange(N) // B
    allowed = (routing.gates[:, :, key_block] & np.tril(np.ones((N, N), bool))[:, None, :]).transpose(1, 0, 2)
    qn, kn, vn = ad.leaf(q0.transpose(1, 0, 2)), ad.leaf(k0.transpose(1, 0, 2)), ad.leaf(v0.transpose(1, 0, 2))
    att = ad.masked_attention(qn, kn, vn, allowed, 1.0 / math.sqrt(d))
    selector = np.zeros((h, N, d))
    selector[:, N - 1, :] = 1.0  # only the last query contributes to the loss
    loss = ad.sum_all(ad.mul(att, ad.leaf(selector)))
    ad.backward(loss)
    checked = 0
    for j in range(h):
        selected = routing.selected(N, j)
        for b in range(1, part.num_blocks + 1):
            if b in selected:
                continue
            sl = part.rows(b)
            checked += 1
            if not (kn.grad[j, sl] == 0).all() or not (vn.grad[j, sl] == 0).all():
                return False, f"non-zero gradient in never-selected block {b}, head {j}"
    if checked == 0:
        return False, "zero-grad probe had no never-selected block to check"
    return True, f"exact-zero K/V gradients in {checked} never-selected (block, head) pairs"


def power_law_fit(seed: int = DEFAULT_SEED) -> SuiteResult:
    """Noiseless recovery of the reference scaling curves within 1e-9, and
    >= 95% of 200 noisy replicas (sigma 0.01 in log space) recover the
    exponent within 0.01."""
    curves = [
        (2.625, -0.063), (2.622, -0.063),
        (1.546, -0.108), (1.464, -0.097),
        (3.075, -0.078), (1.471, -0.091),
    ]
    compute = np.logspace(18, 22, 8)
    worst = 0.0
    for a, b in curves:
        fit = fit_power_law([(c, a * c ** b) for c in compute])
        worst = max(worst, abs(fit.coefficient - a), abs(fit.exponent - b))
    noiseless_ok = worst <= 1e-9

    rng = _rng(seed, 8)
    a, b = 1.546, -0.108
    hits = 0
    for _ in range(200):
        noisy = np.exp(np.log(a * compute ** b) + rng.normal(0.0, 0.01, size=compute.shape))
        fit = fit_power_law(list(zip(compute, noisy)))
        if abs(fit.exponent - b) <= 0.01:
            hits += 1
    return SuiteResult(
        "power-law-fit",
        noiseless_ok and hits >= 190,
        f"noiseless max |fit - truth| = {worst:.3e} over {len(curves)} curves (tol 1e-9); "
        f"noisy exponent recovered in {hits}/200 seeds (need >= 190)",
    )


def flop_scaling(seed: int = DEFAULT_SEED) -> SuiteResult:
    """B=512, k=3: per-token routed cost approximately constant in N
    (successive ratios within 10%), dense per-token cost doubling with N,
    and the cost ratio near 1 - sparsity at N = 64*B*k."""
    config = AttentionConfig(mode="moba", num_heads=1, head_dim=16,
                             block_size=512, top_k=3)
    sizes = [4096 * 2 ** i for i in range(7)]  # up to 262144
    reports = [flop_report(config, N) for N in sizes]
    per_token = [r.moba_flops / r.context_length for r in reports]
    ratio_drift = max(abs(b / a - 1.0) for a, b in zip(per_token[:-1], per_token[1:]))
    dense_pt = [r.dense_flops / r.context_length for r in reports]
    dense_ratios = [b / a for a, b in zip(dense_pt[:-1], dense_pt[1:])]
    dense_ok = all(1.9 <= r <= 2.1 for r in dense_ratios)
    star = flop_report(config, 64 * 512 * 3)
    star_gap = abs(star.ratio - star.theoretical_ratio)
    passed = ratio_drift <= 0.10 and dense_ok and star_gap <= 0.02
    return SuiteResult(
        "flop-scaling",
        passed,
        f"per-token drift {ratio_drift:.4f} (tol 0.10), dense per-token x"
        f"{min(dense_ratios):.3f}..x{max(dense_ratios):.3f} per doubling, "
        f"|ratio - (1 - sparsity)| = {star_gap:.4f} at N=98304 (tol 0.02)",
    )


def hybrid_training(seed: int = DEFAULT_SEED) -> SuiteResult:
    """(a) all-full training learns (final loss < 0.5x initial within 300
    steps); (b) a 90%-sparse schedule with saturated top-k matches the
    all-full trajectory within 1e-8; (c) a sub-saturated switch is finite and
    keeps post-switch loss within 2x of pre-switch."""
    corpus = synthetic_corpus(length=2048, vocab_size=64, seed=seed)
    details = []

    full_cfg = default_toy_config(layer_modes=("full", "full"))
    sched_a = TrainSchedule(total_steps=300, context_length=128, switch_fraction=1.0, seed=seed)
    run_a = train_run(corpus, full_cfg, sched_a)
    initial = run_a.records[0].loss
    final = float(run_a.losses[-10:].mean())
    ok_a = final < 0.5 * initial
    details.append(f"(a) loss {initial:.3f} -> {final:.3f} in 300 full steps")

    sat_cfg = default_toy_config(layer_modes=("moba", "moba"), block_size=32, top_k=8)
    full_cfg_b = default_toy_config(layer_modes=("full", "full"), block_size=32, top_k=8)
    sched_b = TrainSchedule(total_steps=50, context_length=128, switch_fraction=0.9, seed=seed)
    run_sat = train_run(corpus, sat_cfg, sched_b)
    run_full = train_run(corpus, full_cfg_b, sched_b)
    traj_gap = float(np.abs(run_sat.losses - run_full.losses).max())
    ok_b = traj_gap <= 1e-8
    details.append(f"(b) saturated-k vs all-full trajectory gap {traj_gap:.3e} (tol 1e-8)")

    sub_cfg = default_toy_config(layer_modes=("moba", "moba"), block_size=32, top_k=2)
    sched_c = TrainSchedule(total_steps=80, context_length=128, switch_fraction=0.7, seed=seed)
    run_c = train_run(corpus, sub_cfg, sched_c)  # raises if any loss is non-finite
    s = sched_c.switch_step
    pre = float(run_c.losses[s - 5:s].mean())
    post = float(run_c.losses[s:s + 5].mean())
    ok_c = bool(np.isfinite(run_c.losses).all()) and post <= 2.0 * pre
    details.append(f"(c) switch at step {s}: pre {pre:.3f}, post {post:.3f} (need post <= 2x pre)")

    return SuiteResult("hybrid-training", ok_a and ok_b and ok_c, "; ".join(details))


def metrics_consistency(seed: int = DEFAULT_SEED) -> SuiteResult:
    """Trailing loss equals the matching position bucket on random batches
    (tolerance 1e-12), and the min-length filter provably excludes short
    sequences (poisoned-short-sequence construction)."""
    rng = _rng(seed, 11)
    worst = 0.0
    for _ in range(50):
        bucket = int(rng.integers(1, 9))
        max_len = bucket * int(rng.integers(2, 9))
        count = int(rng.integers(2, 8))
        lengths = rng.integers(1, max_len + 1, size=count)
        lengths[int(rng.integers(0, count))] = max_len
        losses = [rng.random(int(n)) * 5.0 for n in lengths]
        trailing = trailing_lm_loss(losses, lengths.tolist(), max_len, bucket)
        buckets, _ = positionwise_lm_loss(losses, lengths.tolist(), bucket)
        match = [b for b in buckets if b.lo == max_len - bucket and b.hi == max_len]
        if not match:
            return SuiteResult("metrics-consistency", False,
                               "trailing bucket missing from position-wise output")
        worst = max(worst, abs(trailing - match[0].mean_loss))

    # Construction: a too-short sequence filled with huge values must not
    # touch the deep bucket at all.
    clean = np.linspace(1.0, 2.0, 8)
    poisoned = np.full(5, 1e9)
    buckets, _ = positionwise_lm_loss([clean, poisoned], [8, 5], 4)
    deep = [b for b in buckets if b.lo == 4][0]
    filter_ok = (
        deep.token_count == 4
        and abs(deep.mean_loss - float(clean[4:8].mean())) == 0.0
    )
    return SuiteResult(
        "metrics-consistency",
        worst <= 1e-12 and filter_ok,
        f"max |trailing - bucket| = {worst:.3e} over 50 batches (tol 1e-12); "
        f"poisoned short sequence excluded by construction: {filter_ok}",
    )


SUITES = {
    "saturation-equivalence": saturation_equivalence,
    "pipeline-oracle-equivalence": pipeline_oracle_equivalence,
    "online-softmax": online_softmax,
    "causality": causality,
    "gating-semantics": gating_semantics,
    "sparsity-arithmetic": sparsity_arithmetic,
    "gradient-checks": gradient_checks,
    "power-law-fit": power_law_fit,
    "flop-scaling": flop_scaling,
    "hybrid-training": hybrid_training,
    "metrics-consistency": metrics_consistency,
}


def run_suite(name: str, seed: int = DEFAULT_SEED) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name](seed)


def run_all(seed: int = DEFAULT_SEED) -> list[SuiteResult]:
    return [fn(seed) for fn in SUITES.values()]
