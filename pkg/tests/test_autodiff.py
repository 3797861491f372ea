"""Reverse-mode tape tests: every analytic backward rule against central
finite differences, the fused attention op against a primitive-composed
route, and the exactly-zero-gradient guarantee for unrouted keys."""

import math

import numpy as np
import pytest

from moba import autodiff as ad
from moba.errors import (
    ContractError,
    DegenerateBatchError,
    DegenerateRowError,
    OracleError,
    ParameterError,
    ShapeMismatchError,
)
from moba.gating import build_routing_table, make_partition
from moba.tensor import Tensor


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(analytic - numeric).max()) / denom


def _fd(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    return ad.finite_difference_gradient(lambda t: f(t.array), Tensor(x), eps).array


# --- primitives -------------------------------------------------------------

def test_square_sum_gradient_is_two_x():
    x = ad.leaf(np.asarray([3.0]))
    loss = ad.sum_all(ad.mul(x, x))
    grads = ad.backward(loss)
    assert grads[x].tolist() == [6.0]
    fd = _fd(lambda a: float((a * a).sum()), np.asarray([3.0]))
    assert abs(fd[0] - 6.0) <= 1e-9


def test_linear_gradient_is_the_coefficient_vector():
    c = _rng(1).normal(size=5)
    fd = _fd(lambda x: float(np.dot(c, x)), np.zeros(5))
    assert np.abs(fd - c).max() <= 1e-10


def test_matmul_gradient_pattern_and_fd():
    rng = _rng(2)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    an, bn = ad.leaf(a), ad.leaf(b)
    loss = ad.sum_all(ad.matmul(an, bn))
    ad.backward(loss)
    assert np.abs(an.grad - np.ones((3, 2)) @ b.T).max() <= 1e-12
    assert np.abs(bn.grad - a.T @ np.ones((3, 2))).max() <= 1e-12
    fd_a = _fd(lambda x: float((x @ b).sum()), a)
    fd_b = _fd(lambda x: float((a @ x).sum()), b)
    assert _rel_err(an.grad, fd_a) <= 1e-6
    assert _rel_err(bn.grad, fd_b) <= 1e-6


def test_matmul_shape_guards():
    with pytest.raises(ShapeMismatchError):
        ad.matmul(ad.leaf(np.ones((2, 3))), ad.leaf(np.ones((2, 3))))
    with pytest.raises(ShapeMismatchError):
        ad.matmul(ad.leaf(np.ones(3)), ad.leaf(np.ones((3, 2))))


def test_add_sub_mul_broadcast_gradients():
    rng = _rng(3)
    a = ad.leaf(rng.normal(size=(3, 4)))
    b = ad.leaf(rng.normal(size=4))  # broadcast over rows
    loss = ad.sum_all(ad.mul(ad.add(a, b), ad.sub(a, b)))  # sum(a^2 - b^2)
    ad.backward(loss)
    assert np.abs(a.grad - 2 * a.value).max() <= 1e-12
    assert np.abs(b.grad - (-2 * 3 * b.value)).max() <= 1e-12


def test_reshape_transpose_round_trip_gradient():
    rng = _rng(4)
    x = ad.leaf(rng.normal(size=(2, 3, 4)))
    y = ad.transpose(ad.reshape(x, (6, 4)), (1, 0))
    loss = ad.sum_all(ad.mul(y, y))
    ad.backward(loss)
    assert np.abs(x.grad - 2 * x.value).max() <= 1e-12


def test_diamond_graph_accumulates_both_paths():
    x = ad.leaf(np.asarray([2.0, -1.0]))
    y = ad.add(x, x)
    loss = ad.sum_all(ad.mul(y, y))  # sum((2x)^2) -> d/dx = 8x
    ad.backward(loss)
    assert np.abs(x.grad - 8 * x.value).max() <= 1e-12


def test_gelu_gradient_matches_fd():
    x = _rng(5).normal(size=(4, 3))
    xn = ad.leaf(x)
    ad.backward(ad.sum_all(ad.gelu(xn)))
    fd = _fd(lambda a: float((0.5 * a * (1.0 + _erf(a))).sum()), x)
    assert _rel_err(xn.grad, fd) <= 1e-6


def _erf(x):
    from scipy.special import erf
    return erf(x / math.sqrt(2.0))


def test_layer_norm_gradients_match_fd():
    rng = _rng(6)
    x = rng.normal(size=(5, 4))
    gain = rng.normal(size=4)
    bias = rng.normal(size=4)
    weight = rng.normal(size=(5, 4))  # non-uniform readout exercises all terms
    xn, gn, bn = ad.leaf(x), ad.leaf(gain), ad.leaf(bias)
    loss = ad.sum_all(ad.mul(ad.layer_norm(xn, gn, bn), ad.leaf(weight)))
    ad.backward(loss)

    def ln_loss(xv, gv, bv):
        mu = xv.mean(axis=-1, keepdims=True)
        xc = xv - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return float((((xc / np.sqrt(var + 1e-5)) * gv + bv) * weight).sum())

    assert _rel_err(xn.grad, _fd(lambda a: ln_loss(a, gain, bias), x)) <= 1e-4
    assert _rel_err(gn.grad, _fd(lambda a: ln_loss(x, a, bias), gain)) <= 1e-5
    assert _rel_err(bn.grad, _fd(lambda a: ln_loss(x, gain, a), bias)) <= 1e-5


def test_softmax_rows_gradient_matches_fd():
    rng = _rng(7)
    x = rng.normal(size=(3, 5))
    weight = rng.normal(size=(3, 5))
    xn = ad.leaf(x)
    ad.backward(ad.sum_all(ad.mul(ad.softmax_rows(xn), ad.leaf(weight))))

    def f(a):
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        return float(((e / e.sum(axis=-1, keepdims=True)) * weight).sum())

    assert _rel_err(xn.grad, _fd(f, x)) <= 1e-5


def test_softmax_rows_fully_masked_raises():
    mask = np.zeros((2, 3))
    mask[0] = -np.inf
    with pytest.raises(DegenerateRowError):
        ad.softmax_rows(ad.leaf(np.ones((2, 3))), mask)


def test_embedding_gradient_scatter_adds_duplicates():
    rng = _rng(8)
    table = ad.leaf(rng.normal(size=(6, 4)))
    weight = rng.normal(size=(3, 4))
    ids = np.asarray([0, 5, 0])
    ad.backward(ad.sum_all(ad.mul(ad.embedding(table, ids), ad.leaf(weight))))
    want = np.zeros((6, 4))
    want[0] = weight[0] + weight[2]
    want[5] = weight[1]
    assert np.abs(table.grad - want).max() <= 1e-12
    with pytest.raises(ParameterError):
        ad.embedding(table, np.asarray([6]))
    with pytest.raises(ParameterError):
        ad.embedding(table, np.asarray([-1]))


def test_cross_entropy_value_and_gradient():
    rng = _rng(9)
    z = rng.normal(size=(6, 5))
    targets = rng.integers(0, 5, size=6)
    mask = np.asarray([True, True, False, True, True, False])
    zn = ad.leaf(z)
    loss = ad.cross_entropy(zn, targets, mask)
    # Value against an explicit log-sum-exp oracle.
    per = []
    for i in range(6):
        m = z[i].max()
        per.append(m + math.log(np.exp(z[i] - m).sum()) - z[i, targets[i]])
    want = sum(p for p, keep in zip(per, mask) if keep) / mask.sum()
    assert abs(float(loss.value) - want) <= 1e-12
    ad.backward(loss)

    def f(a):
        out = 0.0
        for i in range(6):
            if not mask[i]:
                continue
            m = a[i].max()
            out += m + math.log(np.exp(a[i] - m).sum()) - a[i, targets[i]]
        return out / mask.sum()

    assert _rel_err(zn.grad, _fd(f, z)) <= 1e-6


def test_cross_entropy_error_paths():
    z = ad.leaf(np.zeros((3, 4)))
    with pytest.raises(DegenerateBatchError):
        ad.cross_entropy(z, np.zeros(3, dtype=int), np.zeros(3, dtype=bool))
    with pytest.raises(ParameterError):
        ad.cross_entropy(z, np.asarray([0, 1, 4]))
    with pytest.raises(ShapeMismatchError):
        ad.cross_entropy(z, np.zeros(2, dtype=int))
    with pytest.raises(ShapeMismatchError):
        ad.cross_entropy(ad.leaf(np.zeros(4)), np.zeros(1, dtype=int))


def test_backward_requires_scalar_root():
    with pytest.raises(ContractError):
        ad.backward(ad.leaf(np.asarray([1.0, 2.0])))


def test_fd_oracle_guards():
    with pytest.raises(ParameterError):
        ad.finite_difference_gradient(lambda t: 0.0, Tensor([1.0]), eps=0.0)
    with pytest.raises(OracleError):
        ad.finite_difference_gradient(lambda t: float("nan"), Tensor([1.0]))


# --- fused attention --------------------------------------------------------

def _causal(n):
    return np.tril(np.ones((n, n), dtype=bool))


def test_fused_attention_matches_primitive_composition():
    """Same math, two code paths: the fused op's hand-derived backward vs the
    chain rule through matmul/softmax_rows/transpose."""
    rng = _rng(10)
    N, d = 7, 3
    q, k, v = (rng.normal(size=(1, N, d)) for _ in range(3))
    f = 1.0 / math.sqrt(d)
    allowed = _causal(N)
    add_mask = np.where(allowed, 0.0, -np.inf)

    qf, kf, vf = ad.leaf(q), ad.leaf(k), ad.leaf(v)
    fused = ad.sum_all(ad.masked_attention(qf, kf, vf, allowed, f))
    ad.backward(fused)

    qc, kc, vc = ad.leaf(q[0]), ad.leaf(k[0]), ad.leaf(v[0])
    logits = ad.scale(ad.matmul(qc, ad.transpose(kc, (1, 0))), f)
    probs = ad.softmax_rows(logits, add_mask)
    composed = ad.sum_all(ad.matmul(probs, vc))
    ad.backward(composed)

    assert abs(float(fused.value) - float(composed.value)) <= 1e-10
    for fused_leaf, composed_leaf in ((qf, qc), (kf, kc), (vf, vc)):
        assert np.abs(fused_leaf.grad[0] - composed_leaf.grad).max() <= 1e-8


def test_fused_attention_gradients_match_fd():
    rng = _rng(11)
    N, h, d = 6, 1, 3
    q, k, v = (0.5 * rng.normal(size=(h, N, d)) for _ in range(3))
    f = 1.0 / math.sqrt(d)
    allowed = _causal(N)

    def run(qa, ka, va):
        qn, kn, vn = ad.leaf(qa), ad.leaf(ka), ad.leaf(va)
        loss = ad.sum_all(ad.masked_attention(qn, kn, vn, allowed, f))
        return loss, qn, kn, vn

    loss, qn, kn, vn = run(q, k, v)
    ad.backward(loss)
    for name, node, base in (("q", qn, q), ("k", kn, k), ("v", vn, v)):
        def fd_loss(a, _name=name):
            args = {"q": q, "k": k, "v": v}
            args[_name] = a
            return float(run(args["q"], args["k"], args["v"])[0].value)

        assert _rel_err(node.grad, _fd(fd_loss, base)) <= 1e-4, name


def test_fused_attention_shape_and_mask_guards():
    q = ad.leaf(np.zeros((1, 3, 2)))
    with pytest.raises(ShapeMismatchError):
        ad.masked_attention(q, ad.leaf(np.zeros((1, 4, 2))), q, _causal(3), 1.0)
    with pytest.raises(ShapeMismatchError):
        ad.masked_attention(ad.leaf(np.zeros((3, 2))), q, q, _causal(3), 1.0)
    dead = _causal(3)
    dead[1, :] = False  # query 2 has no admissible key
    with pytest.raises(DegenerateRowError):
        ad.masked_attention(q, q, q, dead, 1.0)


def test_unrouted_blocks_get_exactly_zero_gradients():
    # k=1 forces each query onto its current block only; a loss touching only
    # the final query must leave block-1 keys/values with all-zero gradients.
    rng = _rng(12)
    N, h, d, B = 4, 1, 3, 2
    part = make_partition(N, B)
    q0 = rng.normal(size=(N, h, d))
    k0 = rng.normal(size=(N, h, d))
    v0 = rng.normal(size=(N, h, d))
    routing = build_routing_table(Tensor(q0), Tensor(k0), part, k=1)
    assert routing.selected(N, 0) == (2,)
    key_block = np.arange(N) // B
    allowed = (routing.gates[:, :, key_block] & _causal(N)[:, None, :]).transpose(1, 0, 2)
    qn = ad.leaf(q0.transpose(1, 0, 2))
    kn = ad.leaf(k0.transpose(1, 0, 2))
    vn = ad.leaf(v0.transpose(1, 0, 2))
    att = ad.masked_attention(qn, kn, vn, allowed, 1.0 / math.sqrt(d))
    selector = np.zeros((h, N, d))
    selector[:, N - 1, :] = 1.0
    ad.backward(ad.sum_all(ad.mul(att, ad.leaf(selector))))
    sl = part.rows(1)
    assert (kn.grad[0, sl] == 0.0).all()
    assert (vn.grad[0, sl] == 0.0).all()
    assert np.abs(kn.grad).max() > 0  # the selected block does receive gradient


def test_routed_fused_attention_fd_on_a_stable_instance():
    # Routing is control flow: with the mask frozen, analytic gradients of the
    # routed op must match finite differences like any other op.
    rng = _rng(13)
    N, h, d, B, k_sel = 8, 2, 3, 2, 2
    part = make_partition(N, B)
    q0 = 0.5 * rng.normal(size=(N, h, d))
    k0 = 0.5 * rng.normal(size=(N, h, d))
    v0 = 0.5 * rng.normal(size=(N, h, d))
    routing = build_routing_table(Tensor(q0), Tensor(k0), part, k_sel)
    key_block = np.arange(N) // B
    allowed = (routing.gates[:, :, key_block] & _causal(N)[:, None, :]).transpose(1, 0, 2)
    f = 1.0 / math.sqrt(d)

    def run(qa, ka, va):
        qn, kn, vn = ad.leaf(qa.transpose(1, 0, 2)), ad.leaf(ka.transpose(1, 0, 2)), \
            ad.leaf(va.transpose(1, 0, 2))
        return ad.sum_all(ad.masked_attention(qn, kn, vn, allowed, f)), qn, kn, vn

    loss, qn, kn, vn = run(q0, k0, v0)
    ad.backward(loss)
    for name, node, base in (("q", qn, q0), ("k", kn, k0), ("v", vn, v0)):
        def fd_loss(a, _name=name):
            args = {"q": q0, "k": k0, "v": v0}
            args[_name] = a
            return float(run(args["q"], args["k"], args["v"])[0].value)

        fd = _fd(fd_loss, base)
        assert _rel_err(node.grad.transpose(1, 0, 2), fd) <= 1e-4, name
