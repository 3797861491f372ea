"""Minimal tape-based reverse-mode autodiff.

Just enough machinery to train the toy decoder: a Node records its float64
value, its parents, and a closure that maps the incoming gradient to parent
gradients. ``backward`` does one iterative topological sweep from a scalar
root; no graphs-of-graphs, no higher-order derivatives.

Fused ops (masked_attention, layer_norm, cross_entropy) carry hand-derived
backward rules; the same computations can be built from primitives
(softmax_rows, matmul, ...) and both routes are checked against each other
and against central finite differences in the tests.

Routing is control flow, not math: block-selection masks enter
masked_attention as constant boolean arrays and receive no gradient. Entries
masked to -inf have softmax probability exactly 0.0, so keys outside every
contributing query's selection get exactly-zero gradients, not just small
ones.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.special import erf

from .errors import (
    ContractError,
    DegenerateBatchError,
    DegenerateRowError,
    OracleError,
    ParameterError,
    ShapeMismatchError,
)
from .tensor import Tensor


class Node:
    """One tape entry: an operation's float64 output plus what backward needs."""

    __slots__ = ("value", "parents", "op", "_rule", "grad")

    def __init__(self, value, parents=(), op="leaf", rule=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        self._rule = rule  # grad_out -> tuple of parent grads (None allowed)
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def leaf(value) -> Node:
    """Wrap an array as a differentiable input."""
    return Node(value)


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # dependencies first, root last


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Reverse sweep from a scalar root.

    Fills ``.grad`` on every node reached and returns {leaf: gradient} for
    the leaves of the graph. Raises ContractError for non-scalar roots.
    """
    if root.value.size != 1:
        raise ContractError(
            f"backward needs a scalar root, got shape {root.value.shape}"
        )
    order = _topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or node._rule is None:
            continue
        parent_grads = node._rule(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    return {n: n.grad for n in order if not n.parents}


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    g = grad
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Node, b: Node) -> Node:
    value = a.value + b.value
    return Node(value, (a, b), "add", lambda g: (
        _unbroadcast(g, a.value.shape),
        _unbroadcast(g, b.value.shape),
    ))


def sub(a: Node, b: Node) -> Node:
    value = a.value - b.value
    return Node(value, (a, b), "sub", lambda g: (
        _unbroadcast(g, a.value.shape),
        _unbroadcast(-g, b.value.shape),
    ))


def mul(a: Node, b: Node) -> Node:
    value = a.value * b.value
    return Node(value, (a, b), "mul", lambda g: (
        _unbroadcast(g * b.value, a.value.shape),
        _unbroadcast(g * a.value, b.value.shape),
    ))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, (a,), "scale", lambda g: (g * c,))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeMismatchError(
            f"matmul needs 2-D operands, got {a.value.shape} and {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError(
            f"inner dimensions disagree: {a.value.shape} @ {b.value.shape}"
        )
    value = a.value @ b.value
    return Node(value, (a, b), "matmul", lambda g: (
        g @ b.value.T,
        a.value.T @ g,
    ))


def sum_all(a: Node) -> Node:
    value = np.asarray(a.value.sum())
    return Node(value, (a,), "sum_all", lambda g: (np.ones_like(a.value) * g,))


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)
    return Node(a.value.reshape(shape), (a,), "reshape",
                lambda g: (g.reshape(a.value.shape),))


def transpose(a: Node, axes) -> Node:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Node(a.value.transpose(axes), (a,), "transpose",
                lambda g: (g.transpose(inverse),))


def gelu(a: Node) -> Node:
    """Exact (erf-based) GELU."""
    x = a.value
    inner = erf(x / math.sqrt(2.0))
    value = 0.5 * x * (1.0 + inner)

    def rule(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (0.5 * (1.0 + inner) + x * pdf),)

    return Node(value, (a,), "gelu", rule)


def embedding(table: Node, ids) -> Node:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=-1) >= table.value.shape[0]:
        raise ParameterError(
            f"ids outside [0, {table.value.shape[0]}) for embedding lookup"
        )

    def rule(g):
        dt = np.zeros_like(table.value)
        np.add.at(dt, ids, g)
        return (dt,)

    return Node(table.value[ids], (table,), "embedding", rule)


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    value = xhat * gain.value + bias.value

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.value
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dgain, dbias)

    return Node(value, (x, gain, bias), "layer_norm", rule)


def softmax_rows(x: Node, mask: np.ndarray | None = None) -> Node:
    """Softmax along the last axis, optional constant additive mask of 0/-inf."""
    z = x.value if mask is None else x.value + mask
    m = z.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateRowError("softmax rows fully masked")
    p = np.exp(z - m)
    p = p / p.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Node(p, (x,), "softmax_rows", rule)


def masked_attention(q: Node, k: Node, v: Node, allowed: np.ndarray, scale_factor: float) -> Node:
    """Fused attention over head-major tensors [h, N, d] with a boolean key
    mask ``allowed`` ([h, N, N] or [N, N], broadcast over heads).

    The mask is a constant: no gradient flows into whatever produced it.
    Disallowed entries have probability exactly 0.0, so their keys and values
    receive exactly-zero gradient contributions from this op.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.value.ndim != 3:
            raise ShapeMismatchError(f"{name} must be [heads, N, dim], got {t.value.shape}")
    if q.value.shape != k.value.shape or q.value.shape != v.value.shape:
        raise ShapeMismatchError(
            f"q/k/v must share shape, got {q.value.shape}, {k.value.shape}, {v.value.shape}"
        )
    f = float(scale_factor)
    logits = f * (q.value @ k.value.transpose(0, 2, 1))
    z = np.where(allowed, logits, -np.inf)
    m = z.max(axis=-1)
    if np.isneginf(m).any():
        raise DegenerateRowError("a query has every key masked out")
    p = np.exp(z - m[..., None])
    p = p / p.sum(axis=-1, keepdims=True)
    out = p @ v.value

    def rule(g):
        dv = p.transpose(0, 2, 1) @ g
        dp = g @ v.value.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = f * (ds @ k.value)
        dk = f * (ds.transpose(0, 2, 1) @ q.value)
        return (dq, dk, dv)

    return Node(out, (q, k, v), "masked_attention", rule)


def cross_entropy(logits: Node, targets, mask=None) -> Node:
    """Mean token cross-entropy over unmasked positions; scalar output."""
    z = logits.value
    if z.ndim != 2:
        raise ShapeMismatchError(f"logits must be [N, vocab], got {z.shape}")
    targets = np.asarray(targets)
    if targets.shape != (z.shape[0],):
        raise ShapeMismatchError(
            f"targets must be [{z.shape[0]}], got {targets.shape}"
        )
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= z.shape[1]:
        raise ParameterError("target ids outside the vocabulary")
    msk = np.ones(z.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if msk.shape != (z.shape[0],):
        raise ShapeMismatchError(f"mask must be [{z.shape[0]}], got {msk.shape}")
    count = int(msk.sum())
    if count == 0:
        raise DegenerateBatchError("every target position is masked out")
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    per_token = lse - z[np.arange(z.shape[0]), targets]
    value = np.asarray((per_token * msk).sum() / count)

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(z.shape[0]), targets] -= 1.0
        return (p * (msk / count)[:, None] * g[()],)

    return Node(value, (logits,), "cross_entropy", rule)


def finite_difference_gradient(
    f: Callable[[Tensor], float],
    x: Tensor,
    eps: float = 1e-5,
) -> Tensor:
    """Central finite differences of a scalar function, coordinate by
    coordinate. The independent oracle for every analytic backward rule."""
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    base = x.array.astype(np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * eps
            val = float(f(Tensor(probe.reshape(base.shape))))
            if math.isnan(val) or math.isinf(val):
                raise OracleError(
                    f"function returned a non-finite value at coordinate {i}"
                )
            gflat[i] += sign * val
        gflat[i] /= 2.0 * eps
    return Tensor._wrap(grad)
