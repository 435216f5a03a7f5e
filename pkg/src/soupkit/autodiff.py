"""Small reverse-mode differentiation engine over float64 numpy arrays.

Every primitive accepts either a `Node` or a plain ndarray for each operand.
When no operand is a `Node` the primitive returns a plain ndarray, so the same
network code runs in inference mode (no graph, no overhead beyond numpy) and in
training mode (wrap the parameters in `leaf`), producing bitwise-identical
values in both modes because the value computation is shared.

Gradients are vector-Jacobian products accumulated by `backward` in reverse
topological order. Broadcasting in `add`/`mul` is undone by summing the
gradient over the broadcast axes, so parameters of any shape can enter
elementwise ops directly.
"""

from __future__ import annotations

import numpy as np


class Node:
    """A value in the computation graph plus the recipe for its local gradients.

    `parents` holds (parent, vjp) pairs, where vjp maps the gradient of the
    output to the gradient contribution of that parent.
    """

    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = value
        self.parents = parents
        self.grad = None


def leaf(value: np.ndarray) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def val(x):
    """Underlying ndarray of a Node, or the argument itself."""
    return x.value if isinstance(x, Node) else x


def _tracing(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(root: Node) -> None:
    """Accumulate gradients of `root` (a scalar) into every reachable Node's .grad."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            g = vjp(node.grad)
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    av, bv = val(a), val(b)
    out = av + bv
    if not _tracing(a, b):
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: _unbroadcast(g, av.shape)))
    if isinstance(b, Node):
        parents.append((b, lambda g: _unbroadcast(g, np.shape(bv))))
    return Node(out, tuple(parents))


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    if not _tracing(a, b):
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: _unbroadcast(g * bv, np.shape(av))))
    if isinstance(b, Node):
        parents.append((b, lambda g: _unbroadcast(g * av, np.shape(bv))))
    return Node(out, tuple(parents))


def matmul(a, b):
    av, bv = val(a), val(b)
    out = av @ bv
    if not _tracing(a, b):
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)))
    if isinstance(b, Node):
        parents.append((b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))
    return Node(out, tuple(parents))


def take_rows(table, ids):
    """Row gather `table[ids]`; the embedding lookup. `ids` is an int array."""
    ids = np.asarray(ids)
    tv = val(table)
    out = tv[ids]
    if not _tracing(table):
        return out

    def vjp(g):
        acc = np.zeros_like(tv)
        np.add.at(acc, ids, g)
        return acc

    return Node(out, ((table, vjp),))


def mean_last(x):
    """Mean over the final axis, keepdims."""
    xv = val(x)
    out = xv.mean(axis=-1, keepdims=True)
    if not _tracing(x):
        return out
    n = xv.shape[-1]

    def vjp(g):
        return np.broadcast_to(g / n, xv.shape)

    return Node(out, ((x, vjp),))


def rsqrt(x):
    xv = val(x)
    out = 1.0 / np.sqrt(xv)
    if not _tracing(x):
        return out

    def vjp(g):
        return g * (-0.5) * out * out * out

    return Node(out, ((x, vjp),))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    """x * sigmoid(x), the gate nonlinearity."""
    xv = val(x)
    sig = stable_sigmoid(xv)
    out = xv * sig
    if not _tracing(x):
        return out

    def vjp(g):
        return g * (sig + xv * sig * (1.0 - sig))

    return Node(out, ((x, vjp),))


def softmax_last(x):
    """Softmax over the final axis with max subtraction."""
    xv = val(x)
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if not _tracing(x):
        return out

    def vjp(g):
        return (g - (g * out).sum(axis=-1, keepdims=True)) * out

    return Node(out, ((x, vjp),))


def reshape(x, shape):
    xv = val(x)
    out = xv.reshape(shape)
    if not _tracing(x):
        return out
    return Node(out, ((x, lambda g: g.reshape(xv.shape)),))


def swapaxes(x, axis1, axis2):
    xv = val(x)
    out = np.swapaxes(xv, axis1, axis2)
    if not _tracing(x):
        return out
    return Node(out, ((x, lambda g: np.swapaxes(g, axis1, axis2)),))


def masked_mean_cross_entropy_value(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean token-level cross entropy of `logits` against `targets` where `mask` holds."""
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)
    per_pos = (lse - picked)[..., 0]
    n = int(mask.sum())
    return float((per_pos * mask).sum() / n)


def masked_mean_cross_entropy(logits, targets, mask):
    """Traced form of the loss above; `targets` and `mask` are plain arrays."""
    lv = val(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=np.float64)
    out = np.float64(masked_mean_cross_entropy_value(lv, targets, mask))
    if not _tracing(logits):
        return out
    n = mask.sum()

    def vjp(g):
        m = lv.max(axis=-1, keepdims=True)
        e = np.exp(lv - m)
        probs = e / e.sum(axis=-1, keepdims=True)
        d = probs.copy()
        np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
        return d * (mask[..., None] * (g / n))

    return Node(out, ((logits, vjp),))
