"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately minimal: only the operations the noise predictor and the
verifier networks need, each with a hand-written backward rule. Calling
``backward()`` on a scalar result accumulates gradients into the ``grad``
field of every reachable tensor that has ``requires_grad`` set, including
plain inputs (needed for guidance gradients, not just parameter updates).
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class GraphError(RuntimeError):
    """Backward was requested without a forward pass to differentiate."""


class no_grad:
    """Disable graph construction inside the block (sampling / scoring)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class enable_grad:
    """Re-enable graph construction, e.g. for input gradients inside no_grad."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = True
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar result down to all leaves."""
        if self._backward is None:
            raise GraphError(
                "backward() called on a tensor that is not the result of a "
                "forward pass"
            )
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not (_GRAD_ENABLED and any(p.requires_grad for p in parents)):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = parents
    out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- arithmetic --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _coerce(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate(-g)

    return _node(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0.0

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    old = a.data.shape

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(old))

    return _node(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward)


def sum_all(a) -> Tensor:
    a = _coerce(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.full(a.data.shape, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), backward)


def mean_all(a) -> Tensor:
    a = _coerce(a)
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.full(a.data.shape, float(g) / n))

    return _node(np.asarray(a.data.mean()), (a,), backward)


# -- fused numerically-sensitive ops -----------------------------------


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(a) -> Tensor:
    """Elementwise log(sigmoid(x)) in the stable min(x,0) - log1p(exp(-|x|)) form."""
    a = _coerce(a)
    data = np.minimum(a.data, 0.0) - np.log1p(np.exp(-np.abs(a.data)))
    sig = sigmoid_np(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * (1.0 - sig))

    return _node(data, (a,), backward)


def bce_with_logits(logits, targets, pos_weight: float | None = None) -> Tensor:
    """Mean binary cross-entropy on raw logits, log-sum-exp stabilized.

    Per element: max(x,0) - x*y + log1p(exp(-|x|)). Optional pos_weight
    multiplies the terms whose target is 1.
    """
    a = _coerce(logits)
    y = np.asarray(targets, dtype=np.float64)
    if a.data.shape != y.shape:
        raise ValueError(f"logits shape {a.data.shape} != labels shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be binary")
    x = a.data
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    w = np.where(y == 1.0, pos_weight, 1.0) if pos_weight is not None else 1.0
    loss = loss * w
    n = loss.size

    def backward(g):
        if a.requires_grad:
            a.accumulate(float(g) * w * (sigmoid_np(x) - y) / n)

    return _node(np.asarray(loss.mean()), (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine.

    The variance is floored at eps, so a constant row normalizes to zeros
    instead of dividing by zero.
    """
    a, gm, bt = _coerce(x), _coerce(gamma), _coerce(beta)
    if a.data.ndim != 2:
        raise ValueError(f"layer_norm expects a 2-D input, got {a.data.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    denom = np.sqrt(np.maximum(var, eps))
    xh = xc / denom
    floored = var <= eps

    def backward(g):
        if gm.requires_grad:
            gm.accumulate((g * xh).sum(axis=0))
        if bt.requires_grad:
            bt.accumulate(g.sum(axis=0))
        if a.requires_grad:
            dxh = g * gm.data
            m1 = dxh.mean(axis=-1, keepdims=True)
            m2 = (dxh * xh).mean(axis=-1, keepdims=True)
            # Below the floor the denominator is a constant, so the
            # variance term of the usual layer-norm gradient drops out.
            dx = (dxh - m1 - np.where(floored, 0.0, xh * m2)) / denom
            a.accumulate(dx)

    return _node(xh * gm.data + bt.data, (a, gm, bt), backward)


def contrastive_hinge(z_pos, z_neg, margin: float) -> Tensor:
    """Mean squared hinge on pairwise embedding distance.

    Per pair: max(0, margin - ||z+ - z-||_2)^2. The distance gradient at
    exactly zero separation is taken as zero.
    """
    zp, zn = _coerce(z_pos), _coerce(z_neg)
    if zp.data.shape != zn.data.shape:
        raise ValueError(
            f"embedding batches must match, got {zp.data.shape} vs {zn.data.shape}"
        )
    diff = zp.data - zn.data
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    hinge = np.maximum(margin - dist, 0.0)
    n = hinge.size

    def backward(g):
        coef = np.zeros_like(dist)
        active = (hinge > 0.0) & (dist > 0.0)
        coef[active] = -2.0 * hinge[active] / dist[active]
        dz = (float(g) / n) * coef[..., None] * diff
        if zp.requires_grad:
            zp.accumulate(dz)
        if zn.requires_grad:
            zn.accumulate(-dz)

    return _node(np.asarray(np.mean(hinge * hinge)), (zp, zn), backward)
