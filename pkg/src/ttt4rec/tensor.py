"""Dense float tensors with reverse-mode differentiation.

Every operation records its parents and a backward closure; ``backward``
replays that graph once in reverse topological order. Only first-order
gradients are supported.
"""
import contextlib
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import NumericalError, ShapeError

_check_finite = os.environ.get("TTT4REC_CHECK_FINITE", "1") != "0"
_grad_enabled = True

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_check_finite(flag):
    """Toggle the NaN/Inf check run after every forward op. Returns the old value."""
    global _check_finite
    old = _check_finite
    _check_finite = bool(flag)
    return old


@contextlib.contextmanager
def check_finite(flag=True):
    old = set_check_finite(flag)
    try:
        yield
    finally:
        set_check_finite(old)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside this block (evaluation, finite differences)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data, parents, backward, op):
    """Wrap ``data`` as the output of ``op``.

    ``backward(g)`` must return one gradient (or None) per parent, each with
    its parent's shape.
    """
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, tuple(parents), backward, op)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    return make_op(A * B, (a, b),
                   lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    out = A / B

    def backward(g):
        return _unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)

    return make_op(out, (a, b), backward, "div")


def neg(a):
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    A = a.data
    p = float(exponent)
    return make_op(A ** p, (a,), lambda g: (g * p * A ** (p - 1.0),), "pow")


def square(a):
    A = a.data
    return make_op(A * A, (a,), lambda g: (2.0 * g * A,), "square")


def exp(a):
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    A = a.data
    return make_op(np.log(A), (a,), lambda g: (g / A,), "log")


# reductions and shape manipulation

def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(count))


def reshape(a, shape):
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(a, ax1, ax2):
    return make_op(np.swapaxes(a.data, ax1, ax2), (a,),
                   lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def expand_dims(a, axis):
    return reshape(a, np.expand_dims(a.data, axis).shape)


def getitem(a, index):
    shape = a.shape
    if isinstance(index, np.ndarray) and index.dtype == bool:
        index = np.nonzero(index)

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_op(a.data[index], (a,), backward, "getitem")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


# linear algebra

def matmul(a, b):
    """``np.matmul`` semantics, including broadcast batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim == 0 or B.ndim == 0:
        raise ShapeError(f"matmul needs at least 1-d operands, got {A.shape} and {B.shape}")
    ka = A.shape[-1]
    kb = B.shape[0] if B.ndim == 1 else B.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul inner dimensions differ: {A.shape} @ {B.shape}")

    def backward(g):
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            ga = (B @ g[..., None])[..., 0]
            gb = A[:, None] * g[..., None, :]
        elif B.ndim == 1:
            ga = g[..., None] * B
            gb = (np.swapaxes(A, -1, -2) @ g[..., None])[..., 0]
        else:
            ga = g @ np.swapaxes(B, -1, -2)
            gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return make_op(A @ B, (a, b), backward, "matmul")


def outer(u, v):
    """Batched outer product ``u[..., :, None] * v[..., None, :]``."""
    return mul(expand_dims(u, -1), expand_dims(v, -2))


def linear(x, weight, bias=None):
    """Row-vector dense layer ``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    y = matmul(x, swapaxes(weight, 0, 1))
    return y if bias is None else add(y, bias)



def rowwise_linear(x, weight):
    """``x @ weight.T`` where each row's arithmetic does not depend on the batch shape.

    BLAS picks different kernels for one row and for many, which changes the
    last bits; einsum's own loop evaluates every row the same way.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    X, Wd = x.data, weight.data
    if Wd.ndim != 2 or X.shape[-1] != Wd.shape[1]:
        raise ShapeError(f"rowwise_linear shapes differ: {X.shape} vs weight {Wd.shape}")

    def backward(g):
        gw = g.reshape(-1, g.shape[-1]).T @ X.reshape(-1, X.shape[-1])
        return g @ Wd, gw

    return make_op(np.einsum("...d,hd->...h", X, Wd), (x, weight), backward, "rowwise_linear")

# activations

def _phi(x):
    return np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gelu_np(x):
    return x * ndtr(x)


def gelu_prime_np(x):
    return ndtr(x) + x * _phi(x)


def gelu_second_np(x):
    return _phi(x) * (2.0 - x * x)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    X = x.data
    return make_op(gelu_np(X), (x,), lambda g: (g * gelu_prime_np(X),), "gelu")


def gelu_prime(x):
    """Derivative of :func:`gelu` as a differentiable op (needed by the MLP inner update)."""
    X = x.data
    return make_op(gelu_prime_np(X), (x,), lambda g: (g * gelu_second_np(X),), "gelu_prime")


# normalisation and losses

def layer_norm(x, gain, bias, eps=1e-5):
    X = x.data
    D = X.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise ShapeError(f"layer_norm over last dim {D} got gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return make_op(xhat * G + bias.data, (x, gain, bias), backward, "layer_norm")


def log_softmax_np(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_np(logits):
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean over rows of ``-log softmax(logits)[target]``."""
    L = logits.data
    if L.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (rows, classes) logits, got {L.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    rows, classes = L.shape
    if t.shape[0] != rows:
        raise ShapeError(f"{t.shape[0]} targets for {rows} logit rows")
    if rows and (t.min() < 0 or t.max() >= classes):
        raise IndexError(f"target out of range [0, {classes})")
    logp = log_softmax_np(L)
    r = np.arange(rows)
    loss = -logp[r, t].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[r, t] -= 1.0
        return (grad * (g / rows),)

    return make_op(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


# sequence ops

def causal_depthwise_conv1d(x, kernel):
    """Per-channel causal convolution over axis -2.

    ``out[..., t, d] = sum_j kernel[j, d] * x[..., t - k + 1 + j, d]`` with
    out-of-range positions read as zero.
    """
    X, Kw = x.data, kernel.data
    if Kw.ndim != 2 or Kw.shape[1] != X.shape[-1]:
        raise ShapeError(f"conv kernel {Kw.shape} does not match {X.shape[-1]} channels")
    k = Kw.shape[0]
    n = X.shape[-2]
    pad = [(0, 0)] * X.ndim
    pad[-2] = (k - 1, 0)
    Xp = np.pad(X, pad)
    out = np.zeros_like(X)
    for j in range(k):
        out += Kw[j] * Xp[..., j:j + n, :]

    def backward(g):
        dXp = np.zeros_like(Xp)
        dK = np.empty_like(Kw)
        lead = tuple(range(g.ndim - 1))
        for j in range(k):
            dXp[..., j:j + n, :] += Kw[j] * g
            dK[j] = (g * Xp[..., j:j + n, :]).sum(axis=lead)
        return dXp[..., k - 1:, :], dK

    return make_op(out, (x, kernel), backward, "causal_conv1d")


def dropout(x, rate, rng=None, training=False):
    """Inverted dropout. Identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# reverse pass

@dataclass
class GradTape:
    """Nodes reachable from a loss, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, root):
        order, seen = [], set()
        stack_ = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
        return cls(order)


def backward(loss, params=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    If ``params`` is given, returns their gradients in order; leaves that the
    loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if loss.requires_grad:
        tape = GradTape.from_output(loss)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is not None:
        return [p.grad for p in params]
    return None


# verification

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    per_input: list

    @property
    def passed(self):
        return bool(self.max_rel_error <= self.tol)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.0e})"


def relative_error(analytic, numeric):
    """``max|a - n| / (max|n| + 1e-8)``: error scaled by the gradient's magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / (np.max(np.abs(numeric)) + 1e-8))


def numeric_gradient(f, inputs, h=1e-5):
    grads = []
    with no_grad():
        for t in inputs:
            g = np.zeros_like(t.data, dtype=np.float64)
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            grads.append(g)
    return grads


def finite_diff_check(f, inputs, tol=1e-4, h=1e-5, name="f", corrupt=None):
    """Compare reverse-mode gradients of the scalar ``f()`` against central differences.

    ``f`` takes no arguments and reads ``inputs`` (leaf tensors) by closure;
    their data is perturbed in place. ``corrupt`` optionally maps the analytic
    gradients before comparison (used to prove the harness can fail).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        out = f()
        analytic = backward(out, inputs)
        analytic = [np.array(g, dtype=np.float64) for g in analytic]
        if corrupt is not None:
            analytic = corrupt(analytic)
        numeric = numeric_gradient(f, inputs, h)
    finally:
        for t, (rg, gr) in zip(inputs, saved):
            t.requires_grad = rg
            t.grad = gr
    errors = [relative_error(a, n) for a, n in zip(analytic, numeric)]
    return GradCheckReport(name, max(errors) if errors else 0.0, tol, errors)
