"""Test-time-training layer.

The hidden state is a small model ``f(.; W)`` (linear map or two-layer GELU
MLP) that takes one gradient step on ``|f(k_t; W) - v_t|^2`` per token.
Inner updates are written in closed form with ordinary differentiable ops,
so outer-loop gradients flow through them with first-order autodiff only.

Two interchangeable scan routes exist:

* ``"graph"`` builds the recursion out of tensor ops (reference route);
* ``"fused"`` runs it as a single tape node backed by :mod:`ttt4rec.kernels`.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from . import tensor as T
from .errors import DivergenceError, NumericalError, ShapeError
from .module import Module, normal_init, parameter

INNER_KINDS = ("linear", "mlp")


@dataclass(frozen=True)
class InnerLoopConfig:
    eta_inner: float = 0.1
    adapt_at_eval: bool = True

    def __post_init__(self):
        if self.eta_inner < 0:
            raise ValueError("eta_inner must be non-negative")


@dataclass
class TTTState:
    """Inner-model weights: ``(W,)`` for linear, ``(W1, W2)`` for mlp.

    Weights may carry leading batch dimensions once the state has been
    updated on a batch of sequences.
    """

    kind: str
    weights: tuple

    def __post_init__(self):
        if self.kind not in INNER_KINDS:
            raise ValueError(f"unknown inner model {self.kind!r}")

    def numpy(self):
        return tuple(w.data for w in self.weights)


class InnerModel(Module):
    """Learnable initial state ``W_0``."""

    def __init__(self, kind, dim, hidden=256, rng=None):
        if kind not in INNER_KINDS:
            raise ValueError(f"unknown inner model {kind!r}")
        self.kind = kind
        if kind == "linear":
            self.W = parameter(np.zeros((dim, dim)))
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.W1 = normal_init(rng, (hidden, dim))
            self.W2 = normal_init(rng, (dim, hidden))

    def initial_state(self):
        if self.kind == "linear":
            return TTTState("linear", (self.W,))
        return TTTState("mlp", (self.W1, self.W2))


class ViewProjections(Module):
    """Training/label/test view projections ``theta_K, theta_V, theta_Q`` (each D x D)."""

    def __init__(self, dim, rng):
        self.theta_K = normal_init(rng, (dim, dim))
        self.theta_V = normal_init(rng, (dim, dim))
        self.theta_Q = normal_init(rng, (dim, dim))


def project_views(x, proj):
    """``k = theta_K x``, ``v = theta_V x``, ``q = theta_Q x`` applied to rows of ``x``."""
    return (T.linear(x, proj.theta_K), T.linear(x, proj.theta_V), T.linear(x, proj.theta_Q))


def _mv(M, x):
    y = T.matmul(M, T.expand_dims(x, -1))
    return T.reshape(y, y.shape[:-1])


def _mtv(M, x):
    y = T.matmul(T.expand_dims(x, -2), M)
    return T.reshape(y, y.shape[:-2] + y.shape[-1:])


def inner_forward(x, state):
    """``f(x; W)``: ``W x`` or ``W2 gelu(W1 x)`` for rows of ``x``.

    Unbatched weights broadcast over any leading shape of ``x``, and each
    row's result is bitwise the same as evaluating that row alone.
    """
    if state.kind == "linear":
        (W,) = state.weights
        if W.ndim == 2:
            return T.rowwise_linear(x, W)
        return _mv(W, x)
    W1, W2 = state.weights
    if W1.ndim == 2:
        return T.rowwise_linear(T.gelu(T.rowwise_linear(x, W1)), W2)
    return _mv(W2, T.gelu(_mv(W1, x)))


def inner_loss_rows(k, v, state):
    r = T.sub(inner_forward(k, state), v)
    return T.sum_(T.square(r), axis=-1)


def inner_loss(k, v, state):
    """``|f(k; W) - v|^2`` summed over all rows (a scalar)."""
    return T.sum_(inner_loss_rows(k, v, state))


def inner_step(k, v, state, eta, mask=None):
    """One closed-form gradient step of the inner loss.

    ``mask`` (per row, 0/1) suppresses the update on padding rows.
    """
    scale = 2.0 * eta
    if mask is not None:
        scale = np.asarray(mask, dtype=np.float64)[..., None, None] * (2.0 * eta)
    if state.kind == "linear":
        (W,) = state.weights
        e = T.sub(_mv(W, k), v)
        return TTTState("linear", (T.sub(W, T.mul(T.outer(e, k), scale)),))
    W1, W2 = state.weights
    z = _mv(W1, k)
    a = T.gelu(z)
    r = T.sub(_mv(W2, a), v)
    delta = T.mul(_mtv(W2, r), T.gelu_prime(z))
    W2n = T.sub(W2, T.mul(T.outer(r, a), scale))
    W1n = T.sub(W1, T.mul(T.outer(delta, k), scale))
    return TTTState("mlp", (W1n, W2n))


class ScanResult(NamedTuple):
    outputs: T.Tensor
    state: TTTState
    inner_losses: np.ndarray


def _promote(K, V, Q, mask):
    if not (K.shape == V.shape == Q.shape):
        raise ShapeError(f"view shapes differ: {K.shape}, {V.shape}, {Q.shape}")
    squeeze = K.ndim == 2
    if squeeze:
        K, V, Q = (T.expand_dims(t, 0) for t in (K, V, Q))
    if K.ndim != 3:
        raise ShapeError(f"views must be (n, D) or (B, n, D), got {K.shape}")
    if mask is None:
        mask = np.ones(K.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(K.shape[:2])
    return K, V, Q, mask, squeeze


def ttt_scan(K, V, Q, state0, eta, mask=None, impl="fused"):
    """Run the inner loop over ``n`` tokens.

    For every valid position ``t``: ``state_t = inner_step(k_t, v_t,
    state_{t-1})`` and ``out_t = f(q_t; state_t)``, so each output already
    reflects its own token's update. Masked positions carry the state through
    and output zero. ``eta == 0`` is the static map ``f(q_t; W_0)``.

    ``inner_losses[b, t]`` is the pre-update loss ``|f(k_t; W_{t-1}) - v_t|^2``.
    """
    K, V, Q, mask, squeeze = _promote(T.as_tensor(K), T.as_tensor(V), T.as_tensor(Q), mask)
    if eta < 0:
        raise ValueError("eta must be non-negative")
    if eta == 0.0:
        result = _static_scan(K, V, Q, state0, mask)
    elif impl == "graph":
        result = _graph_scan(K, V, Q, state0, eta, mask)
    elif impl == "fused":
        result = _fused_scan(K, V, Q, state0, eta, mask)
    else:
        raise ValueError(f"unknown scan implementation {impl!r}")
    if squeeze:
        out = T.reshape(result.outputs, result.outputs.shape[1:])
        return ScanResult(out, result.state, result.inner_losses[0])
    return result


def _static_scan(K, V, Q, state0, mask):
    m = mask[..., None].astype(np.float64)
    out = T.mul(inner_forward(Q, state0), m)
    with T.no_grad():
        losses = inner_loss_rows(K, V, state0).data * mask
    return ScanResult(out, state0, losses)


def _graph_scan(K, V, Q, state, eta, mask):
    n = K.shape[1]
    outs = []
    losses = np.zeros(mask.shape)
    for t in range(n):
        mt = mask[:, t]
        k, v, q = K[:, t], V[:, t], Q[:, t]
        try:
            with T.no_grad():
                losses[:, t] = inner_loss_rows(k, v, state).data * mt
            state = inner_step(k, v, state, eta, mt)
            out = inner_forward(q, state)
        except NumericalError as exc:
            raise DivergenceError(t) from exc
        if not all(np.all(np.isfinite(w.data)) for w in state.weights):
            raise DivergenceError(t)
        outs.append(T.mul(out, mt[:, None].astype(np.float64)))
    return ScanResult(T.stack(outs, axis=1), state, losses)


def _fused_scan(K, V, Q, state0, eta, mask):
    if state0.weights[0].ndim != 2:
        raise ShapeError("fused scan needs an unbatched initial state")
    Kd, Vd, Qd = K.data, V.data, Q.data
    if state0.kind == "linear":
        (W0,) = state0.weights
        out, losses, Wn, bad = kernels.linear_scan_forward(Kd, Vd, Qd, W0.data, mask, eta)
        final = (Wn,)

        def backward(g):
            dK, dV, dQ, dW0 = kernels.linear_scan_backward(Kd, Vd, Qd, W0.data, mask, eta, g)
            return dK, dV, dQ, dW0

        parents = (K, V, Q, W0)
    else:
        W10, W20 = state0.weights
        out, losses, W1n, W2n, bad = kernels.mlp_scan_forward(Kd, Vd, Qd, W10.data, W20.data, mask, eta)
        final = (W1n, W2n)

        def backward(g):
            return kernels.mlp_scan_backward(Kd, Vd, Qd, W10.data, W20.data, mask, eta, g)

        parents = (K, V, Q, W10, W20)
    if np.any(bad >= 0):
        raise DivergenceError(int(bad[bad >= 0].min()))
    node = T.make_op(out, parents, backward, f"ttt_scan_{state0.kind}")
    return ScanResult(node, TTTState(state0.kind, tuple(T.Tensor(w) for w in final)), losses)
