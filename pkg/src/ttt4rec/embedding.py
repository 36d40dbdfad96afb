"""Item embedding table, rotary position encoding and the embedding stack."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .module import Module, normal_init, parameter


@dataclass(frozen=True)
class RopeConfig:
    base: float = 1000.0

    def frequencies(self, dim):
        if dim % 2:
            raise ShapeError(f"rotary encoding needs an even dimension, got {dim}")
        j = np.arange(dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * j / dim)


def embed_lookup(table, items):
    """Gather rows of ``table`` for integer ``items``; row 0 (padding) receives no gradient."""
    items = np.asarray(items, dtype=np.int64)
    E = table.data
    if items.size and (items.min() < 0 or items.max() >= E.shape[0]):
        raise IndexError(f"item index out of range [0, {E.shape[0] - 1}]")

    def backward(g):
        grad = np.zeros_like(E)
        np.add.at(grad, items, g)
        grad[0] = 0.0
        return (grad,)

    return T.make_op(E[items], (table,), backward, "embed_lookup")


def rope_angles(positions, dim, cfg):
    positions = np.asarray(positions, dtype=np.float64)
    return positions[..., None] * cfg.frequencies(dim)


def rope_apply(e, positions, cfg=RopeConfig()):
    """Rotate each coordinate pair (2j, 2j+1) of row ``i`` by ``positions[i] * omega_j``.

    ``positions`` must broadcast against ``e.shape[:-1]``.
    """
    D = e.shape[-1]
    theta = rope_angles(positions, D, cfg)
    cos, sin = np.cos(theta), np.sin(theta)
    X = e.data
    x, y = X[..., 0::2], X[..., 1::2]
    out = np.empty(np.broadcast_shapes(X.shape, theta.shape[:-1] + (D,)), dtype=X.dtype)
    out[..., 0::2] = x * cos - y * sin
    out[..., 1::2] = x * sin + y * cos

    def backward(g):
        gx, gy = g[..., 0::2], g[..., 1::2]
        grad = np.empty_like(g)
        grad[..., 0::2] = gx * cos + gy * sin
        grad[..., 1::2] = -gx * sin + gy * cos
        return (T._unbroadcast(grad, X.shape),)

    return T.make_op(out, (e,), backward, "rope")


def positions_from_mask(mask):
    """0-based positions counted from each row's first valid (non-padding) slot."""
    mask = np.asarray(mask, dtype=bool)
    return np.maximum(np.cumsum(mask, axis=-1) - 1, 0)


class ItemEmbedding(Module):
    """``H = LayerNorm(Dropout(RoPE(E[items])))``, zeroed at padding slots."""

    def __init__(self, n_items, dim, rng, rope=RopeConfig(), dropout=0.2, eps=1e-5):
        if dim % 2:
            raise ShapeError(f"embedding dimension must be even, got {dim}")
        self.dim = dim
        self.rope = rope
        self.dropout = dropout
        self.eps = eps
        table = normal_init(rng, (n_items + 1, dim))
        table.data[0] = 0.0
        self.table = table
        self.ln_gain = parameter(np.ones(dim))
        self.ln_bias = parameter(np.zeros(dim))

    @property
    def n_items(self):
        return self.table.shape[0] - 1

    def forward(self, items, training=False, rng=None):
        items = np.asarray(items, dtype=np.int64)
        mask = items != 0
        e = embed_lookup(self.table, items)
        e = rope_apply(e, positions_from_mask(mask), self.rope)
        e = T.dropout(e, self.dropout, rng, training)
        h = T.layer_norm(e, self.ln_gain, self.ln_bias, self.eps)
        return T.mul(h, mask[..., None].astype(h.data.dtype))

    __call__ = forward
