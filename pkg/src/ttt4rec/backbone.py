"""Residual blocks wrapping the TTT layer (Transformer-style and Mamba-style)."""
import numpy as np

from . import tensor as T
from .module import Module, normal_init, parameter
from .ttt import InnerModel, ViewProjections, project_views, ttt_scan

BACKBONES = ("transformer", "mamba")


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    """D -> mult*D -> D with GELU in between."""

    def __init__(self, dim, rng, mult=4):
        self.W1 = normal_init(rng, (mult * dim, dim))
        self.b1 = parameter(np.zeros(mult * dim))
        self.W2 = normal_init(rng, (dim, mult * dim))
        self.b2 = parameter(np.zeros(dim))

    def __call__(self, x):
        return T.linear(T.gelu(T.linear(x, self.W1, self.b1)), self.W2, self.b2)


def _mask_col(mask):
    return np.asarray(mask, dtype=np.float64)[..., None]


class TransformerSeqBlock(Module):
    """Views -> TTT scan -> LayerNorm."""

    def __init__(self, dim, inner_kind, inner_hidden, rng, eps=1e-5):
        self.proj = ViewProjections(dim, rng)
        self.inner = InnerModel(inner_kind, dim, inner_hidden, rng)
        self.norm = LayerNorm(dim, eps)

    def __call__(self, x, mask, eta, impl="fused"):
        K, V, Q = project_views(x, self.proj)
        res = ttt_scan(K, V, Q, self.inner.initial_state(), eta, mask, impl)
        return self.norm(res.outputs), res.inner_losses


class MambaSeqBlock(Module):
    """Shared K/Q projection with separate causal convs, GELU gate, output projection."""

    def __init__(self, dim, inner_kind, inner_hidden, rng, conv_width=4, eps=1e-5):
        self.theta_KQ = normal_init(rng, (dim, dim))
        self.theta_V = normal_init(rng, (dim, dim))
        self.conv_K = self._conv_init(rng, conv_width, dim)
        self.conv_Q = self._conv_init(rng, conv_width, dim)
        self.theta_g = normal_init(rng, (dim, dim))
        self.out_proj = normal_init(rng, (dim, dim))
        self.inner = InnerModel(inner_kind, dim, inner_hidden, rng)
        self.norm = LayerNorm(dim, eps)

    @staticmethod
    def _conv_init(rng, width, dim):
        # near-identity: pass-through at the newest tap plus small noise
        kernel = normal_init(rng, (width, dim))
        # re-snap: the shifted tap must stay on the float32 grid for exact checkpoints
        kernel.data[-1] = (kernel.data[-1] + 1.0).astype(np.float32)
        return kernel

    def gate(self, x):
        return T.gelu(T.linear(x, self.theta_g))

    def __call__(self, x, mask, eta, impl="fused"):
        s = T.mul(T.linear(x, self.theta_KQ), _mask_col(mask))
        K = T.causal_depthwise_conv1d(s, self.conv_K)
        Q = T.causal_depthwise_conv1d(s, self.conv_Q)
        V = T.linear(x, self.theta_V)
        res = ttt_scan(K, V, Q, self.inner.initial_state(), eta, mask, impl)
        y = T.mul(self.norm(res.outputs), self.gate(x))
        return T.linear(y, self.out_proj), res.inner_losses


class ResidualBlock(Module):
    """``h = x + seq(LN(x))``; ``out = h + FFN(LN(h))``."""

    def __init__(self, dim, backbone, inner_kind, inner_hidden, rng, conv_width=4, ffn_mult=4, eps=1e-5):
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}")
        self.backbone = backbone
        self.norm1 = LayerNorm(dim, eps)
        if backbone == "transformer":
            self.seq = TransformerSeqBlock(dim, inner_kind, inner_hidden, rng, eps)
        else:
            self.seq = MambaSeqBlock(dim, inner_kind, inner_hidden, rng, conv_width, eps)
        self.norm2 = LayerNorm(dim, eps)
        self.ffn = FeedForward(dim, rng, ffn_mult)

    def __call__(self, x, mask, eta, impl="fused"):
        y, losses = self.seq(self.norm1(x), mask, eta, impl)
        h = T.add(x, y)
        return T.add(h, self.ffn(self.norm2(h))), losses
