"""Finite-difference suite over every differentiable op, the TTT scan and the micro model."""
import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embedding import RopeConfig, embed_lookup, rope_apply
from .model import ModelConfig, TTT4Rec, batch_loss
from .ttt import InnerModel, inner_loss, inner_step, ttt_scan


@dataclass(frozen=True)
class MicroConfig:
    dim: int = 4
    seq_len: int = 4
    n_items: int = 6
    inner_hidden: int = 6
    seed: int = 0
    tol: float = 1e-4

    @classmethod
    def from_text(cls, text):
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in names:
                raise KeyError(f"unknown micro-config key {key!r}")
            values[key] = float(raw) if key == "tol" else int(raw)
        return cls(**values)


def _leaf(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _weighted(out, weights):
    return T.sum_(T.mul(out, weights))


def op_checks(rng):
    """``(name, f, inputs)`` triples for the primitive ops."""
    checks = []
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    checks.append(("matmul", lambda: _weighted(T.matmul(a, b), w), [a, b]))
    bx, by = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    wb = rng.normal(size=(2, 3, 5))
    checks.append(("matmul_batched", lambda: _weighted(T.matmul(bx, by), wb), [bx, by]))
    lx, lw = _leaf(rng, 2, 3, 4), _leaf(rng, 5, 4)
    wrl = rng.normal(size=(2, 3, 5))
    checks.append(("rowwise_linear", lambda: _weighted(T.rowwise_linear(lx, lw), wrl), [lx, lw]))
    x, y = _leaf(rng, 3, 4), _leaf(rng, 4)
    w2 = rng.normal(size=(3, 4))
    checks.append(("add_mul_div_broadcast",
                   lambda: _weighted(T.div(T.mul(T.add(x, y), y), T.add(T.square(y), 1.0)), w2), [x, y]))
    g = _leaf(rng, 5, 3)
    wg = rng.normal(size=(5, 3))
    checks.append(("gelu", lambda: _weighted(T.gelu(g), wg), [g]))
    checks.append(("gelu_prime", lambda: _weighted(T.gelu_prime(g), wg), [g]))
    ln_x, gain, bias = _leaf(rng, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    wl = rng.normal(size=(3, 5))
    checks.append(("layer_norm", lambda: _weighted(T.layer_norm(ln_x, gain, bias), wl), [ln_x, gain, bias]))
    logits = _leaf(rng, 3, 5)
    targets = np.array([0, 3, 4])
    checks.append(("softmax_cross_entropy", lambda: T.softmax_cross_entropy(logits, targets), [logits]))
    cx, ck = _leaf(rng, 2, 6, 3), _leaf(rng, 4, 3)
    wc = rng.normal(size=(2, 6, 3))
    checks.append(("causal_conv1d", lambda: _weighted(T.causal_depthwise_conv1d(cx, ck), wc), [cx, ck]))
    rx = _leaf(rng, 2, 5, 6)
    pos = np.tile(np.arange(5), (2, 1))
    wr = rng.normal(size=(2, 5, 6))
    checks.append(("rope", lambda: _weighted(rope_apply(rx, pos, RopeConfig(1000.0)), wr), [rx]))
    table = _leaf(rng, 5, 3)
    idx = np.array([[1, 2, 2, 4], [1, 3, 4, 2]])  # row 0 is padding: no gradient by design
    we = rng.normal(size=(2, 4, 3))
    checks.append(("embed_lookup", lambda: _weighted(embed_lookup(table, idx), we), [table]))
    d = _leaf(rng, 4, 4)
    wd = rng.normal(size=(4, 4))
    seed = int(rng.integers(1 << 30))
    checks.append(("dropout", lambda: _weighted(
        T.dropout(d, 0.3, np.random.default_rng(seed), training=True), wd), [d]))
    s = _leaf(rng, 3, 4)
    ws = rng.normal(size=(2, 4))
    checks.append(("getitem_stack_sum",
                   lambda: T.sum_(T.mul(T.stack([s[0], s[2]], axis=0), ws)) + T.sum_(T.exp(s[1])), [s]))
    return checks


def ttt_checks(rng, dim=4, hidden=6, n=5):
    checks = []
    for kind in ("linear", "mlp"):
        inner = InnerModel(kind, dim, hidden, rng)
        if kind == "linear":
            inner.W.data = rng.normal(size=(dim, dim)) * 0.3
        else:
            inner.W1.data = rng.normal(size=inner.W1.shape) * 0.5
            inner.W2.data = rng.normal(size=inner.W2.shape) * 0.5
        w0 = list(inner.initial_state().weights)
        k, v = _leaf(rng, dim, scale=0.7), _leaf(rng, dim)

        def step_fn(inner=inner, k=k, v=v):
            return inner_loss(k, v, inner_step(k, v, inner.initial_state(), 0.1))

        checks.append((f"inner_step_{kind}", step_fn, [k, v] + w0))
        K, V, Q = (_leaf(rng, 2, n, dim, scale=0.7) for _ in range(3))
        mask = np.ones((2, n), dtype=bool)
        mask[1, :2] = False
        wo = rng.normal(size=(2, n, dim))
        for impl in ("graph", "fused"):
            def scan_fn(inner=inner, K=K, V=V, Q=Q, wo=wo, impl=impl):
                res = ttt_scan(K, V, Q, inner.initial_state(), 0.1, mask, impl)
                return _weighted(res.outputs, wo)

            checks.append((f"ttt_scan_{kind}_{impl}", scan_fn, [K, V, Q] + w0))
    return checks


def micro_model_checks(micro, impls=("fused",)):
    rng = np.random.default_rng(micro.seed)
    checks = []
    windows = [rng.integers(1, micro.n_items + 1, size=micro.seq_len + 1),
               rng.integers(1, micro.n_items + 1, size=micro.seq_len - 1)]
    for backbone in ("transformer", "mamba"):
        for inner in ("linear", "mlp"):
            for impl in impls:
                cfg = ModelConfig(dim=micro.dim, n_blocks=1, backbone=backbone, inner=inner,
                                  inner_hidden=micro.inner_hidden, dropout=0.0, seed=micro.seed,
                                  max_context=micro.seq_len, scan_impl=impl)
                model = TTT4Rec(cfg, micro.n_items)
                for p in model.parameters():
                    # move away from the zero/identity init so every path carries signal
                    p.data = p.data + rng.normal(size=p.shape) * 0.3
                model.embedding.table.data[0] = 0.0

                def loss_fn(model=model):
                    return batch_loss(model, windows, False, None)[0]

                checks.append((f"model_{backbone}_{inner}_{impl}", loss_fn, model.parameters()))
    return checks


def run_suite(micro=MicroConfig(), corrupt=False, impls=("fused", "graph")):
    """Run every check at ``micro.tol``; returns the list of reports."""
    rng = np.random.default_rng(micro.seed)
    corrupt_fn = None
    if corrupt:
        def corrupt_fn(grads):
            return [g * 1.01 + 1e-3 for g in grads]
    checks = op_checks(rng) + ttt_checks(rng, micro.dim, micro.inner_hidden)
    checks += micro_model_checks(micro, impls)
    with T.check_finite(True):
        return [T.finite_diff_check(f, inputs, tol=micro.tol, name=name, corrupt=corrupt_fn)
                for name, f, inputs in checks]
