"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they
are also repeated in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from ttt4rec import backbone as B
from ttt4rec import tensor as T
from ttt4rec.checkpoint import load_checkpoint, save_checkpoint
from ttt4rec.data import (Interaction, RegimeSpec, SequenceDataset, build_dataset, sparse_regime,
                          split_points, synth_sequences)
from ttt4rec.errors import CheckpointError
from ttt4rec.gradcheck import run_suite
from ttt4rec.metrics import EvalReport, evaluate, metrics_at_k
from ttt4rec.model import ModelConfig, TTT4Rec, fit
from ttt4rec.tensor import Tensor
from ttt4rec.ttt import ScanResult, TTTState, ViewProjections, inner_forward, project_views, ttt_scan

from test_metrics import brute_force
from test_ttt import naive_linear_recursion

VARIANTS = [(b, i) for b in ("transformer", "mamba") for i in ("linear", "mlp")]
RESULTS = []


def verdict(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def synthetic_dataset(sequences, n_items, ratios="3:2:5"):
    """Dataset over a declared vocabulary ``i1..i<n_items>``; item index k is item ``i<k>``."""
    sequences = [np.asarray(s, dtype=np.int64) for s in sequences]
    bounds = [split_points(len(s), ratios) for s in sequences]
    return SequenceDataset([f"u{u}" for u in range(len(sequences))], sequences,
                           [np.arange(len(s)) for s in sequences],
                           [f"i{k}" for k in range(1, n_items + 1)],
                           np.array([b[0] for b in bounds]), np.array([b[1] for b in bounds]), ratios)


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    reports = run_suite()
    elapsed = time.perf_counter() - start
    failed = [r.name for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    ok = not failed and elapsed < 60 and all(r.tol <= 1e-4 for r in reports)
    verdict(1, ok, f"{len(reports) - len(failed)}/{len(reports)} checks, worst rel err {worst:.2e}, "
                   f"{elapsed:.1f}s (failed: {failed or 'none'})")


def test_criterion_2_inner_loop_oracle():
    rng = np.random.default_rng(2)
    errors = []
    for _ in range(20):
        D = 4
        K, V = rng.normal(size=(8, D)) * 0.5, rng.normal(size=(8, D))
        W0 = rng.normal(size=(D, D)) * 0.2
        res = ttt_scan(K, V, K, TTTState("linear", (Tensor(W0),)), 0.1)
        errors.append(T.relative_error(res.state.weights[0].data[0], naive_linear_recursion(K, V, W0, 0.1)))
    verdict(2, max(errors) <= 1e-4, f"worst rel err {max(errors):.2e} over 20 sequences of length 8")


def per_token_scan(K, V, Q, state0, eta, mask=None, impl=None):
    # the static map, one token at a time
    Qd = Q.data
    out = np.zeros_like(Qd)
    for b in range(Qd.shape[0]):
        for t in range(Qd.shape[1]):
            if mask[b, t]:
                out[b, t] = inner_forward(Tensor(Qd[b, t]), state0).data
    return ScanResult(Tensor(out), state0, np.zeros(mask.shape))


def test_criterion_3_frozen_equivalence(monkeypatch):
    rng = np.random.default_rng(3)
    outcomes = {}
    for backbone, inner in VARIANTS:
        model = TTT4Rec(ModelConfig(backbone=backbone, inner=inner, dropout=0.0), 50)
        for p in model.parameters():
            p.data = p.data + rng.normal(size=p.shape) * 0.1
        items = rng.integers(1, 51, size=(4, 12))
        items[:, :3] = 0
        frozen = model.forward(items, eta_inner=0.0).hidden.data
        with monkeypatch.context() as m:
            m.setattr(B, "ttt_scan", per_token_scan)
            static = model.forward(items).hidden.data
        outcomes[f"{backbone}+{inner}"] = np.array_equal(frozen, static)
    verdict(3, all(outcomes.values()), f"bitwise equal per variant: {outcomes}")


def test_criterion_4_causality():
    broken = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for backbone in ("transformer", "mamba"):
            model = TTT4Rec(ModelConfig(backbone=backbone, dim=16, inner_hidden=16, dropout=0.0, seed=seed), 30)
            items = rng.integers(1, 31, size=(2, 10))
            base = model.forward(items).hidden.data
            t = int(rng.integers(0, 9))
            changed = items.copy()
            changed[:, t + 1] = changed[:, t + 1] % 30 + 1
            after = model.forward(changed).hidden.data
            if not np.array_equal(base[:, :t + 1], after[:, :t + 1]):
                broken.append((seed, backbone, t))
    verdict(4, not broken, f"10 seeds x 2 backbones, prefixes changed in {len(broken)} cases {broken or ''}")


def motif_loss_ratio(seed, dim=16, motif_len=4, repeats=8, eta=0.1):
    rng = np.random.default_rng(seed)
    motif = rng.normal(size=(motif_len, dim))
    motif /= np.linalg.norm(motif, axis=1, keepdims=True)
    proj = ViewProjections(dim, rng)
    for p in (proj.theta_K, proj.theta_V, proj.theta_Q):
        p.data = rng.normal(size=(dim, dim)) / np.sqrt(dim)
    K, V, Q = project_views(Tensor(np.tile(motif, (repeats, 1))), proj)
    losses = ttt_scan(K, V, Q, TTTState("linear", (Tensor(np.zeros((dim, dim))),)), eta).inner_losses
    return losses[-motif_len:].mean() / losses[:motif_len].mean()


def test_criterion_5_adaptation_signature():
    ratio = float(np.mean([motif_loss_ratio(seed) for seed in range(10)]))
    verdict(5, ratio <= 0.5, f"last/first repetition inner loss {ratio:.3f} (need <= 0.5), mean of 10 seeds")


def test_criterion_6_overfit_sanity():
    n_items, rng = 100, np.random.default_rng(0)
    P = sparse_regime(n_items, rng, 3)
    seqs = []
    for u in range(50):
        start = np.zeros(n_items)
        start[u] = 1.0  # distinct first items keep the users apart
        seqs.append(synth_sequences(u, 1, RegimeSpec(n_items, 30, [P], start=start))[0])
    ds = synthetic_dataset(seqs, n_items)
    model = TTT4Rec(ModelConfig(), n_items)
    begin = time.perf_counter()
    reached = {}

    def check(epoch, loss):
        if epoch % 10 == 0 and not reached:
            hr1 = evaluate(model, ds, "train", cutoffs=(1,)).hr[1]
            if hr1 >= 0.9:
                reached.update(epoch=epoch, hr1=hr1)
                raise StopIteration

    try:
        fit(model, ds, epochs=100, on_epoch=check)
    except StopIteration:
        pass
    elapsed = time.perf_counter() - begin
    ok = bool(reached) and elapsed < 300
    detail = (f"HR@1 {reached['hr1']:.3f} at epoch {reached['epoch']}" if reached else "HR@1 < 0.9 after 100 epochs")
    verdict(6, ok, f"{detail}, |V|={ds.n_items}, {elapsed:.0f}s")


def regime_shift_run(seed, users=200, n_items=200, length=40, focus=10):
    """Mid-test switch from a broad regime into one concentrated on ``focus`` items."""
    rng = np.random.default_rng(seed)
    broad = sparse_regime(n_items, rng, 3)
    narrow = sparse_regime(n_items, rng, 2, rng.choice(np.arange(1, n_items + 1), focus, replace=False))
    _, val_end = split_points(length, "3:2:5")
    switch = (val_end + length) // 2
    seqs = synth_sequences(seed, users, RegimeSpec(n_items, length, [broad, narrow], [switch]))
    ds = synthetic_dataset(list(seqs), n_items)
    model = TTT4Rec(ModelConfig(seed=seed), n_items)
    fit(model, ds)
    items = np.stack(ds.sequences)
    loss_adapt = model.inner_loss_profile(items, adapt=True)[0][:, switch:].mean()
    loss_frozen = model.inner_loss_profile(items, adapt=False)[0][:, switch:].mean()
    reports = [evaluate(model, ds, "test", adapt_at_eval=a) for a in (True, False)]
    return loss_adapt, loss_frozen, reports


@pytest.mark.slow
def test_criterion_7_regime_shift():
    runs = [regime_shift_run(seed) for seed in range(5)]
    loss_adapt = np.mean([r[0] for r in runs])
    loss_frozen = np.mean([r[1] for r in runs])
    hr_adapt = np.mean([r[2][0].hr[10] for r in runs])
    hr_frozen = np.mean([r[2][1].hr[10] for r in runs])
    monotone = all(rep.hr[50] >= rep.hr[10] for r in runs for rep in r[2])
    reduction = 1.0 - loss_adapt / loss_frozen
    ok = reduction >= 0.2 and hr_adapt >= hr_frozen and monotone
    verdict(7, ok, f"post-switch inner loss {loss_adapt:.3f} vs frozen {loss_frozen:.3f} "
                   f"({reduction:.1%} lower, need >= 20%); test HR@10 {hr_adapt:.4f} vs frozen {hr_frozen:.4f}")


def test_criterion_8_metric_oracles():
    # four users of length 10 give 5 test positions each under 3:2:5
    seqs = [np.random.default_rng(u).integers(1, 7, size=10) for u in range(4)]
    ds = synthetic_dataset(seqs, 6)
    model = TTT4Rec(ModelConfig(dim=8, inner_hidden=8, dropout=0.0), ds.n_items)
    exact, reports = True, []
    for seg in ("test",):
        rep = evaluate(model, ds, seg, cutoffs=(1, 10, 50), max_context=4)
        hr, ndcg, n = brute_force(model, ds, seg, (1, 10, 50), 4)
        exact &= rep.hr == hr and rep.ndcg == ndcg and rep.instances == n
        reports.append(rep)
    instances = sum(r.instances for r in reports)
    rng = np.random.default_rng(8)
    reports += [EvalReport.from_ranks("test", rng.integers(1, 300, size=40), (10, 50)) for _ in range(50)]
    monotone = all(r.hr[50] >= r.hr[10] for r in reports)
    ndcg4 = metrics_at_k(4, 10)[1]
    rank4_ok = abs(ndcg4 - 1 / math.log2(5)) <= 1e-12
    verdict(8, exact and instances == 20 and rank4_ok and monotone,
            f"brute force exact on {instances} instances: {exact}; rank-4 NDCG@10 {ndcg4:.12f}; "
            f"HR@50 >= HR@10 on {len(reports)} reports: {monotone}")


def test_criterion_9_split_arithmetic():
    expected = {
        ("3:2:5", 10): (3, 2, 5), ("3:2:5", 20): (6, 4, 10), ("3:2:5", 100): (30, 20, 50),
        ("6:2:2", 10): (6, 2, 2), ("6:2:2", 20): (12, 4, 4), ("6:2:2", 100): (60, 20, 20),
    }
    wrong = []
    for ratios in ("3:2:5", "6:2:2"):
        rows = [Interaction(f"u{n}", f"i{t % 7}", 1000 * n + t) for n in (10, 20, 100) for t in range(n)]
        ds = build_dataset(rows, ratios=ratios)
        ds.check_invariants()
        for u, seq in enumerate(ds.sequences):
            got = tuple(hi - lo for lo, hi in (ds.segment_bounds(u, s) for s in ("train", "val", "test")))
            if got != expected[ratios, len(seq)]:
                wrong.append((ratios, len(seq), got))
    verdict(9, not wrong, f"segment lengths for 3:2:5 and 6:2:2 at n=10,20,100 exact; invariants hold "
                          f"(mismatches: {wrong or 'none'})")


def corrupted_copies(blob):
    header_end = blob.index(b"\n") + 1
    flipped = bytearray(blob)
    flipped[-3] ^= 0x01
    return [b"XXXXXXXX" + blob[8:], bytes(flipped), blob[:-5], blob[:header_end - 4], blob + b"\x01", b""]


def test_criterion_10_checkpoint_roundtrip(tmp_path):
    seqs = [np.random.default_rng(u).integers(1, 13, size=15) for u in range(6)]
    ds = synthetic_dataset(seqs, 12)
    items = np.array([[0, 0, 3, 1, 4, 9], [2, 7, 1, 8, 2, 12]])
    exact, rejected, total = {}, 0, 0
    for backbone, inner in VARIANTS:
        model = TTT4Rec(ModelConfig(backbone=backbone, inner=inner, dim=8, inner_hidden=8, max_context=8), 12)
        fit(model, ds, epochs=1)
        path = tmp_path / f"{backbone}_{inner}.ckpt"
        save_checkpoint(model, path, ds.items)
        loaded, _ = load_checkpoint(path)
        exact[f"{backbone}+{inner}"] = np.array_equal(loaded.forward(items).hidden.data,
                                                      model.forward(items).hidden.data)
        for bad in corrupted_copies(path.read_bytes()):
            (tmp_path / "bad.ckpt").write_bytes(bad)
            total += 1
            try:
                load_checkpoint(tmp_path / "bad.ckpt")
            except CheckpointError:
                rejected += 1
    verdict(10, all(exact.values()) and rejected == total,
            f"bitwise round-trip {exact}; rejected {rejected}/{total} corrupted files")
