import math

import numpy as np
import pytest

from ttt4rec import tensor as T
from ttt4rec.data import RegimeSpec, sparse_regime, synth_sequences
from ttt4rec.errors import ConfigError
from ttt4rec.model import (ModelConfig, TrainingDivergence, TTT4Rec, batch_loss, fit,
                           gradient_norms, pad_left, predict_scores, recommend, training_windows)
from ttt4rec.tensor import Tensor

from _helpers import dataset_from_sequences

VARIANTS = [(b, i) for b in ("transformer", "mamba") for i in ("linear", "mlp")]


def small_config(**kw):
    base = dict(dim=8, inner_hidden=12, dropout=0.0, max_context=20)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def markov_dataset():
    rng = np.random.default_rng(0)
    spec = RegimeSpec(30, 20, [sparse_regime(30, rng, 2)])
    return dataset_from_sequences(synth_sequences(0, 50, spec))


def test_config_lists_every_problem():
    with pytest.raises(ConfigError) as info:
        ModelConfig(dim=3, backbone="rnn", inner="tree", dropout=1.5)
    assert len(info.value.problems) == 4


def test_digest_tracks_architecture_only():
    a = ModelConfig()
    assert a.digest(10) == a.replace(lr=0.5, epochs=1).digest(10)
    assert a.digest(10) != a.replace(dim=32).digest(10)
    assert a.digest(10) != a.digest(11)


@pytest.mark.parametrize("backbone,inner", VARIANTS)
def test_single_row_batch_matches_unbatched(backbone, inner):
    model = TTT4Rec(small_config(backbone=backbone, inner=inner), 9)
    seq = np.array([3, 1, 4, 1, 5, 9])
    assert np.array_equal(model.forward(seq).hidden.data, model.forward(seq[None]).hidden.data)


@pytest.mark.parametrize("backbone,inner", VARIANTS)
def test_padding_contract(backbone, inner):
    model = TTT4Rec(small_config(backbone=backbone, inner=inner), 9)
    seq = np.array([3, 1, 4, 1, 5])
    padded = pad_left([seq, np.arange(1, 9)])
    res = model.forward(padded)
    alone = model.forward(seq[None])
    assert np.array_equal(res.hidden.data[0, :3], np.zeros((3, 8)))
    assert np.all(res.inner_losses[0][0, :3] == 0)
    assert np.allclose(res.hidden.data[0, 3:], alone.hidden.data[0], rtol=0, atol=1e-12)


def test_eval_forward_is_deterministic():
    model = TTT4Rec(small_config(dropout=0.3), 9)
    items = np.array([[0, 2, 7, 5]])
    assert np.array_equal(model.forward(items).hidden.data, model.forward(items).hidden.data)
    again = TTT4Rec(small_config(dropout=0.3), 9)
    assert np.array_equal(model.forward(items).hidden.data, again.forward(items).hidden.data)


def test_prediction_examples(rng):
    head = Tensor(rng.normal(size=(10, 4)))
    assert np.array_equal(predict_scores(Tensor(np.zeros((1, 4))), head).data, np.zeros((1, 10)))
    h = rng.normal(size=4)
    scores = predict_scores(Tensor(h[None]), head).data[0]
    brute = [sum(head.data[i, j] * h[j] for j in range(4)) for i in range(10)]
    assert int(np.argmax(scores)) == int(np.argmax(brute))
    assert abs(T.softmax_np(scores).sum() - 1) < 1e-9


def test_tied_prediction_matrix_uses_item_table():
    model = TTT4Rec(small_config(tie_prediction_matrix=True), 9)
    assert model.prediction_matrix().shape == (9, 8)
    assert "head" not in dict(model.named_parameters())


def test_recommend_clamps_and_orders():
    model = TTT4Rec(small_config(), 6)
    ranked = recommend(model, [1, 2, 3], top_k=50)
    assert sorted(i for i, _ in ranked) == [1, 2, 3, 4, 5, 6]
    probs = [p for _, p in ranked]
    assert probs == sorted(probs, reverse=True)
    assert abs(sum(probs) - 1) < 1e-9


def test_training_windows_cover_every_transition():
    ds = dataset_from_sequences([np.arange(1, 31)], ratios="1:0.0001:0.0001")
    end = int(ds.train_end[0])
    wins = training_windows(ds, 10)
    assert all(len(w) <= 11 for w in wins)
    pairs = {(int(w[i]), int(w[i + 1])) for w in wins for i in range(len(w) - 1)}
    seq = ds.sequences[0][:end]
    assert pairs == {(int(seq[i]), int(seq[i + 1])) for i in range(end - 1)}


def test_first_epoch_loss_near_uniform(markov_dataset):
    model = TTT4Rec(small_config(), markov_dataset.n_items)
    loss, _ = batch_loss(model, training_windows(markov_dataset, 20), False, None)
    assert abs(float(loss.data) - math.log(markov_dataset.n_items)) < 0.1 * math.log(markov_dataset.n_items)


def test_zero_learning_rate_keeps_loss(markov_dataset):
    model = TTT4Rec(small_config(lr=0.0, batch_size=16), markov_dataset.n_items)
    hist = fit(model, markov_dataset, epochs=3)
    assert max(hist) - min(hist) < 1e-12


def test_memorises_single_sequence():
    seq = np.array([5, 2, 8, 1, 7, 3, 6, 4, 2, 9, 1, 5])
    ds = dataset_from_sequences([seq], ratios="98:1:1")
    model = TTT4Rec(small_config(dim=16, lr=1e-2), ds.n_items)
    hist = fit(model, ds, epochs=150)
    assert hist[-1] < 0.01


@pytest.mark.parametrize("backbone,inner", VARIANTS)
def test_loss_halves_in_twenty_epochs(backbone, inner, markov_dataset):
    cfg = small_config(dim=16, inner_hidden=32, backbone=backbone, inner=inner, lr=3e-3,
                       batch_size=16, dropout=0.1)
    hist = fit(TTT4Rec(cfg, markov_dataset.n_items), markov_dataset, epochs=20)
    assert hist[-1] <= 0.5 * hist[0]


@pytest.mark.parametrize("backbone,inner", VARIANTS)
def test_no_dead_parameters(backbone, inner, markov_dataset):
    model = TTT4Rec(small_config(backbone=backbone, inner=inner), markov_dataset.n_items)
    norms = gradient_norms(model, training_windows(markov_dataset, 20)[:16])
    assert all(v > 0 for v in norms.values()), [k for k, v in norms.items() if v == 0]


@pytest.mark.parametrize("targets", ["all", "last"])
def test_target_modes(targets, markov_dataset):
    model = TTT4Rec(small_config(targets=targets), markov_dataset.n_items)
    wins = training_windows(markov_dataset, 20)[:4]
    _, n = batch_loss(model, wins, False, None, targets)
    assert n == (sum(len(w) - 1 for w in wins) if targets == "all" else len(wins))


def test_divergence_names_batch(markov_dataset):
    model = TTT4Rec(small_config(), markov_dataset.n_items)
    model.head.data[0, 0] = np.inf
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergence) as info:
        fit(model, markov_dataset, epochs=1)
    assert info.value.batch_index == 0


@pytest.mark.parametrize("backbone,inner", VARIANTS)
def test_micro_model_gradients(backbone, inner):
    from ttt4rec.gradcheck import MicroConfig, micro_model_checks

    micro = MicroConfig()
    checks = [c for c in micro_model_checks(micro, ("fused",)) if c[0] == f"model_{backbone}_{inner}_fused"]
    (name, f, inputs), = checks
    rep = T.finite_diff_check(f, inputs, tol=1e-4, name=name)
    assert rep.passed, rep
