import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ttt4rec.data import (Interaction, RegimeSpec, build_dataset, cycle_regime, parse_interactions,
                          read_prepared, sparse_regime, split_points, synth_generate, synth_sequences,
                          truncate_context, write_prepared)
from ttt4rec.errors import DataError


def write(tmp_path, text, name="log.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_header_only_is_empty(tmp_path):
    assert len(parse_interactions(write(tmp_path, "user_id,item_id,timestamp\n"))) == 0


def test_rows_in_file_order(tmp_path):
    log = parse_interactions(write(tmp_path, "user_id,item_id,timestamp\na,x,3\nb,y,1\na,z,2\n"))
    assert [(r.user_id, r.item_id, r.timestamp) for r in log] == [("a", "x", 3), ("b", "y", 1), ("a", "z", 2)]


def test_tab_delimited_and_column_order(tmp_path):
    log = parse_interactions(write(tmp_path, "timestamp\titem_id\tuser_id\n5\tx\ta\n"))
    assert log[0] == Interaction("a", "x", 5)


def test_bad_timestamp_lenient_and_strict(tmp_path):
    p = write(tmp_path, "user_id,item_id,timestamp\na,x,1\na,y,soon\na,z,3\n")
    log = parse_interactions(p)
    assert len(log) == 2 and log.malformed == 1
    with pytest.raises(DataError) as info:
        parse_interactions(p, strict=True)
    assert info.value.line == 3


def test_missing_column(tmp_path):
    with pytest.raises(DataError, match="timestamp"):
        parse_interactions(write(tmp_path, "user_id,item_id\na,x\n"))


@pytest.mark.parametrize("n,ratios,expected", [
    (10, "3:2:5", (3, 2, 5)),
    (7, "3:2:5", (2, 1, 4)),
    (10, "6:2:2", (6, 2, 2)),
    (20, "3:2:5", (6, 4, 10)),
    (100, "6:2:2", (60, 20, 20)),
])
def test_split_examples(n, ratios, expected):
    a, b = split_points(n, ratios)
    assert (a, b - a, n - b) == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 500), st.tuples(*[st.integers(1, 9)] * 3))
def test_split_partitions_with_floor_rule(n, ratios):
    a, b = split_points(n, ratios)
    total = sum(ratios)
    assert a == n * ratios[0] // total
    assert b - a == n * ratios[1] // total
    assert 0 <= a <= b <= n


def test_chronological_sort_keeps_file_order_on_ties():
    rows = [Interaction("u", "c", 5), Interaction("u", "a", 1), Interaction("u", "b", 5), Interaction("u", "d", 2)]
    ds = build_dataset(rows)
    names = [ds.items[i - 1] for i in ds.sequences[0]]
    assert names == ["a", "d", "c", "b"]
    ds.check_invariants()


def test_min_length_filter_and_vocabulary():
    rows = [Interaction("short", "z", 0)] + [Interaction("long", f"i{t % 3}", t) for t in range(6)]
    ds = build_dataset(rows, min_seq_len=2)
    assert ds.users == ["long"]
    # vocabulary comes from the whole file, dense from 1 in first-appearance order
    assert ds.items == ["z", "i0", "i1", "i2"]
    assert ds.vocab() == {"z": 1, "i0": 2, "i1": 3, "i2": 4}
    with pytest.raises(DataError):
        build_dataset(rows, min_seq_len=10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 9), st.integers(0, 50)), min_size=1, max_size=80),
       st.sampled_from(["3:2:5", "6:2:2", "1:1:1"]))
def test_dataset_invariants(rows, ratios):
    log = [Interaction(f"u{u}", f"i{i}", t) for u, i, t in rows]
    ds = build_dataset(log, 1, ratios)
    ds.check_invariants()
    assert ds.n_interactions == len(log)
    assert min(min(s) for s in ds.sequences) >= 1
    again = build_dataset(log, 1, ratios)
    assert ds.items == again.items
    for u in range(ds.n_users):
        lens = [e - s for s, e in (ds.segment_bounds(u, seg) for seg in ("train", "val", "test"))]
        assert sum(lens) == len(ds.sequences[u])


@pytest.mark.parametrize("length,limit,expected", [(5, 100, 5), (120, 100, 100), (7, 1, 1)])
def test_truncate_context(length, limit, expected):
    prefix = np.arange(length)
    out = truncate_context(prefix, limit)
    assert len(out) == expected and np.array_equal(out, prefix[-expected:])


def test_synth_is_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    spec = RegimeSpec(10, 15, [sparse_regime(10, rng, 3)])
    a = synth_generate(7, 20, spec, tmp_path / "a.csv")
    b = synth_generate(7, 20, spec, tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()
    c = synth_generate(8, 20, spec, tmp_path / "c.csv")
    assert a.read_bytes() != c.read_bytes()


def test_cycle_regime_gives_exact_cycles():
    spec = RegimeSpec(3, 10, [cycle_regime(3)])
    for seq in synth_sequences(0, 5, spec):
        assert all((b - a) % 3 == 1 for a, b in zip(seq, seq[1:]))


def test_two_regime_transition_counts():
    rng = np.random.default_rng(4)
    n_items = 5
    regimes = [sparse_regime(n_items, rng, 3), sparse_regime(n_items, rng, 3)]
    switch = 100
    spec = RegimeSpec(n_items, 200, regimes, [switch])
    seqs = synth_sequences(9, 100, spec)  # 10k steps per regime
    for r, (lo, hi) in enumerate([(0, switch), (switch, 200)]):
        counts = np.zeros((n_items + 1, n_items + 1))
        for seq in seqs:
            for t in range(max(lo, 1), hi):
                counts[seq[t - 1], seq[t]] += 1
        P = regimes[r]
        for i in range(1, n_items + 1):
            if counts[i].sum() < 200:
                continue
            emp = counts[i] / counts[i].sum()
            assert np.max(np.abs(emp - P[i])) < 0.05, (r, i)


def test_prepared_roundtrip(tmp_path):
    rows = [Interaction(f"u{u}", f"i{(u * 3 + t) % 7}", t) for u in range(4) for t in range(6 + u)]
    ds = build_dataset(rows, 1, "3:2:5")
    write_prepared(ds, tmp_path / "p.txt")
    text = (tmp_path / "p.txt").read_text()
    assert "#ratios=3:2:5\n" in text
    back = read_prepared(tmp_path / "p.txt")
    assert back.items == ds.items and back.users == ds.users
    assert all(np.array_equal(a, b) for a, b in zip(back.sequences, ds.sequences))
    assert np.array_equal(back.train_end, ds.train_end) and np.array_equal(back.val_end, ds.val_end)
    with pytest.raises(DataError):
        read_prepared(write(tmp_path, "not a dataset\n", "x.txt"))
