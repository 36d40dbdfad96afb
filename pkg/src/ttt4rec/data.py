"""Interaction logs, chronological per-user splits and synthetic Markov benchmarks."""
import csv
import io
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

COLUMNS = ("user_id", "item_id", "timestamp")
DATASET_MAGIC = "#ttt4rec-dataset v1"


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class InteractionLog:
    """Parsed rows in file order plus the number of malformed rows skipped."""

    interactions: list = field(default_factory=list)
    malformed: int = 0

    def __len__(self):
        return len(self.interactions)

    def __iter__(self):
        return iter(self.interactions)

    def __getitem__(self, i):
        return self.interactions[i]


def _sniff_delimiter(header):
    return "\t" if "\t" in header else ","


def parse_interactions(path, strict=False):
    """Read a comma- or tab-delimited file with header ``user_id,item_id,timestamp``.

    Lenient mode skips malformed rows and counts them; strict mode raises
    :class:`DataError` naming the first bad line.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DataError("empty file: missing header")
    delim = _sniff_delimiter(lines[0])
    reader = csv.reader(io.StringIO(text), delimiter=delim)
    header = [h.strip() for h in next(reader)]
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise DataError(f"missing columns {missing}", line=1)
    idx = [header.index(c) for c in COLUMNS]
    out = InteractionLog()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            if len(row) < len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", lineno)
            user, item, ts = (row[i].strip() for i in idx)
            if not user or not item:
                raise DataError("empty user or item id", lineno)
            try:
                stamp = int(ts)
            except ValueError:
                raise DataError(f"unparsable timestamp {ts!r}", lineno) from None
            if stamp < 0:
                raise DataError(f"negative timestamp {stamp}", lineno)
        except DataError:
            if strict:
                raise
            out.malformed += 1
            continue
        out.interactions.append(Interaction(user, item, stamp))
    if out.malformed:
        log.warning("%s: skipped %d malformed rows", path, out.malformed)
    return out


def parse_ratios(ratios):
    """``"3:2:5"`` or a 3-sequence -> tuple of positive Fractions."""
    if isinstance(ratios, str):
        parts = ratios.split(":")
    else:
        parts = list(ratios)
    if len(parts) != 3:
        raise ValueError(f"need three ratios train:val:test, got {ratios!r}")
    values = tuple(Fraction(str(p).strip()) for p in parts)
    if any(v <= 0 for v in values):
        raise ValueError(f"ratios must be positive, got {ratios!r}")
    return values


def split_points(n, ratios):
    """``(train_end, val_end)``: floor for train and val, remainder to test."""
    r_train, r_val, _ = parse_ratios(ratios)
    total = sum(parse_ratios(ratios))
    train_end = int(n * r_train // total)
    val_end = train_end + int(n * r_val // total)
    return train_end, val_end


@dataclass
class SequenceDataset:
    users: list
    sequences: list
    timestamps: list
    items: list
    train_end: np.ndarray
    val_end: np.ndarray
    ratios: str = "3:2:5"
    min_seq_len: int = 1

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_interactions(self):
        return int(sum(len(s) for s in self.sequences))

    def vocab(self):
        return {item: i + 1 for i, item in enumerate(self.items)}

    def segment_bounds(self, u, segment):
        n = len(self.sequences[u])
        if segment == "train":
            return 0, int(self.train_end[u])
        if segment == "val":
            return int(self.train_end[u]), int(self.val_end[u])
        if segment == "test":
            return int(self.val_end[u]), n
        raise ValueError(f"unknown segment {segment!r}")

    def summary(self):
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": self.n_interactions,
            "avg_seq_len": self.n_interactions / max(self.n_users, 1),
        }

    def check_invariants(self):
        """Raise AssertionError if a split or chronology invariant is broken."""
        for u, (seq, ts) in enumerate(zip(self.sequences, self.timestamps)):
            n = len(seq)
            tr, va = int(self.train_end[u]), int(self.val_end[u])
            assert 0 <= tr <= va <= n, (u, tr, va, n)
            assert n >= self.min_seq_len, (u, n)
            assert np.all(np.diff(ts) >= 0), u
            assert np.all(seq >= 1) and np.all(seq <= self.n_items), u
            if 0 < tr < va:
                assert ts[:tr].max() <= ts[tr:va].min(), u
            if va < n and va > 0:
                assert ts[:va].max() <= ts[va:].min(), u


def build_dataset(interactions, min_seq_len=1, ratios="3:2:5"):
    """Group by user, sort chronologically (ties keep file order), filter short users, split."""
    parse_ratios(ratios)
    if not isinstance(ratios, str):
        ratios = ":".join(str(r) for r in ratios)
    vocab = {}
    by_user = {}
    for it in interactions:
        if it.item_id not in vocab:
            vocab[it.item_id] = len(vocab) + 1
        by_user.setdefault(it.user_id, []).append(it)
    users, seqs, stamps, tr, va = [], [], [], [], []
    for user, rows in by_user.items():
        if len(rows) < min_seq_len:
            continue
        rows = sorted(rows, key=lambda r: r.timestamp)
        users.append(user)
        seqs.append(np.array([vocab[r.item_id] for r in rows], dtype=np.int64))
        stamps.append(np.array([r.timestamp for r in rows], dtype=np.int64))
        a, b = split_points(len(rows), ratios)
        tr.append(a)
        va.append(b)
    if not users:
        raise DataError(f"no user has at least {min_seq_len} interactions")
    items = [None] * len(vocab)
    for item, i in vocab.items():
        items[i - 1] = item
    return SequenceDataset(users, seqs, stamps, items, np.array(tr, dtype=np.int64),
                           np.array(va, dtype=np.int64), ratios, int(min_seq_len))


def truncate_context(prefix, max_context):
    """Keep the ``max_context`` most recent items."""
    if max_context < 1:
        raise ValueError("max_context must be >= 1")
    return prefix[-max_context:]


# ------------------------------------------------------------ prepared files

def write_prepared(dataset, path, source=""):
    lines = [DATASET_MAGIC, f"#ratios={dataset.ratios}", f"#min_seq_len={dataset.min_seq_len}",
             f"#source={source}"]
    lines += [f"#{k}={v}" for k, v in summary_rows(dataset)]
    lines.append("[items]")
    lines += dataset.items
    lines.append("[users]")
    for u, seq, ts, a, b in zip(dataset.users, dataset.sequences, dataset.timestamps,
                                dataset.train_end, dataset.val_end):
        lines.append("\t".join([u, str(a), str(b), " ".join(map(str, seq)), " ".join(map(str, ts))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_prepared(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != DATASET_MAGIC:
        raise DataError(f"{path} is not a prepared dataset file")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].partition("=")
        meta[key] = value
        i += 1
    if lines[i] != "[items]":
        raise DataError("missing [items] section", line=i + 1)
    i += 1
    items = []
    while i < len(lines) and lines[i] != "[users]":
        items.append(lines[i])
        i += 1
    users, seqs, stamps, tr, va = [], [], [], [], []
    for j in range(i + 1, len(lines)):
        parts = lines[j].split("\t")
        if len(parts) != 5:
            raise DataError("malformed user record", line=j + 1)
        users.append(parts[0])
        tr.append(int(parts[1]))
        va.append(int(parts[2]))
        seqs.append(np.array(parts[3].split(), dtype=np.int64))
        stamps.append(np.array(parts[4].split(), dtype=np.int64))
    return SequenceDataset(users, seqs, stamps, items, np.array(tr, dtype=np.int64),
                           np.array(va, dtype=np.int64), meta.get("ratios", "3:2:5"),
                           int(meta.get("min_seq_len", 1)))


def is_prepared(path):
    with open(path, encoding="utf-8") as fh:
        return fh.readline().rstrip("\n") == DATASET_MAGIC


def summary_rows(dataset):
    s = dataset.summary()
    return [("users", s["users"]), ("items", s["items"]), ("interactions", s["interactions"]),
            ("avg_seq_len", f"{s['avg_seq_len']:.4f}")]


# ------------------------------------------------------------------ synthetic

@dataclass
class RegimeSpec:
    """Markov item-transition regimes shared by every user.

    ``regimes[r]`` is a row-stochastic ``(n_items + 1) x (n_items + 1)``
    matrix over item indices (row/column 0 unused). Regime ``r + 1`` starts at
    sequence position ``switch_points[r]``.
    """

    n_items: int
    length: int
    regimes: list
    switch_points: list = field(default_factory=list)
    start: np.ndarray = None

    def __post_init__(self):
        if not self.regimes:
            raise ValueError("need at least one regime")
        if len(self.switch_points) != len(self.regimes) - 1:
            raise ValueError("need one switch point per regime change")
        if list(self.switch_points) != sorted(self.switch_points):
            raise ValueError("switch points must be increasing")
        for P in self.regimes:
            if P.shape != (self.n_items + 1, self.n_items + 1):
                raise ValueError(f"transition matrix shape {P.shape}")

    def regime_at(self, t):
        return int(np.searchsorted(self.switch_points, t, side="right"))


def cycle_regime(n_items, order=None):
    """Deterministic cycle ``order[0] -> order[1] -> ... -> order[0]``."""
    order = list(range(1, n_items + 1)) if order is None else list(order)
    P = np.zeros((n_items + 1, n_items + 1))
    for a, b in zip(order, order[1:] + order[:1]):
        P[a, b] = 1.0
    P[0, order[0]] = 1.0
    for i in range(1, n_items + 1):
        if P[i].sum() == 0:
            P[i, order[0]] = 1.0
    return P


def sparse_regime(n_items, rng, branching=3, support=None, concentration=1.0):
    """Each item moves to ``branching`` random items of ``support`` with Dirichlet weights."""
    support = np.arange(1, n_items + 1) if support is None else np.asarray(support)
    P = np.zeros((n_items + 1, n_items + 1))
    for i in range(n_items + 1):
        nxt = rng.choice(support, size=min(branching, len(support)), replace=False)
        P[i, nxt] = rng.dirichlet(np.full(len(nxt), concentration))
    return P


def synth_sequences(seed, users, spec):
    """``(users, length)`` item-index array drawn from the regime chain."""
    rng = np.random.default_rng(seed)
    start = spec.start
    if start is None:
        start = np.full(spec.n_items, 1.0 / spec.n_items)
    cdfs = [np.cumsum(P, axis=1) for P in spec.regimes]
    out = np.zeros((users, spec.length), dtype=np.int64)
    for u in range(users):
        item = int(np.searchsorted(np.cumsum(start), rng.random(), side="right")) + 1
        item = min(item, spec.n_items)
        out[u, 0] = item
        for t in range(1, spec.length):
            cdf = cdfs[spec.regime_at(t)][item]
            item = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            item = min(max(item, 1), spec.n_items)
            out[u, t] = item
    return out


def synth_generate(seed, users, spec, path):
    """Write a deterministic interaction file drawn from ``spec``; returns ``path``."""
    seqs = synth_sequences(seed, users, spec)
    buf = io.StringIO()
    buf.write(",".join(COLUMNS) + "\n")
    base = 1_600_000_000
    for u, seq in enumerate(seqs):
        for t, item in enumerate(seq):
            buf.write(f"u{u},i{item},{base + 86_400 * u + 60 * t}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return path
