"""Full-ranking next-item evaluation: HR@K and NDCG@K."""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import truncate_context

DEFAULT_CUTOFFS = (10, 50)


def rank_of_target(logits, target):
    """1-based rank; items tied with the target count as ranked ahead of it."""
    logits = np.asarray(logits)
    return int(np.count_nonzero(logits >= logits[target]))


def ranks_of_targets(scores, targets):
    scores = np.asarray(scores)
    t = np.asarray(targets, dtype=np.int64)
    own = scores[np.arange(len(t)), t]
    return np.count_nonzero(scores >= own[:, None], axis=1).astype(np.int64)


def metrics_at_k(rank, k):
    """``(hit, ndcg)`` for a single ground-truth item at ``rank``."""
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    if rank > k:
        return 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1)


@dataclass
class EvalReport:
    segment: str
    cutoffs: tuple
    hr: dict
    ndcg: dict
    instances: int
    ranks: np.ndarray = field(repr=False, default=None)
    users: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_ranks(cls, segment, ranks, cutoffs=DEFAULT_CUTOFFS, users=None):
        ranks = np.asarray(ranks, dtype=np.int64)
        if ranks.size == 0:
            raise ValueError(f"segment {segment!r} has no evaluation instances")
        uniq, inverse = np.unique(ranks, return_inverse=True)
        hr, ndcg = {}, {}
        for k in cutoffs:
            table = np.array([metrics_at_k(int(r), k) for r in uniq]).reshape(-1, 2)
            hr[k] = math.fsum(table[inverse, 0]) / ranks.size
            ndcg[k] = math.fsum(table[inverse, 1]) / ranks.size
        return cls(segment, tuple(cutoffs), hr, ndcg, int(ranks.size), ranks, users)

    @classmethod
    def merge(cls, reports):
        """Combine shard reports by pooling their instances."""
        reports = list(reports)
        ranks = np.concatenate([r.ranks for r in reports])
        users = None
        if all(r.users is not None for r in reports):
            users = np.concatenate([r.users for r in reports])
        return cls.from_ranks(reports[0].segment, ranks, reports[0].cutoffs, users)

    def per_user(self):
        """``{user_index: EvalReport}`` (needs ``users``)."""
        return {int(u): EvalReport.from_ranks(self.segment, self.ranks[self.users == u], self.cutoffs)
                for u in np.unique(self.users)}

    def rows(self):
        for k in self.cutoffs:
            yield (self.segment, "HR", k, self.hr[k], self.instances)
        for k in self.cutoffs:
            yield (self.segment, "NDCG", k, self.ndcg[k], self.instances)

    def write_csv(self, fh, comments=()):
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["segment", "metric", "cutoff", "value", "instances"])
        for seg, metric, k, value, n in self.rows():
            writer.writerow([seg, metric, k, f"{value:.10f}", n])


def build_instances(dataset, segment, max_context):
    """Scoring windows for every position of ``segment``.

    Positions whose whole prefix fits in the context share one window per
    user (the model is causal, so the prefix output at ``p - 1`` is the same);
    longer prefixes each get their own ``max_context`` window.
    Returns a list of ``(window, [(col, target, user)])``.
    """
    out = []
    for u, seq in enumerate(dataset.sequences):
        start, end = dataset.segment_bounds(u, segment)
        positions = range(max(start, 1), end)
        short = [p for p in positions if p <= max_context]
        if short:
            window = seq[:max(short)]
            out.append((window, [(p - 1, int(seq[p]), u) for p in short]))
        for p in positions:
            if p > max_context:
                window = truncate_context(seq[:p], max_context)
                out.append((window, [(len(window) - 1, int(seq[p]), u)]))
    return out


def evaluate(model, dataset, segment="test", cutoffs=DEFAULT_CUTOFFS, adapt_at_eval=True,
             batch_size=128, max_context=None):
    """Rank every segment position against all items.

    ``model`` needs ``scores_at(items, rows, cols, adapt)`` returning logits
    (item id ``i + 1`` at column ``i``). ``adapt_at_eval=False`` runs the
    frozen ablation (inner learning rate forced to zero).
    """
    if max_context is None:
        max_context = model.config.max_context
    instances = build_instances(dataset, segment, max_context)
    if not instances:
        raise ValueError(f"segment {segment!r} has no evaluation instances")
    shards = []
    for lo in range(0, len(instances), batch_size):
        chunk = instances[lo:lo + batch_size]
        width = max(len(w) for w, _ in chunk)
        items = np.zeros((len(chunk), width), dtype=np.int64)
        rows, cols, targets, users = [], [], [], []
        for b, (window, queries) in enumerate(chunk):
            offset = width - len(window)
            items[b, offset:] = window
            for col, target, u in queries:
                rows.append(b)
                cols.append(offset + col)
                targets.append(target - 1)
                users.append(u)
        scores = model.scores_at(items, rows, cols, adapt_at_eval)
        shards.append(EvalReport.from_ranks(segment, ranks_of_targets(scores, targets), cutoffs,
                                            np.asarray(users)))
    return EvalReport.merge(shards)
