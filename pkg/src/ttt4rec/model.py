"""Full recommender: embedding, residual TTT blocks, prediction head, training loop."""
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .backbone import BACKBONES, ResidualBlock
from .embedding import ItemEmbedding, RopeConfig
from .errors import ConfigError, NumericalError
from .module import Module, normal_init
from .optim import Adam
from .ttt import INNER_KINDS

log = logging.getLogger(__name__)

# fields that change the function the network computes; hashed into checkpoints
ARCH_FIELDS = ("dim", "n_blocks", "backbone", "inner", "inner_hidden", "rope_base",
               "eta_inner", "conv_width", "ffn_mult", "ln_eps", "tie_prediction_matrix")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and optimisation settings.

    The paper-scale run used ``batch_size=2048``; the desk default is 64.
    """

    dim: int = 64
    n_blocks: int = 1
    backbone: str = "transformer"
    inner: str = "mlp"
    inner_hidden: int = 256
    rope_base: float = 1000.0
    eta_inner: float = 0.1
    dropout: float = 0.2
    max_context: int = 50
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    tie_prediction_matrix: bool = False
    targets: str = "all"
    conv_width: int = 4
    ffn_mult: int = 4
    ln_eps: float = 1e-5
    scan_impl: str = "fused"

    def __post_init__(self):
        problems = []
        for name in ("dim", "n_blocks", "inner_hidden", "max_context", "batch_size",
                     "conv_width", "ffn_mult"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.dim % 2:
            problems.append("dim must be even")
        if self.backbone not in BACKBONES:
            problems.append(f"backbone must be one of {BACKBONES}")
        if self.inner not in INNER_KINDS:
            problems.append(f"inner must be one of {INNER_KINDS}")
        if self.targets not in ("all", "last"):
            problems.append("targets must be 'all' or 'last'")
        if self.scan_impl not in ("fused", "graph"):
            problems.append("scan_impl must be 'fused' or 'graph'")
        if self.eta_inner < 0:
            problems.append("eta_inner must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must be in [0, 1)")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.rope_base <= 0 or self.ln_eps <= 0:
            problems.append("rope_base and ln_eps must be positive")
        if problems:
            raise ConfigError(problems)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})

    def digest(self, n_items=None):
        arch = {name: getattr(self, name) for name in ARCH_FIELDS}
        arch["n_items"] = n_items
        blob = json.dumps(arch, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class ForwardResult(NamedTuple):
    hidden: T.Tensor
    inner_losses: list


class TTT4Rec(Module):
    def __init__(self, config, n_items):
        self.config = config
        self.n_items = int(n_items)
        rng = np.random.default_rng(config.seed)
        self.embedding = ItemEmbedding(n_items, config.dim, rng, RopeConfig(config.rope_base),
                                       config.dropout, config.ln_eps)
        self.blocks = [
            ResidualBlock(config.dim, config.backbone, config.inner, config.inner_hidden, rng,
                          config.conv_width, config.ffn_mult, config.ln_eps)
            for _ in range(config.n_blocks)
        ]
        if not config.tie_prediction_matrix:
            self.head = normal_init(rng, (n_items, config.dim))

    def prediction_matrix(self):
        """``M`` with one row per real item (padding excluded)."""
        if self.config.tie_prediction_matrix:
            return self.embedding.table[1:]
        return self.head

    def forward(self, items, training=False, rng=None, eta_inner=None, impl=None):
        """Hidden states ``(B, n, D)`` for left-padded item ids ``(B, n)``; zero at padding."""
        items = np.atleast_2d(np.asarray(items, dtype=np.int64))
        eta = self.config.eta_inner if eta_inner is None else float(eta_inner)
        impl = impl or self.config.scan_impl
        mask = items != 0
        h = self.embedding(items, training, rng)
        losses = []
        for block in self.blocks:
            h, block_losses = block(h, mask, eta, impl)
            losses.append(block_losses)
        h = T.mul(h, mask[..., None].astype(np.float64))
        return ForwardResult(h, losses)

    __call__ = forward

    def logits(self, hidden):
        return predict_scores(hidden, self.prediction_matrix())

    def scores_at(self, items, rows, cols, adapt=True):
        """Logits over all items at the selected ``(row, col)`` positions of a padded batch."""
        with T.no_grad():
            res = self.forward(items, eta_inner=None if adapt else 0.0)
            h = res.hidden.data[np.asarray(rows), np.asarray(cols)]
            return h @ self.prediction_matrix().data.T

    def inner_loss_profile(self, items, adapt=True):
        """Per-block ``(B, n)`` arrays of pre-update inner losses."""
        with T.no_grad():
            return self.forward(items, eta_inner=None if adapt else 0.0).inner_losses


def predict_scores(hidden, head):
    """Logits ``M h``; logit ``i`` belongs to item id ``i + 1``."""
    return T.linear(hidden, head)


def recommend(model, items, top_k=10, adapt=True):
    """Top-k ``(item_index, probability)`` pairs for one sequence of item indices."""
    items = np.asarray(items, dtype=np.int64)[-model.config.max_context:]
    logits = model.scores_at(items[None, :], [0], [len(items) - 1], adapt)[0]
    probs = T.softmax_np(logits)
    k = min(int(top_k), model.n_items)
    order = np.lexsort((np.arange(len(probs)), -probs))[:k]
    return [(int(i) + 1, float(probs[i])) for i in order]


# ------------------------------------------------------------------ training

class TrainingDivergence(NumericalError):
    def __init__(self, batch_index, cause=""):
        self.batch_index = batch_index
        super().__init__(f"training diverged at batch {batch_index}{': ' + cause if cause else ''}")


def training_windows(dataset, max_context):
    """Split each user's training segment into runs of at most ``max_context + 1`` items.

    Windows are cut from the end so the most recent items keep the longest context.
    """
    windows = []
    span = max_context + 1
    for seq, end in zip(dataset.sequences, dataset.train_end):
        seg = np.asarray(seq[:end], dtype=np.int64)
        stop = len(seg)
        while stop >= 2:
            start = max(0, stop - span)
            windows.append(seg[start:stop])
            stop = start + 1 if start > 0 else 0
    return windows


def pad_left(seqs, length=None):
    length = length or max(len(s) for s in seqs)
    out = np.zeros((len(seqs), length), dtype=np.int64)
    for i, s in enumerate(seqs):
        s = np.asarray(s, dtype=np.int64)[-length:]
        out[i, length - len(s):] = s
    return out


def batch_loss(model, windows, training, rng, targets="all"):
    """Masked mean next-item cross-entropy over a batch; returns ``(loss, n_targets)``."""
    inp = pad_left([w[:-1] for w in windows])
    tgt = pad_left([w[1:] for w in windows])
    if targets == "last":
        keep = np.zeros_like(tgt, dtype=bool)
        keep[:, -1] = True
    else:
        keep = tgt != 0
    rows, cols = np.nonzero(keep)
    res = model.forward(inp, training=training, rng=rng)
    h = res.hidden[rows, cols]
    loss = T.softmax_cross_entropy(model.logits(h), tgt[rows, cols] - 1)
    return loss, len(rows)


def train_epoch(model, windows, optimizer, rng, batch_size=None, targets=None):
    """One shuffled pass; returns the target-weighted mean training loss."""
    cfg = model.config
    batch_size = batch_size or cfg.batch_size
    targets = targets or cfg.targets
    params = model.parameters()
    order = rng.permutation(len(windows))
    total, count = 0.0, 0
    for b, lo in enumerate(range(0, len(order), batch_size)):
        batch = [windows[i] for i in order[lo:lo + batch_size]]
        model.zero_grad()
        try:
            loss, n = batch_loss(model, batch, True, rng, targets)
        except NumericalError as exc:
            raise TrainingDivergence(b, str(exc)) from exc
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergence(b, "non-finite loss")
        T.backward(loss, params)
        optimizer.step()
        total += value * n
        count += n
    return total / max(count, 1)


def fit(model, dataset, epochs=None, rng=None, on_epoch=None):
    """Train for ``epochs`` epochs; returns the per-epoch mean losses."""
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    rng = rng if rng is not None else np.random.default_rng(cfg.seed + 1)
    windows = training_windows(dataset, cfg.max_context)
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    history = []
    for epoch in range(epochs):
        loss = train_epoch(model, windows, optimizer, rng)
        history.append(loss)
        log.info("epoch %d loss %.6f", epoch + 1, loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, loss)
    return history


def gradient_norms(model, windows, rng=None, targets="all"):
    """L2 norm of each parameter's gradient on one batch (dead-parameter report)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    params = dict(model.named_parameters())
    model.zero_grad()
    loss, _ = batch_loss(model, windows, False, rng, targets)
    T.backward(loss, list(params.values()))
    return {name: float(np.linalg.norm(p.grad)) for name, p in params.items()}
