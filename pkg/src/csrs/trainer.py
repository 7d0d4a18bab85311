"""Negative sampling, mini-batching and the Adam training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .evaluation import evaluate
from .model import Batch, CsrsModel, ModelConfig

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 100
    batch_size: int = 128
    dropout: float = 0.25
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: int = 256
    epochs: int = 10
    seed: int = 0
    negatives_per_positive: int = 1
    val_fraction: float = 0.05
    val_pool_size: int = 11

    def __post_init__(self):
        for name in ("dim", "batch_size", "hidden", "epochs", "negatives_per_positive"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class TrainTriple:
    desc_row: int
    code_row: int
    label: int


def sample_negatives(positive_rows, corpus_size, rng, per_positive=1):
    """Uniformly drawn mismatched codes: ``per_positive`` per positive row.

    Returns an int array of shape (len(positive_rows), per_positive) whose
    entries never equal the corresponding positive row.
    """
    if corpus_size < 2:
        raise ValueError("negative sampling needs at least two codes")
    pos = np.asarray(positive_rows, dtype=np.int64)
    draws = rng.integers(0, corpus_size - 1, size=(len(pos), per_positive))
    # skip over the positive itself: uniform over the other corpus_size - 1 rows
    return draws + (draws >= pos[:, None])


def make_triples(positive_rows, corpus_size, rng, per_positive=1):
    pos = np.asarray(positive_rows, dtype=np.int64)
    neg = sample_negatives(pos, corpus_size, rng, per_positive)
    triples = [TrainTriple(int(r), int(r), 1) for r in pos]
    for r, negs in zip(pos, neg):
        triples.extend(TrainTriple(int(r), int(c), 0) for c in negs)
    return triples


@dataclass
class TrainResult:
    model: CsrsModel
    history: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    best_val_mrr: float = None
    best_epoch: int = None
    train_rows: np.ndarray = None
    val_rows: np.ndarray = None


def split_validation(n, fraction, rng):
    """Seeded hold-out split; returns (train_rows, val_rows)."""
    order = rng.permutation(n)
    n_val = int(round(n * fraction))
    if fraction > 0 and n_val < 2:
        n_val = 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


class Trainer:
    """Mini-batch trainer; everything random is derived from ``config.seed``."""

    def __init__(self, model, config, corpus, curve_path=None, checkpoint_path=None):
        self.model = model
        self.config = config
        self.corpus = corpus
        self.curve_path = curve_path
        self.checkpoint_path = checkpoint_path
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        self.split_rng, self.sample_rng, self.dropout_rng, self.eval_rng_seed = (
            np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1]),
            np.random.default_rng(seeds[2]), int(seeds[3].generate_state(1)[0]))
        self.optimizer = T.Adam(model.params, config.lr, config.beta1, config.beta2, config.eps)
        self.step = 0

    def _batches(self, train_rows):
        cfg = self.config
        neg = sample_negatives(train_rows, len(self.corpus), self.sample_rng, cfg.negatives_per_positive)
        desc = np.concatenate([train_rows, np.repeat(train_rows, cfg.negatives_per_positive)])
        code = np.concatenate([train_rows, neg.reshape(-1)])
        labels = np.concatenate([np.ones(len(train_rows), np.int64), np.zeros(neg.size, np.int64)])
        order = self.sample_rng.permutation(len(labels))
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            yield Batch.from_corpus(self.corpus, desc[sel], code[sel], labels[sel])

    def train_step(self, batch, batch_id=None):
        self.optimizer.zero_grad()
        loss = self.model.loss(batch, train=True, rng=self.dropout_rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at batch {batch_id}")
        loss.backward()
        self.optimizer.step()
        self.step += 1
        return value

    def _append_curve(self, record):
        if self.curve_path is not None:
            with open(self.curve_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def fit(self, epochs=None, on_epoch=None):
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        train_rows, val_rows = split_validation(len(self.corpus), cfg.val_fraction, self.split_rng)
        if len(train_rows) < 1:
            raise ValueError("empty training set")
        result = TrainResult(self.model, train_rows=train_rows, val_rows=val_rows)
        best_state = None
        for epoch in range(1, epochs + 1):
            losses = []
            for batch_id, batch in enumerate(self._batches(train_rows)):
                value = self.train_step(batch, batch_id=f"epoch{epoch}:{batch_id}")
                losses.append(value)
                record = {"epoch": epoch, "step": self.step, "loss": value, "val_mrr": None}
                result.history.append(record)
                self._append_curve(record)
            mean_loss = float(np.mean(losses))
            result.epoch_losses.append(mean_loss)
            val_mrr = None
            if len(val_rows) >= 2:
                report = evaluate(self.model, self.corpus.subset(val_rows),
                                  pool_size=min(cfg.val_pool_size, len(val_rows)),
                                  seed=self.eval_rng_seed)
                val_mrr = report.mrr
                if result.best_val_mrr is None or val_mrr > result.best_val_mrr:
                    result.best_val_mrr, result.best_epoch = val_mrr, epoch
                    best_state = self.model.state()
                    if self.checkpoint_path is not None:
                        self.model.save(self.checkpoint_path, {"epoch": epoch, "val_mrr": f"{val_mrr:.6f}"})
            summary = {"epoch": epoch, "step": self.step, "loss": mean_loss, "val_mrr": val_mrr,
                       "kind": "epoch"}
            self._append_curve(summary)
            log.info("epoch %d loss %.4f val_mrr %s", epoch, mean_loss, val_mrr)
            if on_epoch is not None and on_epoch(epoch, mean_loss, self) is False:
                break
        if best_state is not None:
            self.model.load_state(best_state)
        elif self.checkpoint_path is not None:
            self.model.save(self.checkpoint_path, {"epoch": epochs})
        return result


def model_config_from(train_config, code_vocab_size, desc_vocab_size, lengths, **kw):
    """Architecture config carrying the shared dim/hidden/dropout of ``train_config``."""
    return ModelConfig(code_vocab_size=code_vocab_size, desc_vocab_size=desc_vocab_size,
                       dim=train_config.dim, hidden=train_config.hidden,
                       dropout=train_config.dropout, lengths=lengths, **kw)


def train(corpus, config, model_config=None, model=None, curve_path=None, checkpoint_path=None,
          on_epoch=None):
    """Train a model on an encoded corpus; returns a :class:`TrainResult`."""
    if len(corpus) < 1:
        raise ValueError("encoded dataset is empty")
    if model is None:
        if model_config is None:
            raise ValueError("either model or model_config is required")
        model = CsrsModel(model_config, seed=config.seed)
    trainer = Trainer(model, config, corpus, curve_path, checkpoint_path)
    return trainer.fit(on_epoch=on_epoch)
