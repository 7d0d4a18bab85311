import json
import math

import numpy as np
import pytest

from csrs import tensor as T
from csrs.corpus import LengthConfig
from csrs.model import Batch, CsrsModel, load_checkpoint
from csrs.synthetic import lexical_corpus
from csrs.trainer import (
    TrainConfig, Trainer, TrainingError, make_triples, model_config_from, sample_negatives, train,
)

SMALL = LengthConfig(description=6, name=2, api=3, tokens=8)


@pytest.fixture(scope="module")
def corpus_bits():
    _, cv, dv, corpus = lexical_corpus(40, seed=2, lengths=SMALL)
    return cv, dv, corpus


def tiny(corpus_bits, **kw):
    cv, dv, corpus = corpus_bits
    base = dict(dim=8, hidden=12, batch_size=16, epochs=2, seed=5, lr=1e-3)
    base.update(kw)
    tc = TrainConfig(**base)
    return tc, model_config_from(tc, len(cv), len(dv), SMALL)


class TestNegativeSampling:
    def test_never_the_positive_and_ratio(self):
        rng = np.random.default_rng(0)
        pos = np.arange(50)
        neg = sample_negatives(pos, 50, rng, per_positive=3)
        assert neg.shape == (50, 3)
        assert not np.any(neg == pos[:, None])
        triples = make_triples(pos, 50, rng)
        labels = [t.label for t in triples]
        assert labels.count(1) == labels.count(0) == 50

    def test_uniform_over_other_codes(self):
        rng = np.random.default_rng(1)
        draws = sample_negatives(np.full(10_000, 4), 10, rng).ravel()
        counts = np.bincount(draws, minlength=10)
        assert counts[4] == 0
        freq = np.delete(counts, 4) / draws.size
        sigma = math.sqrt((1 / 9) * (8 / 9) / draws.size)
        assert np.all(np.abs(freq - 1 / 9) < 3 * sigma)
        chi2 = float(np.sum((np.delete(counts, 4) - draws.size / 9) ** 2 / (draws.size / 9)))
        assert chi2 < 26.1  # chi-square(8) 0.999 quantile

    def test_tiny_corpus_rejected(self):
        with pytest.raises(ValueError):
            sample_negatives([0], 1, np.random.default_rng(0))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"lr": 0}, {"batch_size": 0}, {"dropout": 1.0}, {"beta1": 1.0},
                                    {"val_fraction": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTrainer:
    def test_initial_loss_near_log2(self, corpus_bits):
        cv, dv, corpus = corpus_bits
        tc = TrainConfig(epochs=1, seed=0)
        model = CsrsModel(model_config_from(tc, len(cv), len(dv), SMALL), seed=0)
        rows = np.arange(len(corpus))
        batch = Batch.from_corpus(corpus, np.concatenate([rows, rows]),
                                  np.concatenate([rows, np.roll(rows, 1)]),
                                  np.r_[np.ones(len(rows)), np.zeros(len(rows))].astype(np.int64))
        with T.no_grad():
            loss = float(model.loss(batch, train=False).data)
        assert abs(loss - math.log(2)) < 0.1

    def test_optimizer_covers_every_parameter(self, corpus_bits):
        tc, mc = tiny(corpus_bits)
        model = CsrsModel(mc, seed=0)
        trainer = Trainer(model, tc, corpus_bits[2])
        assert set(trainer.optimizer.params) == set(model.params)
        total = sum(p.data.size for p in trainer.optimizer.params.values())
        assert total == model.parameter_count

    def test_same_seed_identical_curves_and_weights(self, corpus_bits, tmp_path):
        tc, mc = tiny(corpus_bits)
        runs = []
        for k in range(2):
            curve = tmp_path / f"curve{k}.jsonl"
            ckpt = tmp_path / f"m{k}.ckpt"
            train(corpus_bits[2], tc, model_config=mc, curve_path=curve, checkpoint_path=ckpt)
            runs.append((curve.read_bytes(), ckpt.read_bytes()))
        assert runs[0] == runs[1]

    def test_different_seed_differs(self, corpus_bits):
        tc, mc = tiny(corpus_bits, epochs=1)
        a = train(corpus_bits[2], tc, model_config=mc)
        tc2, _ = tiny(corpus_bits, epochs=1, seed=6)
        b = train(corpus_bits[2], tc2, model_config=mc)
        assert a.epoch_losses != b.epoch_losses

    def test_curve_records_and_checkpoint(self, corpus_bits, tmp_path):
        tc, mc = tiny(corpus_bits, val_fraction=0.25)
        curve, ckpt = tmp_path / "c.jsonl", tmp_path / "m.ckpt"
        result = train(corpus_bits[2], tc, model_config=mc, curve_path=curve, checkpoint_path=ckpt)
        records = [json.loads(line) for line in curve.read_text().splitlines()]
        epochs = [r for r in records if r.get("kind") == "epoch"]
        assert [r["epoch"] for r in epochs] == [1, 2]
        assert all(r["val_mrr"] is not None for r in epochs)
        assert len(result.val_rows) == 10 and not set(result.val_rows) & set(result.train_rows)
        loaded = load_checkpoint(ckpt, expect=mc)
        assert loaded.parameter_count == result.model.parameter_count

    def test_loss_decreases(self, corpus_bits):
        tc, mc = tiny(corpus_bits, epochs=20, lr=1e-2, dropout=0.0, val_fraction=0.0)
        result = train(corpus_bits[2], tc, model_config=mc)
        assert result.epoch_losses[-1] < result.epoch_losses[0] - 0.05

    def test_non_finite_loss_raises(self, corpus_bits):
        tc, mc = tiny(corpus_bits, epochs=1)
        model = CsrsModel(mc, seed=0)
        model.params["mlp_w2"].data[...] = np.nan
        with pytest.raises(TrainingError, match="batch"):
            train(corpus_bits[2], tc, model=model)

    def test_callback_can_stop(self, corpus_bits):
        tc, mc = tiny(corpus_bits, epochs=5)
        result = train(corpus_bits[2], tc, model_config=mc, on_epoch=lambda e, loss, t: e < 2)
        assert len(result.epoch_losses) == 2

    def test_empty_corpus(self, corpus_bits):
        tc, mc = tiny(corpus_bits)
        with pytest.raises(ValueError):
            train(corpus_bits[2].subset([]), tc, model_config=mc)
