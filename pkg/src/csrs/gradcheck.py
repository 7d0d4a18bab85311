"""Finite-difference checks of the model's reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .corpus import LengthConfig
from .model import Batch, CsrsModel, ModelConfig

# Central differences at h=1e-5 on an O(1) float64 loss carry roughly 1e-11
# of absolute roundoff, so entries smaller than this are compared in absolute
# terms (error / floor) instead of relative ones.
REL_ERR_FLOOR = 1e-5


def relative_error(analytic, numeric, floor=REL_ERR_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _random_ids(rng, n, length, vocab):
    out = np.zeros((n, length), dtype=np.int64)
    for row in out:
        k = int(rng.integers(1, length + 1))
        row[:k] = rng.choice(np.arange(2, vocab), size=k, replace=False)
    return out


def random_instance(seed, variant_config=None, batch=3, weight_scale=0.7):
    """A small float64 model with randomised weights and a random padded batch.

    Weights are redrawn at ``weight_scale`` so that no parameter group sits in
    a regime where its gradient is too small to compare against finite
    differences.
    """
    rng = np.random.default_rng(seed)
    config = variant_config or ModelConfig(
        code_vocab_size=20, desc_vocab_size=15, dim=4, hidden=6,
        lengths=LengthConfig(description=4, name=2, api=3, tokens=4), dtype="float64", dropout=0.25)
    model = CsrsModel(config, seed=seed)
    for p in model.params.values():
        p.data[...] = rng.normal(0.0, weight_scale, p.shape)
    L = config.lengths
    data = Batch(_random_ids(rng, batch, L.description, config.desc_vocab_size),
                 _random_ids(rng, batch, L.name, config.code_vocab_size),
                 _random_ids(rng, batch, L.api, config.code_vocab_size),
                 _random_ids(rng, batch, L.tokens, config.code_vocab_size),
                 rng.integers(0, 2, size=batch))
    return model, data, rng


def check_gradients(model, batch, rng, entries=8, h=1e-5, dropout_seed=0):
    """Largest relative error per parameter group.

    For each group, ``entries`` coordinates with nonzero analytic gradient plus
    two arbitrary coordinates are perturbed by central differences. Dropout
    stays on with a mask that is fixed across evaluations.
    """
    def loss():
        return model.loss(batch, train=True, rng=np.random.default_rng(dropout_seed))

    for p in model.params.values():
        p.grad = None
    loss().backward()
    worst = {}
    for name, p in model.params.items():
        grad = p.grad.reshape(-1)
        nonzero = np.flatnonzero(grad)
        picks = list(rng.choice(nonzero, size=min(entries, len(nonzero)), replace=False))
        picks += list(rng.choice(grad.size, size=min(2, grad.size), replace=False))
        numeric = T.numerical_grad(lambda: loss().data, p.data, h=h, index=picks)
        worst[name] = float(np.max(relative_error(grad[picks], numeric)))
    return worst


def gradient_suite(seeds=range(20), **kw):
    """Worst relative error per parameter group over several random instances."""
    worst = {}
    for seed in seeds:
        model, batch, rng = random_instance(seed)
        for name, err in check_gradients(model, batch, rng, **kw).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
