"""Ranked retrieval, Recall@k / MRR / NDCG and the ablation harness."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corpus import EncodedCorpus
from .model import VARIANTS, CsrsModel, variant_config

METRIC_COLUMNS = ("recall@1", "recall@5", "recall@10", "mrr", "ndcg")


def _rank_array(ranks):
    """Float ranks with absent entries (None, 0, nan) mapped to +inf."""
    out = np.array([math.inf if r is None else float(r) for r in ranks], dtype=np.float64)
    out[np.isnan(out) | (out <= 0)] = math.inf
    if out.size == 0:
        raise ValueError("metrics need at least one query")
    return out


def recall_at_k(ranks, k):
    """Fraction of queries whose ground truth sits within the top ``k``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    r = _rank_array(ranks)
    return float(np.mean(r <= k))


def reciprocal_ranks(ranks, k=10):
    r = _rank_array(ranks)
    return np.where(r <= k, 1.0 / r, 0.0)


def mrr(ranks, k=10):
    """Mean reciprocal rank; ranks beyond ``k`` contribute 0."""
    return float(np.mean(reciprocal_ranks(ranks, k)))


def ndcg(ranks, k=10):
    """Mean NDCG@k with a single relevant item per query (ideal DCG = 1)."""
    r = _rank_array(ranks)
    gains = np.where(r <= k, 1.0 / np.log2(np.where(np.isfinite(r), r, 1.0) + 1.0), 0.0)
    return float(np.mean(gains))


@dataclass
class EvalReport:
    ranks: list
    pool_size: int
    query_ids: list = field(default_factory=list)
    label: str = "CSRS"

    @property
    def query_count(self):
        return len(self.ranks)

    @property
    def recall(self):
        return {k: recall_at_k(self.ranks, k) for k in (1, 5, 10)}

    @property
    def mrr(self):
        return mrr(self.ranks, 10)

    @property
    def ndcg(self):
        return ndcg(self.ranks, 10)

    def metrics(self):
        rec = self.recall
        return {"recall@1": rec[1], "recall@5": rec[5], "recall@10": rec[10],
                "mrr": self.mrr, "ndcg": self.ndcg}

    def record(self):
        out = {"model": self.label, **{k: round(v, 6) for k, v in self.metrics().items()},
               "pool_size": self.pool_size, "query_count": self.query_count}
        return json.dumps(out, sort_keys=False)

    def table(self):
        return format_table([self])


def format_table(reports):
    """Aligned text table with one row per report (Recall@1/5/10, MRR, NDCG)."""
    header = ["Model", "Recall@1", "Recall@5", "Recall@10", "MRR", "NDCG"]
    rows = [[r.label] + [f"{r.metrics()[c]:.3f}" for c in METRIC_COLUMNS] for r in reports]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("-" * len(lines[0]))
    for row in rows:
        lines.append("  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

def order_by_score(scores):
    """Indices by descending score; equal scores keep their input order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def rank_pool(model, corpus, query_row, candidate_rows, chunk=256):
    """Rank ``candidate_rows`` of ``corpus`` against the description in ``query_row``.

    Returns ``(ordered_rows, ordered_scores)``.
    """
    candidate_rows = np.asarray(candidate_rows, dtype=np.int64)
    if candidate_rows.size == 0:
        raise ValueError("empty candidate pool")
    scores = model.score_matrix(corpus, np.full(len(candidate_rows), query_row), candidate_rows, chunk)
    order = order_by_score(scores)
    return candidate_rows[order], scores[order]


def build_pools(n, pool_size, seed):
    """One pool per query: its ground truth plus ``pool_size - 1`` distinct distractors.

    ``pool_size=None`` (or >= n) uses the whole corpus. The ground truth is
    placed at a seeded random position so that ties cannot favour it.
    """
    rng = np.random.default_rng(seed)
    pools = []
    for q in range(n):
        if pool_size is None or pool_size >= n:
            pool = rng.permutation(n)
        else:
            others = rng.choice(n - 1, size=pool_size - 1, replace=False)
            others = others + (others >= q)
            pool = np.append(others, q)
            pool = pool[rng.permutation(len(pool))]
        pools.append(pool)
    return pools


def _rank_of_truth(scores, pool, truth):
    order = order_by_score(scores)
    return int(np.flatnonzero(pool[order] == truth)[0]) + 1


def evaluate(model, corpus, pool_size=None, seed=0, workers=1, chunk=256, label="CSRS",
             pools=None):
    """Rank every query's ground truth within its pool and build an :class:`EvalReport`.

    Scoring is split into fixed-size chunks independent of ``workers``, so the
    result is identical for any thread count.
    """
    n = len(corpus)
    if n == 0:
        raise ValueError("cannot evaluate an empty corpus")
    if pools is None:
        pools = build_pools(n, pool_size, seed)
    desc_rows = np.concatenate([np.full(len(p), q) for q, p in enumerate(pools)])
    code_rows = np.concatenate(pools)
    bounds = list(range(0, len(desc_rows), chunk * 8)) + [len(desc_rows)]
    spans = list(zip(bounds[:-1], bounds[1:]))

    def run(span):
        lo, hi = span
        return model.score_matrix(corpus, desc_rows[lo:hi], code_rows[lo:hi], chunk)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, spans))
    else:
        parts = [run(s) for s in spans]
    scores = np.concatenate(parts)
    ranks, offset = [], 0
    for q, p in enumerate(pools):
        ranks.append(_rank_of_truth(scores[offset:offset + len(p)], p, q))
        offset += len(p)
    size = len(pools[0]) if pools else 0
    return EvalReport(ranks=ranks, pool_size=size, query_ids=list(corpus.ids), label=label)


def search(model, corpus, query_ids, top_k=10, workers=1, chunk=256):
    """Rank every code of ``corpus`` against one encoded query.

    Returns ``(rows, scores)`` for the best ``top_k`` codes (all of them when
    ``top_k`` exceeds the corpus size).
    """
    query_ids = np.asarray(query_ids, dtype=np.int64)
    n = len(corpus)
    if n == 0:
        raise ValueError("cannot search an empty corpus")
    queries = EncodedCorpus(list(corpus.ids), np.tile(query_ids, (n, 1)), corpus.name, corpus.api,
                            corpus.tokens)
    bounds = list(range(0, n, chunk * 8)) + [n]
    spans = list(zip(bounds[:-1], bounds[1:]))

    def run(span):
        lo, hi = span
        return model.score_matrix(queries, np.zeros(hi - lo, np.int64), np.arange(lo, hi), chunk)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = np.concatenate(list(pool.map(run, spans)))
    else:
        scores = np.concatenate([run(s) for s in spans])
    order = order_by_score(scores)[:top_k]
    return order, scores[order]


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_LABELS = {
    "full": "CSRS", "RM": "CSRS(RM)", "SM": "CSRS(SM)", "M": "CSRS(M)", "A": "CSRS(A)",
    "T": "CSRS(T)", "Conv1": "CSRS(Conv1)", "Conv2": "CSRS(Conv2)", "Conv3": "CSRS(Conv3)",
}


@dataclass
class AblationRun:
    variant: str
    report: EvalReport
    model: CsrsModel
    train_result: object


def run_ablation(variant, train_corpus, base_config, train_config, eval_corpus=None,
                 pool_size=11, eval_seed=0, curve_path=None, checkpoint_path=None, workers=1):
    """Train the named variant under ``train_config`` and evaluate it.

    ``eval_corpus`` defaults to the training corpus (desk-scale protocol).
    """
    from .trainer import train

    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    config = variant_config(base_config, variant)
    result = train(train_corpus, train_config, model_config=config, curve_path=curve_path,
                   checkpoint_path=checkpoint_path)
    target = train_corpus if eval_corpus is None else eval_corpus
    report = evaluate(result.model, target, pool_size=pool_size, seed=eval_seed,
                      workers=workers, label=ABLATION_LABELS[variant])
    return AblationRun(variant, report, result.model, result)


def ablation_table(runs):
    return format_table([r.report for r in runs])


__all__ = ["recall_at_k", "mrr", "ndcg", "reciprocal_ranks", "EvalReport", "format_table",
           "order_by_score", "rank_pool", "search", "build_pools", "evaluate", "run_ablation",
           "ablation_table", "ABLATION_LABELS", "AblationRun"]
