"""Brute-force cosine retrieval and nDCG@k evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterModel, transform
from .data import EmbeddingTable, RelevanceSet
from .errors import DataError
from .objectives import cosine_scores


@dataclass
class RankedList:
    query_id: str
    entries: list[tuple[str, float]]  # (corpus_id, score), descending score


@dataclass
class RetrievalReport:
    k: int
    per_query_ndcg: dict[str, float]
    mean_ndcg: float
    n_evaluated: int
    n_skipped: int = 0  # queries with no positive grade, excluded from the mean

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "mean_ndcg": self.mean_ndcg,
                "n_evaluated": self.n_evaluated,
                "n_skipped": self.n_skipped,
                "per_query_ndcg": self.per_query_ndcg,
            },
            sort_keys=True,
        )

    def to_text(self) -> str:
        lines = [f"nDCG@{self.k} over {self.n_evaluated} queries "
                 f"({self.n_skipped} skipped, no positives)"]
        width = max((len(q) for q in self.per_query_ndcg), default=0)
        for qid in sorted(self.per_query_ndcg):
            lines.append(f"  {qid:<{width}}  {self.per_query_ndcg[qid]:.5f}")
        lines.append(f"  mean nDCG@{self.k}: {self.mean_ndcg:.5f}")
        return "\n".join(lines)


def score_all(
    q_table: EmbeddingTable,
    c_table: EmbeddingTable,
    model: AdapterModel | None = None,
    force: bool = False,
) -> np.ndarray:
    """Dense (n_q, n_c) cosine score matrix, optionally on adapted embeddings.

    The corpus is transformed once and reused for every query.
    """
    if q_table.dim != c_table.dim:
        raise DataError(
            f"query dim {q_table.dim} != corpus dim {c_table.dim}"
        )
    q_vecs = q_table.vectors
    c_vecs = c_table.vectors
    if model is not None:
        model.check_tag(q_table, force)
        model.check_tag(c_table, force)
        q_vecs = transform(model, q_vecs, "query")
        c_vecs = transform(model, c_vecs, "corpus")
    return cosine_scores(q_vecs, c_vecs)


def rank_candidates(
    corpus_ids: list[str], scores: np.ndarray, k: int | None = None
) -> list[tuple[str, float]]:
    """Order candidates by descending score, ties broken by ascending id."""
    ids = np.asarray(corpus_ids)
    order = np.lexsort((ids, -scores))
    if k is not None:
        order = order[:k]
    return [(str(ids[i]), float(scores[i])) for i in order]


def ranked_lists(
    q_table: EmbeddingTable,
    c_table: EmbeddingTable,
    model: AdapterModel | None = None,
    k: int | None = None,
    force: bool = False,
) -> list[RankedList]:
    scores = score_all(q_table, c_table, model, force)
    cids = c_table.ids
    return [
        RankedList(qid, rank_candidates(cids, scores[i], k))
        for i, qid in enumerate(q_table.ids)
    ]


def _gain(y: float, mode: str) -> float:
    if mode == "standard":
        return 2.0**y - 1.0
    if mode == "paper-literal":
        return 2.0**y
    raise ValueError(f"unknown gain mode: {mode!r}")


def dcg_at_k(grades_in_rank_order: list[float], k: int, gain: str = "standard") -> float:
    return sum(
        _gain(y, gain) / math.log2(rank + 2)
        for rank, y in enumerate(grades_in_rank_order[:k])
    )


def ndcg_at_k(
    ranked: RankedList | list[tuple[str, float]],
    grades: dict[str, float],
    k: int,
    gain: str = "standard",
) -> float:
    """nDCG truncated at rank k for one query.

    grades maps corpus_id -> relevance; missing ids are grade 0. Undefined
    (raises) when the query has no positive grade.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    entries = ranked.entries if isinstance(ranked, RankedList) else ranked
    positives = sorted((y for y in grades.values() if y > 0), reverse=True)
    if not positives:
        raise DataError("nDCG undefined for a query with no positive grade")
    ranked_grades = [grades.get(cid, 0.0) for cid, _ in entries]
    ideal = positives
    if gain == "paper-literal":
        # zero-grade items carry gain 2^0 = 1, so the ideal list pads with
        # zeros up to what the realized ranking could retrieve
        ideal_len = min(k, max(len(entries), len(positives)))
        ideal = positives + [0.0] * max(0, ideal_len - len(positives))
    dcg = dcg_at_k(ranked_grades, k, gain)
    idcg = dcg_at_k(ideal, k, gain)
    return dcg / idcg


def evaluate(
    q_table: EmbeddingTable,
    c_table: EmbeddingTable,
    rels: RelevanceSet,
    model: AdapterModel | None = None,
    k: int = 10,
    gain: str = "standard",
    force: bool = False,
) -> RetrievalReport:
    """Mean nDCG@k over every query in q_table with at least one positive."""
    scores = score_all(q_table, c_table, model, force)
    cids = c_table.ids
    per_query: dict[str, float] = {}
    n_skipped = 0
    for i, qid in enumerate(q_table.ids):
        grades = rels.positives_for(qid)
        if not grades:
            n_skipped += 1
            continue
        ranked = rank_candidates(cids, scores[i], k)
        per_query[qid] = ndcg_at_k(ranked, grades, k, gain)
    if not per_query:
        raise DataError("no evaluable query: every query lacks positive grades")
    mean = float(np.mean(list(per_query.values())))
    return RetrievalReport(
        k=k,
        per_query_ndcg=per_query,
        mean_ndcg=mean,
        n_evaluated=len(per_query),
        n_skipped=n_skipped,
    )
