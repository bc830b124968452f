"""Loss functions over batch score/grade matrices, with analytic gradients.

Gradients here are taken with respect to score matrices and embedding
matrices only; the trainer chains them through the adapter networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-12
# Temperature for the sigmoid / contrastive alternative losses.
VARIANT_TEMPERATURE = 0.05

RANK_VARIANTS = ("search-adaptor", "sigmoid-ce", "contrastive", "softmax-ce", "ranknet")


@dataclass
class BatchScores:
    """Dense cosine scores and grades over a (query batch, candidate set)."""

    scores: np.ndarray  # (n_q, n_c)
    grades: np.ndarray  # (n_q, n_c), >= 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.grades = np.asarray(self.grades, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape != self.grades.shape:
            raise ValueError(
                f"scores {self.scores.shape} and grades {self.grades.shape} disagree"
            )
        if np.any(self.grades < 0):
            raise ValueError("grades must be non-negative")

    @property
    def n_q(self) -> int:
        return self.scores.shape[0]

    @property
    def n_c(self) -> int:
        return self.scores.shape[1]


@dataclass
class LossWeights:
    alpha: float = 0.1  # recovery weight
    beta: float = 0.01  # prediction weight

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def softplus(x: np.ndarray) -> np.ndarray:
    """Overflow-safe log(1 + e^x)."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < NORM_EPS or nv < NORM_EPS:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_scores(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity matrix, (n_q, n_c), float64.

    Rows/columns with near-zero norm score 0 against everything.
    """
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1)
    cn = np.linalg.norm(c, axis=1)
    q_unit = q / np.maximum(qn, NORM_EPS)[:, None]
    c_unit = c / np.maximum(cn, NORM_EPS)[:, None]
    scores = q_unit @ c_unit.T
    scores[qn < NORM_EPS, :] = 0.0
    scores[:, cn < NORM_EPS] = 0.0
    return np.clip(scores, -1.0, 1.0)


def cosine_scores_backward(
    q: np.ndarray, c: np.ndarray, grad_scores: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad_scores * cosine_scores(q, c)) w.r.t. q and c."""
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    g = np.asarray(grad_scores, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1)
    cn = np.linalg.norm(c, axis=1)
    q_deg = qn < NORM_EPS
    c_deg = cn < NORM_EPS
    qn_safe = np.maximum(qn, NORM_EPS)
    cn_safe = np.maximum(cn, NORM_EPS)
    q_unit = q / qn_safe[:, None]
    c_unit = c / cn_safe[:, None]
    scores = q_unit @ c_unit.T
    g = g.copy()
    g[q_deg, :] = 0.0
    g[:, c_deg] = 0.0
    # d s_ij / d q_i = (c_unit_j - s_ij * q_unit_i) / |q_i|
    grad_q = (g @ c_unit - (g * scores).sum(axis=1, keepdims=True) * q_unit) / qn_safe[:, None]
    grad_c = (g.T @ q_unit - (g * scores).sum(axis=0)[:, None] * c_unit) / cn_safe[:, None]
    grad_q[q_deg, :] = 0.0
    grad_c[c_deg, :] = 0.0
    return grad_q, grad_c


def ranking_loss(batch: BatchScores) -> tuple[float, np.ndarray]:
    """Grade-gap weighted pairwise softplus loss.

    For each query, every candidate pair (j, k) with y_j > y_k contributes
    (y_j - y_k) * softplus(s_k - s_j). Returns the summed loss and its
    gradient w.r.t. the score matrix.
    """
    s, y = batch.scores, batch.grades
    total = 0.0
    grad = np.zeros_like(s)
    for i in range(batch.n_q):
        yi, si = y[i], s[i]
        y_min = yi.min() if yi.size else 0.0
        rows = np.nonzero(yi > y_min)[0]
        if rows.size == 0:
            continue
        # (j, k) pairs restricted to rows j that can out-grade someone.
        gap = yi[rows, None] - yi[None, :]
        active = gap > 0
        if not np.any(active):
            continue
        margin = si[None, :] - si[rows, None]  # s_k - s_j
        w = np.where(active, gap, 0.0)
        total += float(np.sum(w * softplus(margin)))
        g = w * sigmoid(margin)  # d/d margin
        grad[i] += g.sum(axis=0)  # + d margin / d s_k
        grad[i, rows] -= g.sum(axis=1)  # - d margin / d s_j
    return total, grad


def ranknet_loss(batch: BatchScores) -> tuple[float, np.ndarray]:
    """Pairwise softplus without the grade-gap weight."""
    s, y = batch.scores, batch.grades
    total = 0.0
    grad = np.zeros_like(s)
    for i in range(batch.n_q):
        yi, si = y[i], s[i]
        y_min = yi.min() if yi.size else 0.0
        rows = np.nonzero(yi > y_min)[0]
        if rows.size == 0:
            continue
        active = (yi[rows, None] - yi[None, :]) > 0
        if not np.any(active):
            continue
        margin = si[None, :] - si[rows, None]
        w = active.astype(np.float64)
        total += float(np.sum(w * softplus(margin)))
        g = w * sigmoid(margin)
        grad[i] += g.sum(axis=0)
        grad[i, rows] -= g.sum(axis=1)
    return total, grad


def sigmoid_ce_loss(batch: BatchScores) -> tuple[float, np.ndarray]:
    """Pointwise binary cross-entropy on sigmoid(s / tau) vs binarized grades."""
    s = batch.scores / VARIANT_TEMPERATURE
    labels = (batch.grades > 0).astype(np.float64)
    # BCE with logits: softplus(s) - label * s, summed.
    total = float(np.sum(softplus(s) - labels * s))
    grad = (sigmoid(s) - labels) / VARIANT_TEMPERATURE
    return total, grad


def contrastive_loss(batch: BatchScores) -> tuple[float, np.ndarray]:
    """Per-query softmax cross-entropy with positives as targets (temp 0.05)."""
    s = batch.scores / VARIANT_TEMPERATURE
    y = batch.grades
    total = 0.0
    grad = np.zeros_like(s)
    for i in range(batch.n_q):
        pos_mass = y[i].sum()
        if pos_mass <= 0:
            continue
        target = y[i] / pos_mass
        z = s[i] - s[i].max()
        log_probs = z - np.log(np.sum(np.exp(z)))
        total += float(-np.sum(target * log_probs))
        grad[i] = (np.exp(log_probs) - target) / VARIANT_TEMPERATURE
    return total, grad


def softmax_ce_loss(batch: BatchScores) -> tuple[float, np.ndarray]:
    """Listwise cross-entropy between the grade distribution and score softmax."""
    s = batch.scores
    y = batch.grades
    total = 0.0
    grad = np.zeros_like(s)
    for i in range(batch.n_q):
        pos_mass = y[i].sum()
        if pos_mass <= 0:
            continue
        target = y[i] / pos_mass
        z = s[i] - s[i].max()
        log_probs = z - np.log(np.sum(np.exp(z)))
        total += float(-np.sum(target * log_probs))
        grad[i] = np.exp(log_probs) - target
    return total, grad


_RANK_LOSSES = {
    "search-adaptor": ranking_loss,
    "ranknet": ranknet_loss,
    "sigmoid-ce": sigmoid_ce_loss,
    "contrastive": contrastive_loss,
    "softmax-ce": softmax_ce_loss,
}


def rank_loss(batch: BatchScores, variant: str = "search-adaptor") -> tuple[float, np.ndarray]:
    try:
        fn = _RANK_LOSSES[variant]
    except KeyError:
        raise ValueError(f"unknown loss variant: {variant!r}") from None
    return fn(batch)


def recovery_loss(
    adapted_q: np.ndarray,
    orig_q: np.ndarray,
    adapted_c: np.ndarray,
    orig_c: np.ndarray,
) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Mean L1 drift of adapted embeddings from the originals.

    value = mean_i ||aq_i - q_i||_1 + mean_j ||ac_j - c_j||_1.
    Returns gradients w.r.t. the adapted matrices.
    """
    aq = np.asarray(adapted_q, dtype=np.float64)
    oq = np.asarray(orig_q, dtype=np.float64)
    ac = np.asarray(adapted_c, dtype=np.float64)
    oc = np.asarray(orig_c, dtype=np.float64)
    if aq.shape != oq.shape or ac.shape != oc.shape:
        raise ValueError("adapted/original shapes disagree")
    n = max(aq.shape[0], 1)
    m = max(ac.shape[0], 1)
    dq = aq - oq
    dc = ac - oc
    value = float(np.abs(dq).sum() / n + np.abs(dc).sum() / m)
    return value, (np.sign(dq) / n, np.sign(dc) / m)


def prediction_loss(
    adapted_q: np.ndarray,
    predicted_q: np.ndarray,
    pair_query_idx: np.ndarray,
    pair_grades: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Grade-weighted L1 between adapted queries and predictor outputs.

    predicted_q holds one row per positive pair; pair_query_idx maps each pair
    to its row in adapted_q. value = sum_p y_p * ||aq_{i(p)} - pred_p||_1 / sum_p y_p.
    Returns (value, grad w.r.t. adapted_q, grad w.r.t. predicted_q).
    """
    aq = np.asarray(adapted_q, dtype=np.float64)
    pred = np.asarray(predicted_q, dtype=np.float64)
    idx = np.asarray(pair_query_idx, dtype=np.intp)
    y = np.asarray(pair_grades, dtype=np.float64)
    if pred.shape[0] != idx.shape[0] or pred.shape[0] != y.shape[0]:
        raise ValueError("pair arrays disagree in length")
    grad_q = np.zeros_like(aq)
    grad_pred = np.zeros_like(pred)
    mass = float(y.sum())
    if mass <= 0 or pred.shape[0] == 0:
        return 0.0, grad_q, grad_pred
    diff = aq[idx] - pred
    value = float(np.sum(y[:, None] * np.abs(diff)) / mass)
    per_pair = (y[:, None] * np.sign(diff)) / mass
    np.add.at(grad_q, idx, per_pair)
    grad_pred = -per_pair
    return value, grad_q, grad_pred


@dataclass
class TotalLoss:
    value: float
    rank_value: float
    recovery_value: float
    prediction_value: float
    grad_scores: np.ndarray
    grad_adapted_q: np.ndarray | None  # recovery + prediction parts, pre-weighted
    grad_adapted_c: np.ndarray | None  # recovery part, pre-weighted
    grad_predicted_q: np.ndarray | None  # prediction part, pre-weighted

    @property
    def components(self) -> dict[str, float]:
        return {
            "rank": self.rank_value,
            "recovery": self.recovery_value,
            "prediction": self.prediction_value,
            "total": self.value,
        }


def total_loss(
    batch: BatchScores,
    weights: LossWeights,
    variant: str = "search-adaptor",
    recovery_inputs: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None,
    prediction_inputs: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> TotalLoss:
    """Combined objective: rank term + alpha * recovery + beta * prediction.

    Non-default variants replace only the rank term; the regularizers are
    unchanged. Embedding-space gradients come back pre-multiplied by their
    weights; grad_scores is the raw rank-term gradient.
    """
    rank_value, grad_scores = rank_loss(batch, variant)

    recovery_value = 0.0
    grad_aq = None
    grad_ac = None
    if recovery_inputs is not None:
        recovery_value, (g_aq, g_ac) = recovery_loss(*recovery_inputs)
        grad_aq = weights.alpha * g_aq
        grad_ac = weights.alpha * g_ac

    prediction_value = 0.0
    grad_pred = None
    if prediction_inputs is not None:
        adapted_q, predicted_q, pair_query_idx, pair_grades = prediction_inputs
        prediction_value, g_q, g_pred = prediction_loss(
            adapted_q, predicted_q, pair_query_idx, pair_grades
        )
        if grad_aq is None:
            grad_aq = weights.beta * g_q
        else:
            grad_aq = grad_aq + weights.beta * g_q
        grad_pred = weights.beta * g_pred

    value = rank_value + weights.alpha * recovery_value + weights.beta * prediction_value
    return TotalLoss(
        value=value,
        rank_value=rank_value,
        recovery_value=recovery_value,
        prediction_value=prediction_value,
        grad_scores=grad_scores,
        grad_adapted_q=grad_aq,
        grad_adapted_c=grad_ac,
        grad_predicted_q=grad_pred,
    )
