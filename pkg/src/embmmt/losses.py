"""Training objectives.

Both hinge losses are written in the usual ranking form with ``d`` a
distance: the gold item must be closer to the prediction than the negative by
at least the margin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embeddings import BOS_ID, PAD_ID, TIE_TOLERANCE, pairwise_distances
from .errors import ContractError

log = logging.getLogger(__name__)

NEGATIVE_MODES = ("most_offending", "prose_faithful")
# "mean" divides the visual hinge sum by the batch size, matching the
# per-sentence averaging of the translation loss; "sum" keeps the raw sum
VISUAL_REDUCTIONS = ("mean", "sum")
PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    gamma: float = 0.5  # translation ranking margin
    alpha: float = 0.1  # visual margin
    lam: float = 0.01  # weight of the translation loss
    negative_mode: str = "most_offending"
    visual_reduction: str = "mean"

    def __post_init__(self):
        if self.gamma < 0 or self.alpha < 0:
            raise ContractError("margins must be non-negative")
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ContractError(f"negative_mode must be one of {NEGATIVE_MODES}")
        if self.visual_reduction not in VISUAL_REDUCTIONS:
            raise ContractError(f"visual_reduction must be one of {VISUAL_REDUCTIONS}")


def row_norm(x: Tensor) -> Tensor:
    """L2 norm of each row; an all-zero row reports norm 1 so its cosine with
    anything is 0 (distance 1) and its gradient stays finite."""
    sq = ad.sum_(x * x, axis=-1)
    return ad.sqrt(sq + (sq.data == 0).astype(sq.data.dtype))


def cosine_distance_rows(a: Tensor, b) -> Tensor:
    """1 - cos between matching rows of ``a`` and ``b`` (last axis)."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    return 1.0 - ad.sum_(a * b, axis=-1) / (row_norm(a) * row_norm(b))


def cosine_distance_matrix(a: Tensor, b) -> Tensor:
    """(n, m) distances between rows of a (n, D) and b (m, D)."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    an = a / ad.reshape(row_norm(a), (-1, 1))
    bn = b / ad.reshape(row_norm(b), (-1, 1))
    return 1.0 - ad.matmul(an, ad.transpose(bn))


# ---------------------------------------------------------------------------
# negatives


def select_negative(pred, gold, table, mode: str = "most_offending") -> np.ndarray:
    """Negative word id per prediction row; gold, pad and bos never qualify.

    ``most_offending``: the non-gold word nearest the prediction.
    ``prose_faithful``: the word maximising d(e(w), e(gold)) - d(pred, e(w)),
    i.e. close to the prediction and far from the gold word.
    Ties resolve to the lowest id.  No gradient flows through the choice.
    """
    pred = np.atleast_2d(np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64))
    gold = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    table = np.asarray(table.data if isinstance(table, Tensor) else table, dtype=np.float64)
    if mode not in NEGATIVE_MODES:
        raise ContractError(f"unknown negative mode {mode!r}")
    d_pred = pairwise_distances(pred, table)  # (n, V)
    rows = np.arange(len(gold))
    if mode == "most_offending":
        score = d_pred
    else:
        d_gold = pairwise_distances(table[gold], table)  # (n, V)
        with np.errstate(invalid="ignore"):  # inf - inf on zero rows, masked below
            score = -(d_gold - d_pred)
    score = score.copy()
    score[:, [PAD_ID, BOS_ID]] = np.inf
    score[rows, gold] = np.inf
    if np.any(np.all(np.isinf(score), axis=1)):
        raise ContractError("select_negative needs at least two eligible words")
    best = score.min(axis=1, keepdims=True)
    return np.argmax(score <= best + TIE_TOLERANCE, axis=1)


# ---------------------------------------------------------------------------
# translation loss


def margin_ranking_terms(pred: Tensor, gold, mask, table, gamma: float = 0.5,
                         mode: str = "most_offending") -> Tensor:
    """Per-step hinge terms, shape (B, M); masked steps are zero.

    ``pred`` is (B, M, D); ``table`` is a (V, D) array or Tensor (a Tensor
    that requires grad receives gradients through e(gold) and e(negative)).
    """
    pred = ad.as_tensor(pred)
    gold = np.asarray(gold, dtype=np.int64)
    mask = np.asarray(mask, dtype=pred.data.dtype)
    if pred.ndim != 3 or gold.shape != pred.shape[:2] or mask.shape != gold.shape:
        raise ContractError(
            f"margin_ranking_terms: pred {pred.shape}, gold {gold.shape}, mask {mask.shape}"
        )
    table = ad.as_tensor(table)
    B, M, D = pred.shape
    live = mask.reshape(-1) > 0
    flat = ad.reshape(pred, (B * M, D))
    gold_flat = gold.reshape(-1)
    neg = np.full(B * M, PAD_ID, dtype=np.int64)
    neg[live] = select_negative(flat.data[live], gold_flat[live], table.data, mode)

    idx = np.flatnonzero(live)
    p = ad.getitem(flat, idx)
    d_pos = cosine_distance_rows(p, ad.embedding_lookup(table, gold_flat[idx]))
    d_neg = cosine_distance_rows(p, ad.embedding_lookup(table, neg[idx]))
    terms = ad.relu(gamma + d_pos - d_neg)
    return ad.reshape(ad.scatter(terms, idx, (B * M,)), (B, M))


def margin_ranking_loss(pred: Tensor, gold, mask, table, gamma: float = 0.5,
                        mode: str = "most_offending") -> Tensor:
    """Sum of hinge terms over steps, averaged over sentences."""
    terms = margin_ranking_terms(pred, gold, mask, table, gamma, mode)
    return ad.sum_(terms) / terms.shape[0]


# ---------------------------------------------------------------------------
# visual loss


def visual_max_margin(pred: Tensor, images, alpha: float = 0.1) -> Tensor:
    """In-batch contrastive hinge:
    sum_b sum_{b' != b} max(0, alpha + d(pred_b, img_b) - d(pred_b, img_b'))."""
    pred = ad.as_tensor(pred)
    images = np.asarray(images.data if isinstance(images, Tensor) else images)
    if pred.ndim != 2 or images.shape != pred.shape:
        raise ContractError(f"visual_max_margin: pred {pred.shape} vs images {images.shape}")
    B = pred.shape[0]
    if B == 1:
        return ad.sum_(pred * 0.0)
    d = cosine_distance_matrix(pred, images)  # (B, B)
    pos = ad.reshape(ad.sum_(d * np.eye(B), axis=1), (B, 1))
    off = 1.0 - np.eye(B)
    return ad.sum_(ad.relu(alpha + pos - d) * off)


def multitask_loss(loss_t, loss_v, lam: float = 0.01):
    """lam * J_T + (1 - lam) * J_V; ``loss_v`` None means text-only (J = J_T)."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    if loss_v is None:
        return loss_t
    return lam * loss_t + (1.0 - lam) * loss_v


# ---------------------------------------------------------------------------
# softmax baseline


class ClampCounter:
    count = 0


def cross_entropy_loss(probs: Tensor, gold, mask) -> Tensor:
    """Masked mean negative log-likelihood of gold ids under ``probs`` (B, M, V).

    Gold probabilities below 1e-12 are clamped; ``ClampCounter.count`` tracks
    how often that happened.
    """
    probs = ad.as_tensor(probs)
    gold = np.asarray(gold, dtype=np.int64)
    mask = np.asarray(mask, dtype=probs.data.dtype)
    B, M, V = probs.shape
    flat = ad.reshape(probs, (B * M, V))
    idx = np.flatnonzero(mask.reshape(-1) > 0)
    p = ad.getitem(flat, (idx, gold.reshape(-1)[idx]))
    small = int(np.sum(p.data < PROB_FLOOR))
    if small:
        ClampCounter.count += small
        log.warning("cross_entropy_loss: %d gold probabilities clamped", small)
        p = ad.clip(p, PROB_FLOOR, None)
    return -ad.sum_(ad.log(p)) / float(len(idx))
