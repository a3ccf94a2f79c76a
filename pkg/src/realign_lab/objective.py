"""Loss stack: contrastive ranking plus description-driven KL alignment.

Scores are cosines of unit embeddings divided by a temperature. Row i of a
batch treats document i as the positive and the other B-1 documents as
in-batch negatives. The KL term aligns the description-induced ranking
distribution with the query-induced one; the query side acts as the
teacher and is detached from the gradient by default. Rows without a
description are masked and the KL is averaged over the unmasked count.

All gradients returned are exact derivatives with respect to the unit-norm
embeddings; normalization backprop belongs to the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mathkernel import cosine, softmax

UNIT_NORM_TOL = 1e-4


@dataclass
class BatchScores:
    """Unit-norm query/document/description embeddings plus temperature.

    description_embeddings may be None (fully masked batch); otherwise rows
    where description_mask is False are ignored (their embedding rows are
    only placeholders).
    """

    query_embeddings: np.ndarray
    document_embeddings: np.ndarray
    temperature: float
    description_embeddings: np.ndarray | None = None
    description_mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        q = np.asarray(self.query_embeddings, dtype=np.float64)
        d = np.asarray(self.document_embeddings, dtype=np.float64)
        if q.ndim != 2 or d.ndim != 2 or q.shape != d.shape:
            raise ValueError(f"query/document shapes differ: {q.shape} vs {d.shape}")
        if q.shape[0] < 2:
            raise ValueError("batch needs >= 2 rows for in-batch negatives")
        if not (self.temperature > 0.0) or not np.isfinite(self.temperature):
            raise ValueError(f"temperature must be positive, got {self.temperature!r}")
        self.query_embeddings = q
        self.document_embeddings = d
        _check_unit_rows(q, "query_embeddings")
        _check_unit_rows(d, "document_embeddings")
        if self.description_embeddings is None:
            if self.description_mask is None:
                self.description_mask = np.zeros(q.shape[0], dtype=bool)
        else:
            t = np.asarray(self.description_embeddings, dtype=np.float64)
            if t.shape != q.shape:
                raise ValueError(
                    f"description shape {t.shape} does not match batch {q.shape}"
                )
            self.description_embeddings = t
            if self.description_mask is None:
                self.description_mask = np.ones(q.shape[0], dtype=bool)
        self.description_mask = np.asarray(self.description_mask, dtype=bool)
        if self.description_mask.shape != (q.shape[0],):
            raise ValueError("description_mask length does not match batch")
        if self.description_embeddings is None and self.description_mask.any():
            raise ValueError("mask claims descriptions but none were provided")
        if self.description_embeddings is not None and self.description_mask.any():
            _check_unit_rows(
                self.description_embeddings[self.description_mask], "description_embeddings"
            )

    @property
    def batch_size(self) -> int:
        return self.query_embeddings.shape[0]


@dataclass
class LossBreakdown:
    contrastive: float
    kl: float
    total: float
    lambda_: float
    kl_mask_count: int


@dataclass
class BatchGrads:
    """d(loss)/d(embedding) for each batch input; rows align with the batch."""

    d_query: np.ndarray
    d_document: np.ndarray
    d_description: np.ndarray | None = None


def _check_unit_rows(arr: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(arr, axis=1)
    bad = np.abs(norms - 1.0) > UNIT_NORM_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValueError(f"{name} row {i} has norm {norms[i]!r}, expected 1")


def _row_log_softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def relevance_score(query_embedding, document_embedding) -> float:
    """Cosine relevance between two embeddings."""
    return cosine(query_embedding, document_embedding)


def ranking_distribution(anchor, candidates, temperature: float = 1.0) -> np.ndarray:
    """Softmax over cosine scores of the anchor against >= 2 candidates."""
    candidates = [np.asarray(c, dtype=np.float64) for c in candidates]
    if len(candidates) < 2:
        raise ValueError("ranking needs >= 2 candidates")
    scores = np.array([cosine(anchor, c) for c in candidates])
    return softmax(scores, temperature)


def contrastive_loss(batch: BatchScores) -> tuple[float, BatchGrads]:
    """Mean over rows of -ln P(positive | query, batch documents)."""
    q = batch.query_embeddings
    d = batch.document_embeddings
    b = batch.batch_size
    inv_t = 1.0 / batch.temperature
    scores = (q @ d.T) * inv_t
    log_p = _row_log_softmax(scores)
    loss = float(-np.mean(np.diag(log_p)))
    d_scores = (np.exp(log_p) - np.eye(b)) / b
    grads = BatchGrads(
        d_query=(d_scores @ d) * inv_t,
        d_document=(d_scores.T @ q) * inv_t,
    )
    return loss, grads


def kl_alignment_loss(
    batch: BatchScores, teacher_detached: bool = True
) -> tuple[float, int, BatchGrads]:
    """Mean over description rows of KL(query ranking || description ranking).

    Returns (loss, mask_count, grads) where mask_count is the number of
    rows without a description (contributing zero). A fully masked batch
    yields loss 0.0, not an error. With teacher_detached the query-induced
    distribution is a constant target and d_query is zero.
    """
    b = batch.batch_size
    mask = batch.description_mask
    n_active = int(mask.sum())
    mask_count = b - n_active
    zero = BatchGrads(
        d_query=np.zeros_like(batch.query_embeddings),
        d_document=np.zeros_like(batch.document_embeddings),
        d_description=(
            None
            if batch.description_embeddings is None
            else np.zeros_like(batch.description_embeddings)
        ),
    )
    if n_active == 0:
        return 0.0, mask_count, zero

    q = batch.query_embeddings
    d = batch.document_embeddings
    t = batch.description_embeddings
    inv_t = 1.0 / batch.temperature

    log_p = _row_log_softmax((q @ d.T) * inv_t)  # teacher rows
    log_s = _row_log_softmax((t @ d.T) * inv_t)  # student rows
    p = np.exp(log_p)
    s = np.exp(log_s)
    kl_rows = np.einsum("bj,bj->b", p, log_p - log_s)
    loss = float(np.sum(kl_rows[mask]) / n_active)

    active = mask.astype(np.float64)[:, None]
    d_scores_student = (s - p) * active / n_active
    grads = zero
    grads.d_description = (d_scores_student @ d) * inv_t
    grads.d_document = (d_scores_student.T @ t) * inv_t
    if not teacher_detached:
        d_scores_teacher = p * (log_p - log_s - kl_rows[:, None]) * active / n_active
        grads.d_query = (d_scores_teacher @ d) * inv_t
        grads.d_document += (d_scores_teacher.T @ q) * inv_t
    return loss, mask_count, grads


def total_loss(
    batch: BatchScores, lambda_: float, teacher_detached: bool = True
) -> tuple[LossBreakdown, BatchGrads]:
    """contrastive + lambda * kl, with the matching embedding gradients."""
    if lambda_ < 0.0:
        raise ValueError(f"lambda must be >= 0, got {lambda_!r}")
    c_loss, c_grads = contrastive_loss(batch)
    kl, mask_count, kl_grads = kl_alignment_loss(batch, teacher_detached)
    breakdown = LossBreakdown(
        contrastive=c_loss,
        kl=kl,
        total=c_loss + lambda_ * kl,
        lambda_=lambda_,
        kl_mask_count=mask_count,
    )
    grads = BatchGrads(
        d_query=c_grads.d_query + lambda_ * kl_grads.d_query,
        d_document=c_grads.d_document + lambda_ * kl_grads.d_document,
        d_description=(
            None if kl_grads.d_description is None else lambda_ * kl_grads.d_description
        ),
    )
    return breakdown, grads
