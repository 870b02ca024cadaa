"""Prototype-based episodic classification loss.

Class prototypes are support-embedding means; queries are classified by a
softmax over negative distances to each prototype.  The loss is the
negative log-probability of the true class, summed (default) or averaged
over the query set.

Two algebraically equal forms of the loss exist: the log-softmax form
used to build the graph, and the direct ``distance + logsumexp(-d)``
form.  Every episode evaluates both and raises if they disagree beyond
floating-point tolerance — a cheap standing self-check on the loss code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import Encoder, encode
from .tensor import (
    Tensor,
    log_softmax,
    matmul,
    neg,
    pairwise_sqdist,
    scale,
    sqrt,
)

__all__ = [
    "EpisodeResult",
    "compute_prototypes",
    "class_log_probs",
    "episode_loss_from_embeddings",
    "episode_loss",
    "METRICS",
    "REDUCTIONS",
]

METRICS = ("squared", "euclidean")
REDUCTIONS = ("sum", "mean")

# keeps sqrt differentiable when a query coincides with a prototype
_EUCLID_EPS = 1e-12


@dataclass
class EpisodeResult:
    loss: Tensor  # scalar, differentiable
    loss_value: float
    accuracy: float
    predictions: np.ndarray  # [M] episode-local labels
    per_query_nll: np.ndarray  # [M]
    form_gap: float  # |log-softmax form - distance form|


def compute_prototypes(support_emb: Tensor, way: int, shot: int) -> Tensor:
    """Mean support embedding per class via a constant averaging matrix.

    Support rows are grouped by class (``shot`` consecutive rows each),
    so prototypes are ``A @ support_emb`` with ``A[i]`` averaging block i.
    """
    if support_emb.shape[0] != way * shot:
        raise ValueError(
            f"support embeddings have {support_emb.shape[0]} rows, expected way*shot={way * shot}"
        )
    avg = np.zeros((way, way * shot), dtype=support_emb.dtype)
    for i in range(way):
        avg[i, i * shot : (i + 1) * shot] = 1.0 / shot
    return matmul(Tensor(avg), support_emb)


def class_log_probs(query_emb: Tensor, prototypes: Tensor, metric: str = "squared") -> tuple[Tensor, Tensor]:
    """Log class probabilities for each query: softmax over -distance.

    Returns ``(log_probs, distances)``, both [M, way].
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    d = pairwise_sqdist(query_emb, prototypes)
    if metric == "euclidean":
        d = sqrt(d + _EUCLID_EPS)
    return log_softmax(neg(d)), d


def episode_loss_from_embeddings(
    support_emb: Tensor,
    query_emb: Tensor,
    query_labels: np.ndarray,
    way: int,
    shot: int,
    metric: str = "squared",
    reduction: str = "sum",
) -> EpisodeResult:
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}; choose from {REDUCTIONS}")
    m = query_emb.shape[0]
    if query_labels.shape != (m,):
        raise ValueError(f"query labels shape {query_labels.shape} != ({m},)")

    prototypes = compute_prototypes(support_emb, way, shot)
    log_probs, dists = class_log_probs(query_emb, prototypes, metric)

    onehot = np.zeros((m, way), dtype=support_emb.dtype)
    onehot[np.arange(m), query_labels] = 1.0
    picked = (log_probs * Tensor(onehot)).sum()
    loss = neg(picked) if reduction == "sum" else scale(neg(picked), 1.0 / m)

    # cross-check against the direct distance + logsumexp(-d) form
    d = dists.data
    shift = (-d).max(axis=1, keepdims=True)
    lse = np.log(np.exp(-d - shift).sum(axis=1)) + shift[:, 0]
    per_query = d[np.arange(m), query_labels] + lse
    alt = per_query.sum() if reduction == "sum" else per_query.mean()
    value = float(loss.data)
    tol = 1e-9 if support_emb.dtype == np.float64 else 1e-4
    gap = abs(value - alt)
    if gap > tol * max(1.0, abs(value)):
        raise ArithmeticError(
            f"episode loss forms disagree: {value!r} vs {alt!r} (gap {gap:.3e})"
        )

    predictions = d.argmin(axis=1)
    accuracy = float((predictions == query_labels).mean())
    per_query_nll = -log_probs.data[np.arange(m), query_labels]
    return EpisodeResult(
        loss=loss,
        loss_value=value,
        accuracy=accuracy,
        predictions=predictions,
        per_query_nll=per_query_nll,
        form_gap=gap,
    )


def episode_loss(
    encoder: Encoder,
    episode,
    metric: str = "squared",
    reduction: str = "sum",
    dtype=np.float64,
) -> EpisodeResult:
    """Encode an episode's images and compute its classification loss."""
    support = encode(encoder, Tensor(episode.support_images.astype(dtype)))
    query = encode(encoder, Tensor(episode.query_images.astype(dtype)))
    return episode_loss_from_embeddings(
        support,
        query,
        episode.query_labels,
        episode.way,
        episode.shot,
        metric=metric,
        reduction=reduction,
    )
