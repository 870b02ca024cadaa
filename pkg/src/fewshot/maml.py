"""First-order gradient-based adaptation (inner/outer episodic training).

Per episode, a copy of the encoder and a linear head take a few SGD steps
on the support cross-entropy (the inner loop).  The query loss is then
evaluated under the adapted parameters; its gradients, taken at the
adapted values, update the original parameters (first-order treatment:
the adaptation trajectory itself is not differentiated through, so each
inner step's graph is discarded as soon as its gradient is read).

Auxiliary regularizers participate only in the outer update and are
evaluated with the pre-adaptation parameters unless explicitly told
otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .models import (
    Encoder,
    LinearHead,
    encode,
    encoder_with_params,
    head_logits,
    head_with_params,
)
from .tensor import Tape, Tensor, backward, log_softmax, neg, scale

__all__ = [
    "AdaptConfig",
    "cross_entropy",
    "sgd_adapt",
    "inner_adapt",
    "query_result",
    "QueryResult",
]


@dataclass(frozen=True)
class AdaptConfig:
    inner_lr: float = 0.01
    inner_steps: int = 5

    def __post_init__(self):
        if self.inner_lr <= 0:
            raise ValueError(f"inner_lr must be positive, got {self.inner_lr}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer labels."""
    m, k = logits.shape
    if labels.shape != (m,):
        raise ValueError(f"labels shape {labels.shape} != ({m},)")
    log_probs = log_softmax(logits)
    onehot = np.zeros((m, k), dtype=logits.dtype)
    onehot[np.arange(m), labels] = 1.0
    picked = (log_probs * Tensor(onehot)).sum()
    if reduction == "mean":
        return scale(neg(picked), 1.0 / m)
    if reduction == "sum":
        return neg(picked)
    raise ValueError(f"unknown reduction {reduction!r}")


def sgd_adapt(
    params: Sequence[Tensor],
    loss_fn: Callable[[list[Tensor]], Tensor],
    lr: float,
    steps: int,
) -> list[Tensor]:
    """Take ``steps`` SGD steps on copies of ``params``.

    Every step rebuilds the loss on a throwaway tape, reads the gradient,
    and materializes the updated values as fresh leaf tensors — the
    returned parameters carry no history connecting them to the inputs.
    """
    # lr 0 is legal and acts as the identity (useful as a control); a
    # negative rate would silently ascend the loss
    if lr < 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    current = [Tensor(p.data.copy(), requires_grad=True) for p in params]
    for _ in range(steps):
        with Tape():
            loss = loss_fn(current)
            backward(loss)
        current = [
            Tensor(
                p.data - lr * p.grad if p.grad is not None else p.data.copy(),
                requires_grad=True,
            )
            for p in current
        ]
    return current


def inner_adapt(
    encoder: Encoder,
    head: LinearHead,
    episode,
    cfg: AdaptConfig,
    dtype=np.float64,
) -> tuple[Encoder, LinearHead]:
    """Adapt encoder+head to an episode's support set; originals untouched.

    The inner objective is the mean support cross-entropy (mean keeps the
    step size independent of the support-set size).
    """
    images = Tensor(episode.support_images.astype(dtype))
    labels = episode.support_labels
    n_enc = len(encoder.parameters())

    def loss_fn(flat: list[Tensor]) -> Tensor:
        enc = encoder_with_params(encoder, flat[:n_enc])
        hd = head_with_params(flat[n_enc:])
        return cross_entropy(head_logits(hd, encode(enc, images)), labels, reduction="mean")

    adapted = sgd_adapt(
        encoder.parameters() + head.parameters(), loss_fn, cfg.inner_lr, cfg.inner_steps
    )
    return encoder_with_params(encoder, adapted[:n_enc]), head_with_params(adapted[n_enc:])


@dataclass
class QueryResult:
    loss: Tensor
    loss_value: float
    accuracy: float
    predictions: np.ndarray


def query_result(
    encoder: Encoder,
    head: LinearHead,
    episode,
    reduction: str = "sum",
    dtype=np.float64,
) -> QueryResult:
    """Query-set cross-entropy and accuracy under the given parameters.

    Built on the caller's active tape so the gradients can flow to
    whatever parameters ``encoder``/``head`` hold (adapted copies, in the
    outer step).
    """
    images = Tensor(episode.query_images.astype(dtype))
    logits = head_logits(head, encode(encoder, images))
    loss = cross_entropy(logits, episode.query_labels, reduction=reduction)
    predictions = logits.data.argmax(axis=1)
    accuracy = float((predictions == episode.query_labels).mean())
    return QueryResult(
        loss=loss,
        loss_value=float(loss.data),
        accuracy=accuracy,
        predictions=predictions,
    )
