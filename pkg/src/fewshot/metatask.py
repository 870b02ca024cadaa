"""Label-free auxiliary objectives that regularize episodic training.

A regularizer sees only the episode's images and the encoder — never the
labels — and returns a scalar loss.  The composite objective is

    total = sum(task losses) + sum_r  lambda_r * raw_r

Terms with ``lambda == 0`` are skipped outright (not multiplied by zero),
so a disabled regularizer leaves the executed operation sequence — and
therefore the training trajectory — bit-identical to a run without it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .models import Decoder, Encoder, decode, encode
from .tensor import Tape, Tensor, backward, no_grad, scale, zero_grads

__all__ = [
    "MetaTaskRegularizer",
    "ReconstructionTask",
    "RegTerm",
    "LossBreakdown",
    "composite_loss",
    "SeparabilityReport",
    "separability_check",
    "IMAGE_MODES",
]

IMAGE_MODES = ("all", "support")


class MetaTaskRegularizer:
    """Interface for auxiliary episode losses.

    Subclasses set ``name`` and ``lam`` and implement ``loss`` and
    ``parameters``.  ``loss`` must not look at labels; auxiliary
    objectives have to remain usable on unlabeled data.
    """

    name: str = "metatask"
    lam: float = 1.0

    def parameters(self) -> list[Tensor]:
        raise NotImplementedError

    def loss(self, images: Tensor, encoder: Encoder, embeddings: Tensor | None = None) -> Tensor:
        """Scalar auxiliary loss for a batch of images.

        ``embeddings`` may carry precomputed encoder outputs for these
        images (to share a forward pass); implementations fall back to
        encoding ``images`` themselves.
        """
        raise NotImplementedError


class ReconstructionTask(MetaTaskRegularizer):
    """Autoencoder loss: decode embeddings, mean squared error to inputs."""

    name = "autoencoder"

    def __init__(self, decoder: Decoder, lam: float = 1.0, images: str = "all"):
        if lam < 0:
            raise ValueError(f"regularizer weight must be >= 0, got {lam}")
        if images not in IMAGE_MODES:
            raise ValueError(f"unknown image mode {images!r}; choose from {IMAGE_MODES}")
        self.decoder = decoder
        self.lam = float(lam)
        self.image_mode = images

    def parameters(self) -> list[Tensor]:
        return self.decoder.parameters()

    def loss(self, images: Tensor, encoder: Encoder, embeddings: Tensor | None = None) -> Tensor:
        emb = embeddings if embeddings is not None else encode(encoder, images)
        recon = decode(self.decoder, emb)
        if recon.shape != images.shape:
            raise ValueError(f"decoder produced {recon.shape}, input was {images.shape}")
        return (recon - images).square().mean()


@dataclass
class RegTerm:
    name: str
    lam: float
    raw: float | None  # None when the term was skipped (lambda == 0)
    weighted: float


@dataclass
class LossBreakdown:
    task: float
    terms: list[RegTerm]
    total: float


def composite_loss(
    task_losses: Sequence[Tensor],
    reg_terms: Sequence[tuple[MetaTaskRegularizer, Tensor | None]],
) -> tuple[Tensor, LossBreakdown]:
    """Combine task losses and weighted regularizer losses into one scalar.

    ``reg_terms`` pairs each regularizer with its evaluated raw loss, or
    ``None`` if it was skipped; a skipped term must have ``lam == 0`` and
    contributes nothing to the graph.
    """
    if not task_losses:
        raise ValueError("composite_loss: need at least one task loss")
    total = task_losses[0]
    for extra in task_losses[1:]:
        total = total + extra
    task_value = float(total.data)

    terms = []
    for reg, raw in reg_terms:
        if reg.lam < 0:
            raise ValueError(f"regularizer {reg.name!r} has negative weight {reg.lam}")
        if raw is None:
            if reg.lam != 0:
                raise ValueError(f"regularizer {reg.name!r} has weight {reg.lam} but no loss value")
            terms.append(RegTerm(name=reg.name, lam=0.0, raw=None, weighted=0.0))
            continue
        weighted = scale(raw, reg.lam)
        total = total + weighted
        terms.append(
            RegTerm(name=reg.name, lam=reg.lam, raw=float(raw.data), weighted=float(weighted.data))
        )
    return total, LossBreakdown(task=task_value, terms=terms, total=float(total.data))


@dataclass
class SeparabilityReport:
    max_abs_diff: float
    tolerance: float
    passed: bool


def separability_check(
    make_graph: Callable[[], tuple[Tensor, list[tuple[float, Tensor]]]],
    params: Sequence[Tensor],
    tol: float = 1e-8,
) -> SeparabilityReport:
    """Verify that composite gradients decompose additively.

    ``make_graph`` rebuilds the episode objective from scratch and returns
    ``(task_loss, [(lam, raw_loss), ...])``.  Three kinds of independent
    backward passes are run — the combined objective, the task term alone,
    and each raw term alone — and the combined gradient is compared
    against the weighted sum of the parts, parameter by parameter.
    """
    params = list(params)
    saved = [p.grad for p in params]

    def grads_of(build: Callable[[], Tensor]) -> list[np.ndarray]:
        zero_grads(params)
        with Tape():
            backward(build())
        return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def combined() -> Tensor:
        task, pairs = make_graph()
        total = task
        for lam, raw in pairs:
            total = total + scale(raw, lam)
        return total

    with no_grad():
        _, probe = make_graph()
    lams = [lam for lam, _ in probe]

    g_combined = grads_of(combined)
    g_task = grads_of(lambda: make_graph()[0])
    g_parts = [grads_of(lambda i=i: make_graph()[1][i][1]) for i in range(len(lams))]

    max_diff = 0.0
    for j in range(len(params)):
        expected = g_task[j].copy()
        for lam, gp in zip(lams, g_parts):
            expected += lam * gp[j]
        max_diff = max(max_diff, float(np.abs(g_combined[j] - expected).max(initial=0.0)))

    for p, g in zip(params, saved):
        p.grad = g
    return SeparabilityReport(max_abs_diff=max_diff, tolerance=tol, passed=max_diff <= tol)
