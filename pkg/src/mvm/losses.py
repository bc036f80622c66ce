"""Training objectives: audio reconstruction, value-slot contrast and the two-branch task loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ShapeError
from .numerics import Tensor


def reconstruction_loss(reconstructed: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    """``1 - cos`` between reconstructed and target frames, reduced over all frames.

    ``reduction="sum"`` gives the literal L1 sum instead of the mean.
    """
    if reconstructed.shape != target.shape:
        raise ShapeError(f"reconstruction_loss: {reconstructed.shape} vs {target.shape}")
    gap = nx.sub(Tensor(np.ones(target.shape[:-1], dtype=target.dtype)), nx.cosine_similarity(reconstructed, target))
    return _reduce(gap, reduction)


def contrastive_loss(value: Tensor, reduction: str = "mean") -> Tensor:
    """``|cos|`` between every ordered pair of distinct value slots.

    Averaged over the N(N-1) pairs by default; ``reduction="sum"`` sums them.
    """
    n, d = value.shape
    if n < 2:
        warnings.warn("contrastive_loss: fewer than two slots, returning 0", RuntimeWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=value.dtype))
    sims = nx.cosine_scores(nx.reshape(value, (n, 1, d)), nx.reshape(value, (1, n, d)))
    off_diag = (1.0 - np.eye(n, dtype=value.dtype)).reshape(n, 1, n)
    pairs = nx.absolute(nx.mul_const(sims, off_diag))
    total = nx.sum(pairs)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return nx.scale(total, 1.0 / (n * (n - 1)))
    raise ValueError(f"unknown reduction {reduction!r}")


def task_loss(logits_visual_path: Tensor, logits_audio_path: Tensor | None, labels) -> Tensor:
    """Cross-entropy of the visual-path logits plus that of the audio path, if any."""
    loss = nx.cross_entropy(logits_visual_path, labels)
    if logits_audio_path is None:
        return loss
    if logits_audio_path.shape != logits_visual_path.shape:
        raise ShapeError(f"task_loss: {logits_visual_path.shape} vs {logits_audio_path.shape}")
    return nx.add(loss, nx.cross_entropy(logits_audio_path, labels))


def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return nx.mean(x)
    if reduction == "sum":
        return nx.sum(x)
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class LossReport:
    task: Tensor
    reconstruction: Tensor
    contrastive: Tensor
    total: Tensor
    per_level_reconstruction: list[Tensor] = field(default_factory=list)
    per_level_contrastive: list[Tensor] = field(default_factory=list)

    def as_record(self) -> dict[str, float]:
        return {
            "task": self.task.item(),
            "rec": self.reconstruction.item(),
            "cont": self.contrastive.item(),
            "total": self.total.item(),
        }


def total_loss(
    per_level_reconstruction: list[Tensor],
    per_level_contrastive: list[Tensor],
    task: Tensor,
    lambda_rec: float = 1.0,
    lambda_cont: float = 1.0,
) -> LossReport:
    """Task loss plus weighted level-averaged reconstruction and contrastive terms.

    With no memory levels both auxiliary terms are zero.
    """
    if len(per_level_reconstruction) != len(per_level_contrastive):
        raise ValueError("total_loss: per-level loss lists differ in length")
    zero = Tensor(np.zeros((), dtype=task.dtype))
    if per_level_reconstruction:
        levels = len(per_level_reconstruction)
        rec = nx.scale(_add_all(per_level_reconstruction), 1.0 / levels)
        cont = nx.scale(_add_all(per_level_contrastive), 1.0 / levels)
        total = nx.add(task, nx.add(nx.scale(rec, lambda_rec), nx.scale(cont, lambda_cont)))
    else:
        rec = cont = zero
        total = task
    return LossReport(
        task=task,
        reconstruction=rec,
        contrastive=cont,
        total=total,
        per_level_reconstruction=list(per_level_reconstruction),
        per_level_contrastive=list(per_level_contrastive),
    )


def _add_all(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = nx.add(acc, t)
    return acc
