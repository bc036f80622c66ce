"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .numerics import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], **hyper) -> "OptimizerState":
        state = cls(**hyper)
        state.exp_avg = [np.zeros_like(p.data) for p in params]
        state.exp_avg_sq = [np.zeros_like(p.data) for p in params]
        return state


def adamw_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimizerState) -> None:
    """One in-place AdamW update of ``params``.

    A missing gradient counts as zero.  Non-finite gradients abort the
    step before anything is modified.
    """
    if len(params) != len(grads) or len(params) != len(state.exp_avg):
        raise ValueError("adamw_step: params, grads and optimizer state are misaligned")
    dense = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        if g.shape != p.shape or state.exp_avg[i].shape != p.shape:
            raise ValueError(f"adamw_step: shape mismatch for parameter {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"adamw_step: {bad} non-finite gradient entries in parameter {i} {p.shape}")
        dense.append(g)

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, dense, state.exp_avg, state.exp_avg_sq):
        p.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
