"""Adadelta parameter updates.

Pure Adadelta: the step size per parameter comes entirely from the two
running second-moment accumulators, there is no learning-rate multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(ValueError):
    """Raised when a gradient contains NaN or infinity; the step is aborted."""


@dataclass
class AdadeltaState:
    """Per-parameter running averages of squared gradients and updates."""

    acc_grad_sq: list[np.ndarray]
    acc_update_sq: list[np.ndarray]
    rho: float = 0.9
    epsilon: float = 1e-6
    step_count: int = field(default=0)

    @classmethod
    def for_params(cls, params: list[np.ndarray], rho: float = 0.9, epsilon: float = 1e-6):
        return cls(
            acc_grad_sq=[np.zeros(p.shape, dtype=np.float64) for p in params],
            acc_update_sq=[np.zeros(p.shape, dtype=np.float64) for p in params],
            rho=rho,
            epsilon=epsilon,
        )


def adadelta_step(
    state: AdadeltaState, params: list[np.ndarray], grads: list[np.ndarray]
) -> None:
    """One in-place update of `params` from `grads`.

    Per parameter: Eg <- rho*Eg + (1-rho)*g^2, then
    delta = -sqrt(Ex + eps)/sqrt(Eg + eps) * g, then
    Ex <- rho*Ex + (1-rho)*delta^2, then param += delta.
    """
    if len(params) != len(grads) or len(params) != len(state.acc_grad_sq):
        raise ValueError("parameter/gradient/state length mismatch")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(
                f"non-finite gradient in parameter tensor {i} (shape {g.shape}); step aborted"
            )
    rho, eps = state.rho, state.epsilon
    for p, g, eg, ex in zip(params, grads, state.acc_grad_sq, state.acc_update_sq):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        g64 = g.astype(np.float64, copy=False)
        eg *= rho
        eg += (1.0 - rho) * g64 * g64
        delta = -np.sqrt(ex + eps) / np.sqrt(eg + eps) * g64
        ex *= rho
        ex += (1.0 - rho) * delta * delta
        p += delta.astype(p.dtype)
    state.step_count += 1
