"""Adam optimizer and the loss-plateau learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass
class OptimizerState:
    """Adam moments plus the plateau bookkeeping for the learning rate.

    ``stall`` counts consecutive epochs without a new best training loss; the
    very first epoch establishes the baseline and counts toward the window, so
    a loss that never improves halves the rate on epoch ``patience`` exactly.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    patience: int = 5
    factor: float = 0.5
    stall: int = 0
    best_loss: float | None = None
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be > 0")


def adam_update(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: OptimizerState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam step; returns the updated arrays."""
    state.step += 1
    t = state.step
    correct1 = 1.0 - state.beta1 ** t
    correct2 = 1.0 - state.beta2 ** t
    updated = {}
    for name, value in arrays.items():
        g = grads.get(name)
        if g is None:
            updated[name] = value
            continue
        if g.shape != value.shape:
            raise ConfigurationError(f"gradient shape {g.shape} does not match {name} {value.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correct1
        v_hat = v / correct2
        updated[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


def lr_plateau_schedule(state: OptimizerState, epoch_train_loss: float) -> OptimizerState:
    """Halve the rate after ``patience`` consecutive epochs without a new best loss."""
    if not np.isfinite(epoch_train_loss):
        raise ConfigurationError("epoch loss must be finite")
    if state.best_loss is not None and epoch_train_loss < state.best_loss:
        state.best_loss = epoch_train_loss
        state.stall = 0
        return state
    if state.best_loss is None:
        state.best_loss = epoch_train_loss
    state.stall += 1
    if state.stall >= state.patience:
        state.lr *= state.factor
        state.stall = 0
    return state
