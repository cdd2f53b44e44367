"""Classification and distillation losses.

The distillation loss blends hard-label cross-entropy with the divergence
between tempered teacher and student distributions:

    alpha * CE(student, label) + (1 - alpha) * KL(soft_teacher || soft_student)

with both distributions softened at the same temperature. The optional
``t_squared`` flag additionally scales the divergence term by T^2 (the classic
recipe); it is off by default.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .layers import log_softmax, softmax_temperature


@dataclass(frozen=True)
class KDConfig:
    alpha: float = 0.1
    temperature: float = 5.0
    t_squared: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")


def cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label], evaluated in log-sum-exp form."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DomainError("logits must be finite")
    if not 0 <= int(label) < z.shape[-1]:
        raise DomainError(f"label {label} out of range for {z.shape[-1]} classes")
    return float(-log_softmax(z)[int(label)])


def kl_divergence(p, log_q) -> float:
    """KL(p || q) with q supplied as log-probabilities; terms with p=0 contribute 0."""
    p = np.asarray(p, dtype=np.float64)
    log_q = np.asarray(log_q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - log_q), 0.0)
    return float(np.sum(terms))


def kd_loss(student_logits, teacher_logits, label: int, cfg: KDConfig) -> float:
    """Distillation loss for one sample."""
    ys = np.asarray(student_logits, dtype=np.float64)
    yt = np.asarray(teacher_logits, dtype=np.float64)
    if ys.shape != yt.shape:
        raise ConfigurationError(
            f"student logits shape {ys.shape} does not match teacher {yt.shape}")
    ce = cross_entropy(ys, label)
    soft_teacher = softmax_temperature(yt, cfg.temperature)
    log_soft_student = log_softmax(ys / cfg.temperature)
    kl = kl_divergence(soft_teacher, log_soft_student)
    if cfg.t_squared:
        kl *= cfg.temperature ** 2
    return cfg.alpha * ce + (1.0 - cfg.alpha) * kl


def kd_logit_gradient(student_logits, teacher_logits, label: int, cfg: KDConfig) -> np.ndarray:
    """d(kd_loss)/d(student_logits); the teacher side carries no gradient."""
    ys = np.asarray(student_logits, dtype=np.float64)
    yt = np.asarray(teacher_logits, dtype=np.float64)
    probs = softmax_temperature(ys, 1.0)
    onehot = np.zeros_like(probs)
    onehot[int(label)] = 1.0
    grad = cfg.alpha * (probs - onehot)
    soft_student = softmax_temperature(ys, cfg.temperature)
    soft_teacher = softmax_temperature(yt, cfg.temperature)
    scale = cfg.temperature if cfg.t_squared else (1.0 / cfg.temperature)
    grad += (1.0 - cfg.alpha) * scale * (soft_student - soft_teacher)
    return grad


def ce_logit_gradient(logits, label: int) -> np.ndarray:
    """d(cross_entropy)/d(logits) = softmax(logits) - onehot(label)."""
    probs = softmax_temperature(np.asarray(logits, dtype=np.float64), 1.0)
    onehot = np.zeros_like(probs)
    onehot[int(label)] = 1.0
    return probs - onehot
