"""Knowledge-distillation losses: teacher logit mixing, the temperature-
scaled KL term, weighted cross-entropy, and their sum.

The KL term is computed exactly as specified by its defining expression,
in which a 1/T^2 prefactor and a trailing x T^2 cancel, leaving
alpha * mean_i KL(teacher_i || student_i) at temperature T.  Setting
``literal_t2_mode=False`` instead applies the conventional x T^2 scaling
with no cancelling divisor.  The two modes agree at T=1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .tensor import LOG_EPS, Tensor

ArrayLike = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 3.0
    alpha: float = 0.5
    literal_t2_mode: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass
class TeacherOutputs:
    """Raw logits of the two frozen teachers; ``logits_a`` carries the
    mixture weight alpha.  Stored as plain arrays: no gradient ever flows
    into a teacher."""

    logits_a: np.ndarray
    logits_b: np.ndarray

    def __post_init__(self):
        self.logits_a = np.asarray(getattr(self.logits_a, "data", self.logits_a))
        self.logits_b = np.asarray(getattr(self.logits_b, "data", self.logits_b))
        if self.logits_a.shape != self.logits_b.shape:
            raise ValueError(
                f"teacher logit shapes differ: {self.logits_a.shape} vs {self.logits_b.shape}"
            )


def teacher_mixture(teachers: TeacherOutputs, alpha: float) -> np.ndarray:
    """Convex combination of the raw teacher logits: alpha weights teacher A."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * teachers.logits_a + (1.0 - alpha) * teachers.logits_b


def kl_div(p, q, eps: float = LOG_EPS) -> float:
    """KL divergence of two probability rows, in nats.

    Entries of q are clamped below at ``eps`` before the log; zero entries
    of p contribute nothing.
    """
    p = np.asarray(getattr(p, "data", p), dtype=np.float64)
    q = np.asarray(getattr(q, "data", q), dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"kl_div: shape mismatch {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("kl_div: negative probability entries")
    for name, row in (("p", p), ("q", q)):
        if abs(row.sum() - 1.0) > 1e-5:
            raise ValueError(f"kl_div: {name} sums to {row.sum():.6f}, not 1")
    qc = np.maximum(q, eps)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(qc[mask]))))


def _log_softmax_data(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_loss(student_logits: Tensor, mixed_teacher_logits: ArrayLike, cfg: DistillConfig) -> Tensor:
    """Distillation term: scaled mean KL from the temperature-softened
    teacher mixture to the temperature-softened student.  Differentiable
    with respect to the student logits only."""
    tl = np.asarray(getattr(mixed_teacher_logits, "data", mixed_teacher_logits))
    if student_logits.data.ndim != 2:
        raise ValueError(f"kl_loss: student logits must be N x C, got {student_logits.shape}")
    if tl.shape != student_logits.data.shape:
        raise ValueError(f"kl_loss: teacher shape {tl.shape} != student {student_logits.shape}")
    n = student_logits.shape[0]
    if n < 1:
        raise ValueError("kl_loss: empty batch")
    if cfg.alpha == 0.0:
        return Tensor(np.zeros((), dtype=student_logits.dtype))
    t = cfg.temperature
    # Teacher log-probabilities through the same stabilised path as the
    # student's, so identical logits give an exactly zero loss.
    log_p = _log_softmax_data(tl.astype(student_logits.dtype, copy=False), t)
    p = np.exp(log_p)
    plogp = (p * log_p).sum()
    log_q = T.log_softmax_T(student_logits, t)
    cross = T.sum_all(T.mul(log_q, Tensor(p)))
    scale = cfg.alpha / n if cfg.literal_t2_mode else cfg.alpha * t * t / n
    return T.mul_scalar(T.add_scalar(T.mul_scalar(cross, -1.0), plogp), scale)


def ce_loss(student_logits: Tensor, labels, alpha: float) -> Tensor:
    """(1 - alpha) * mean negative log-likelihood of the true labels at
    temperature 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    labels = np.asarray(labels)
    n, c = student_logits.shape
    if labels.shape != (n,):
        raise ValueError(f"ce_loss: need {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"ce_loss: label out of range [0, {c})")
    if alpha == 1.0:
        return Tensor(np.zeros((), dtype=student_logits.dtype))
    picked = T.pick(T.log_softmax_T(student_logits, 1.0), labels)
    return T.mul_scalar(T.sum_all(picked), -(1.0 - alpha) / n)


@dataclass
class LossBreakdown:
    kl: float
    ce: float
    l2: float
    total: float


def total_loss(
    student_logits: Tensor,
    teachers: TeacherOutputs,
    labels,
    cfg: DistillConfig,
    l2_term: Tensor,
) -> tuple[Tensor, LossBreakdown]:
    """Sum of the KL, cross-entropy, and weight-penalty terms, with the
    component values reported alongside."""
    mixed = teacher_mixture(teachers, cfg.alpha)
    kl = kl_loss(student_logits, mixed, cfg)
    ce = ce_loss(student_logits, labels, cfg.alpha)
    total = T.add(T.add(kl, ce), l2_term)
    breakdown = LossBreakdown(
        kl=float(kl.data), ce=float(ce.data), l2=float(l2_term.data), total=float(total.data)
    )
    return total, breakdown
