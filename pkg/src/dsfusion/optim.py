"""Adam, the cosine learning-rate schedule, and gradient accumulation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, mul_scalar, zero_grads


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    total_epochs: int = 50
    eta_min: float = 0.0
    accumulation_steps: int = 4
    batch_size: int = 16
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.accumulation_steps < 1:
            raise ValueError(f"accumulation_steps must be >= 1, got {self.accumulation_steps}")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def cosine_lr(epoch: float, cfg: TrainConfig) -> float:
    """Half-cosine decay from initial_lr at epoch 0 to eta_min at the final
    epoch; stepped once per epoch."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    span = cfg.initial_lr - cfg.eta_min
    return cfg.eta_min + 0.5 * span * (1.0 + math.cos(math.pi * epoch / cfg.total_epochs))


class AdamState:
    """First/second moment arrays mirroring the parameter shapes, plus the
    shared step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update in place; a missing gradient counts as
    zero (the parameter stays put)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param {p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def accumulate_and_step(
    loss_fn: Callable,
    batches: Sequence,
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[float, dict[str, float]]:
    """One optimizer update from k mini-batches.

    ``loss_fn(batch)`` returns a scalar loss tensor that already averages
    over its batch, plus an info dict.  Each loss is scaled by 1/k before
    backward so the summed gradients match a single k-times-larger batch;
    after the Adam step all gradients are zeroed.

    Returns the accumulated (scaled) loss and the matching averaged info.
    """
    if not batches:
        raise ValueError("accumulate_and_step: no batches")
    sizes = {len(b[0]) for b in batches}
    if len(sizes) != 1:
        raise ValueError(f"accumulate_and_step: unequal batch sizes {sorted(sizes)}")
    k = len(batches)
    total = 0.0
    info_sum: dict[str, float] = {}
    for batch in batches:
        loss, info = loss_fn(batch)
        scaled = mul_scalar(loss, 1.0 / k)
        backward(scaled)
        total += float(scaled.data)
        for key, val in info.items():
            info_sum[key] = info_sum.get(key, 0.0) + val / k
    adam_step(params, state, lr, cfg)
    zero_grads(params.values())
    return total, info_sum
