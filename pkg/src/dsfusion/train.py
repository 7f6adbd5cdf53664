"""Training harness: seeded epoch loops with gradient accumulation,
per-sample dropout masking, and deterministic per-epoch metrics.

Dropout masks are keyed by (seed, epoch, dataset index) rather than drawn
from a shared stream, so the gradients of k accumulated mini-batches match
one k-times-larger batch exactly regardless of how samples are grouped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .distill import DistillConfig, TeacherOutputs, ce_loss, total_loss
from .metrics import evaluate
from .optim import AdamState, TrainConfig, accumulate_and_step, cosine_lr


@dataclass
class EpochRow:
    epoch: int
    lr: float
    loss: float
    kl: float
    ce: float
    l2: float
    test_accuracy: float


def per_sample_dropout_masks(
    shape, p: float, seed: int, epoch: int, sample_ids
) -> Optional[np.ndarray]:
    """Scaled keep-masks, one per sample, each drawn from its own
    (seed, epoch, id)-keyed generator."""
    if p == 0.0:
        return None
    sample_ids = np.asarray(sample_ids)
    masks = np.empty((len(sample_ids),) + tuple(shape), dtype=np.float32)
    for row, gid in enumerate(sample_ids):
        rng = np.random.default_rng([seed, 0xD0, epoch, int(gid)])
        masks[row] = (rng.random(shape) >= p) / (1.0 - p)
    return masks


def make_ce_loss_fn(model, seed: int) -> Callable:
    """Plain supervised objective: full-weight cross-entropy plus the L2
    penalty.  Batch layout: (images, labels, sample_ids, epoch)."""

    def loss_fn(batch):
        images, labels, sample_ids, epoch = batch
        mask = per_sample_dropout_masks(
            model.dropout_shape, model.config.dropout_rate, seed, epoch, sample_ids
        )
        logits = model.forward(images, training=True, dropout_mask=mask)
        ce = ce_loss(logits, labels, alpha=0.0)
        l2 = model.l2_term()
        loss = T.add(ce, l2)
        info = {"kl": 0.0, "ce": float(ce.data), "l2": float(l2.data), "loss": float(loss.data)}
        return loss, info

    return loss_fn


def make_distill_loss_fn(model, teacher_a, teacher_b, dcfg: DistillConfig, seed: int) -> Callable:
    """Distillation objective against two frozen teachers."""

    def loss_fn(batch):
        images, labels, sample_ids, epoch = batch
        teachers = TeacherOutputs(
            logits_a=teacher_a.forward(images, training=False).data,
            logits_b=teacher_b.forward(images, training=False).data,
        )
        mask = per_sample_dropout_masks(
            model.dropout_shape, model.config.dropout_rate, seed, epoch, sample_ids
        )
        logits = model.forward(images, training=True, dropout_mask=mask)
        loss, bd = total_loss(logits, teachers, labels, dcfg, model.l2_term())
        info = {"kl": bd.kl, "ce": bd.ce, "l2": bd.l2, "loss": bd.total}
        return loss, info

    return loss_fn


def epoch_batches(n: int, tcfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    """Deterministic shuffled mini-batch index lists for one epoch; a final
    short batch is dropped (accumulation requires equal sizes)."""
    order = np.random.default_rng([tcfg.seed, 0x5F, epoch]).permutation(n)
    bs = min(tcfg.batch_size, n)
    chunks = [order[i : i + bs] for i in range(0, n, bs)]
    if len(chunks) > 1 and len(chunks[-1]) < bs:
        chunks = chunks[:-1]
    return chunks


def fit(
    model,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    tcfg: TrainConfig,
    loss_fn: Callable,
    epochs: Optional[int] = None,
    log: Optional[Callable[[str], None]] = None,
) -> list[EpochRow]:
    """Run the optimizer for ``epochs`` (default: the schedule length) and
    return one metrics row per epoch."""
    epochs = tcfg.total_epochs if epochs is None else epochs
    state = AdamState(model.params)
    rows: list[EpochRow] = []
    for epoch in range(epochs):
        lr = cosine_lr(min(epoch, tcfg.total_epochs), tcfg)
        chunks = epoch_batches(len(train_ds), tcfg, epoch)
        sums = {"loss": 0.0, "kl": 0.0, "ce": 0.0, "l2": 0.0}
        n_groups = 0
        for start in range(0, len(chunks), tcfg.accumulation_steps):
            group = chunks[start : start + tcfg.accumulation_steps]
            batches = [
                (train_ds.images[idx], train_ds.labels[idx], idx, epoch) for idx in group
            ]
            loss_val, info = accumulate_and_step(loss_fn, batches, model.params, state, lr, tcfg)
            sums["loss"] += loss_val
            for key in ("kl", "ce", "l2"):
                sums[key] += info.get(key, 0.0)
            n_groups += 1
        report = evaluate(model, test_ds)
        row = EpochRow(
            epoch=epoch,
            lr=lr,
            loss=sums["loss"] / max(n_groups, 1),
            kl=sums["kl"] / max(n_groups, 1),
            ce=sums["ce"] / max(n_groups, 1),
            l2=sums["l2"] / max(n_groups, 1),
            test_accuracy=report.accuracy,
        )
        rows.append(row)
        if log:
            log(
                f"epoch {row.epoch:3d}  lr {row.lr:.3e}  loss {row.loss:.4f}  "
                f"test_acc {row.test_accuracy:.4f}"
            )
    return rows


def rows_to_csv(rows: list[EpochRow]) -> str:
    lines = ["epoch,lr,loss,kl,ce,l2,test_accuracy"]
    for r in rows:
        lines.append(
            f"{r.epoch},{r.lr!r},{r.loss!r},{r.kl!r},{r.ce!r},{r.l2!r},{r.test_accuracy!r}"
        )
    return "\n".join(lines) + "\n"
