"""Evaluation metrics, penultimate-feature extraction, an exact O(n^2)
t-SNE with perplexity bisection, and deterministic CSV/SVG emitters."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset

TSNE_MAX_POINTS = 5000


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # confusion[true, pred]
    per_class_accuracy: np.ndarray
    n_samples: int


def _batched_forward(model, images: np.ndarray, batch_size: int, return_features: bool):
    outs = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        res = model.forward(chunk, training=False, return_features=return_features)
        outs.append(res[1].data if return_features else res.data)
    return np.concatenate(outs)


def evaluate(model, dataset: LabeledDataset, batch_size: int = 64) -> EvalReport:
    """Argmax-of-logits accuracy and confusion matrix; ties break toward the
    smaller class index."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    c = dataset.num_classes
    if c != model.num_classes:
        raise ValueError(
            f"evaluate: dataset has {c} classes but the model emits {model.num_classes}"
        )
    logits = _batched_forward(model, dataset.images, batch_size, return_features=False)
    preds = np.argmax(logits, axis=1)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, preds), 1)
    row_totals = confusion.sum(axis=1)
    per_class = np.divide(
        np.diag(confusion), row_totals,
        out=np.zeros(c, dtype=np.float64), where=row_totals > 0,
    )
    return EvalReport(
        accuracy=float(np.trace(confusion) / len(dataset)),
        confusion=confusion,
        per_class_accuracy=per_class,
        n_samples=len(dataset),
    )


def extract_features(model, dataset: LabeledDataset, batch_size: int = 64) -> np.ndarray:
    """Post-flatten, pre-head activations, one row per sample (eval mode)."""
    if len(dataset) == 0:
        raise ValueError("extract_features: empty dataset")
    return _batched_forward(model, dataset.images, batch_size, return_features=True)


# ---------------------------------------------------------------------------
# exact t-SNE
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    momentum_switch_iter: int = 250
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.perplexity < 2:
            raise ValueError(f"perplexity must be >= 2, got {self.perplexity}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class AffinityResult:
    joint: np.ndarray  # symmetric, sums to 1
    conditional: np.ndarray  # row-stochastic, zero diagonal
    betas: np.ndarray
    converged: np.ndarray  # per-point bisection success


@dataclass
class TsneResult:
    embedding: np.ndarray  # n x 2
    kl_trace: list[float] = field(default_factory=list)
    affinities: AffinityResult | None = None

    @property
    def converged(self) -> np.ndarray:
        return self.affinities.converged


def _squared_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _row_entropy_bits(d_row: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Conditional affinities for one point at precision ``beta`` and their
    Shannon entropy in bits."""
    shifted = d_row - d_row.min()
    e = np.exp(-beta * shifted)
    s = e.sum()
    p = e / s
    entropy_nats = np.log(s) + beta * float((p * shifted).sum())
    return p, entropy_nats / np.log(2.0)


def joint_affinities(
    x: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 50
) -> AffinityResult:
    """Gaussian conditional affinities with per-point bandwidths bisected to
    match the log2-perplexity entropy, then symmetrised and normalised."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    d = _squared_distances(x)
    target = np.log2(perplexity)
    conditional = np.zeros((n, n))
    betas = np.ones(n)
    converged = np.zeros(n, dtype=bool)
    for i in range(n):
        d_row = np.delete(d[i], i)
        beta = 1.0
        beta_min, beta_max = 0.0, np.inf
        p_row = None
        for _ in range(max_iter):
            p_row, entropy = _row_entropy_bits(d_row, beta)
            diff = entropy - target
            if abs(diff) <= tol * target:
                converged[i] = True
                break
            if diff > 0:  # too flat: sharpen
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else 0.5 * (beta + beta_max)
            else:
                beta_max = beta
                beta = 0.5 * (beta + beta_min)
        betas[i] = beta
        conditional[i, np.arange(n) != i] = p_row
    joint = (conditional + conditional.T) / (2.0 * n)
    joint = np.maximum(joint, 1e-12)
    joint /= joint.sum()
    return AffinityResult(joint=joint, conditional=conditional, betas=betas, converged=converged)


def _kl_to_embedding(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(P || Q) for the Student-t embedding affinities, plus the pieces
    reused by the gradient (unnormalised q and normalised Q)."""
    num = 1.0 / (1.0 + _squared_distances(y))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    kl = float((p * (np.log(p) - np.log(q))).sum())
    return kl, num, q


def tsne(x: np.ndarray, cfg: TsneConfig) -> TsneResult:
    """Exact t-SNE by momentum gradient descent on KL(P || Q).

    Early iterations exaggerate P; the KL trace is always reported against
    the true P.  Deterministic for a fixed seed.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"tsne: input must be n x d, got shape {x.shape}")
    n = len(x)
    if n < 10:
        raise ValueError(f"tsne: need at least 10 points, got {n}")
    if n > TSNE_MAX_POINTS:
        raise ValueError(f"tsne: {n} points exceeds the exact-method cap of {TSNE_MAX_POINTS}")
    if bool(np.all(x == x[0])):
        raise ValueError("tsne: all rows identical; affinities are degenerate")
    perplexity = min(cfg.perplexity, (n - 1) / 3.0)
    if perplexity < 2:
        raise ValueError(f"tsne: clamped perplexity {perplexity:.2f} < 2; too few points")
    aff = joint_affinities(x, perplexity)
    p_true = aff.joint

    rng = np.random.default_rng([cfg.seed, 0x75E])
    y = rng.standard_normal((n, 2)) * 1e-4
    vel = np.zeros_like(y)
    trace: list[float] = []
    for it in range(cfg.iterations):
        kl, num, q = _kl_to_embedding(p_true, y)
        trace.append(kl)
        p_eff = p_true * cfg.exaggeration if it < cfg.exaggeration_iters else p_true
        g = (p_eff - q) * num
        grad = 4.0 * (g.sum(axis=1)[:, None] * y - g @ y)
        momentum = cfg.momentum_start if it < cfg.momentum_switch_iter else cfg.momentum_final
        vel = momentum * vel - cfg.learning_rate * grad
        y = y + vel
        y = y - y.mean(axis=0)
    trace.append(_kl_to_embedding(p_true, y)[0])
    return TsneResult(embedding=y, kl_trace=trace, affinities=aff)


# ---------------------------------------------------------------------------
# artifact emitters
# ---------------------------------------------------------------------------

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)
_SVG_W, _SVG_H, _SVG_PAD = 640, 480, 20


def emit_scatter_svg(y: np.ndarray, labels, path) -> None:
    """Standalone SVG scatter plot, one circle per point, a fixed 10-colour
    palette cycling by label.  Byte-deterministic for fixed inputs."""
    y = np.asarray(y, dtype=np.float64)
    labels = np.asarray(labels)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValueError(f"emit_scatter_svg: embedding must be n x 2, got {y.shape}")
    if len(y) == 0:
        raise ValueError("emit_scatter_svg: empty embedding")
    if len(labels) != len(y):
        raise ValueError(f"emit_scatter_svg: {len(y)} points but {len(labels)} labels")
    lo = y.min(axis=0)
    hi = y.max(axis=0)
    span = hi - lo
    margin = 0.05 * np.where(span > 0, span, 1.0)
    lo = lo - margin
    hi = hi + margin
    scale = np.array([_SVG_W - 2 * _SVG_PAD, _SVG_H - 2 * _SVG_PAD]) / (hi - lo)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
    ]
    for (px, py), lab in zip(y, labels):
        cx = _SVG_PAD + (px - lo[0]) * scale[0]
        cy = _SVG_H - _SVG_PAD - (py - lo[1]) * scale[1]
        colour = PALETTE[int(lab) % len(PALETTE)]
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="{colour}"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def write_embedding_csv(path, y: np.ndarray, labels) -> None:
    lines = ["index,label,x,y"]
    for i, ((px, py), lab) in enumerate(zip(np.asarray(y, dtype=np.float64), labels)):
        lines.append(f"{i},{int(lab)},{float(px)!r},{float(py)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_metrics_csv(path, report: EvalReport) -> None:
    lines = ["metric,value"]
    lines.append(f"accuracy,{report.accuracy!r}")
    lines.append(f"n_samples,{report.n_samples}")
    for i, acc in enumerate(report.per_class_accuracy):
        lines.append(f"per_class_accuracy_{i},{float(acc)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_confusion_csv(path, report: EvalReport, class_names=None) -> None:
    c = report.confusion.shape[0]
    names = list(class_names) if class_names else [str(i) for i in range(c)]
    lines = ["true\\pred," + ",".join(names)]
    for i in range(c):
        lines.append(names[i] + "," + ",".join(str(v) for v in report.confusion[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
