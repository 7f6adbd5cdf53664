"""Battery of finite-difference gradient checks covering every
differentiable operation plus a composite whole-model pass.

Everything runs in double precision.  Sampling coordinates and offsets are
kept a safe distance from the integer lattice: bilinear interpolation has
derivative kinks there, where one-sided analytic slopes and central
differences legitimately disagree.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import tensor as T
from .deform import DeformFusionParams, deform_conv2d, predict_offsets_modulations
from .distill import DistillConfig, TeacherOutputs, ce_loss, kl_loss, total_loss
from .gradcheck import DEFAULT_TOL, GradCheckReport, grad_check
from .model import backbone_forward, init_fusion_params, l2_penalty, model_forward, preset_config
from .tensor import Tensor


def _t(arr, grad: bool = True) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def _project(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce a tensor to a scalar through a fixed random projection, so no
    gradient direction can cancel out of a plain sum."""
    r = Tensor(rng.standard_normal(out.shape))
    return T.sum_all(T.mul(out, r))


def _merge(report: GradCheckReport, sub: GradCheckReport) -> None:
    report.entries.extend(sub.entries)


def _check_conv2d(report, seed, tol):
    rng = np.random.default_rng([seed, 1])
    x = _t(rng.standard_normal((2, 3, 5, 5)))
    w = _t(rng.standard_normal((4, 3, 3, 3)) * 0.5)
    b = _t(rng.standard_normal(4) * 0.1)
    stride, pad = (1, 1) if seed % 2 == 0 else (2, 1)

    def f():
        return _project(T.conv2d(x, w, b, stride=stride, pad=pad), np.random.default_rng([seed, 2]))

    _merge(report, grad_check(f, {f"conv2d[{seed}].input": x, f"conv2d[{seed}].weight": w, f"conv2d[{seed}].bias": b}, tol))


def _nonlattice_coords(rng, h, w, m):
    ys = rng.integers(0, h - 1, m) + rng.uniform(0.15, 0.85, m)
    xs = rng.integers(0, w - 1, m) + rng.uniform(0.15, 0.85, m)
    return np.stack([ys, xs], axis=1)


def _check_bilinear(report, seed, tol):
    rng = np.random.default_rng([seed, 3])
    feat = _t(rng.standard_normal((2, 5, 5)))
    coords = _t(_nonlattice_coords(rng, 5, 5, 10))

    def f():
        return _project(T.bilinear_sample(feat, coords), np.random.default_rng([seed, 4]))

    _merge(report, grad_check(f, {f"bilinear_sample[{seed}].feature": feat, f"bilinear_sample[{seed}].coords": coords}, tol))


def _check_deform(report, seed, tol):
    rng = np.random.default_rng([seed, 5])
    n, c, h, w, o = 1, 2, 4, 4, 2
    x = _t(rng.standard_normal((n, c, h, w)))
    mw = _t(rng.standard_normal((o, c, 3, 3)) * 0.5)
    mb = _t(rng.standard_normal(o) * 0.1)
    off = _t(rng.integers(-1, 2, (n, 18, h, w)) + rng.uniform(0.15, 0.85, (n, 18, h, w)))
    mod = _t(rng.uniform(0.2, 0.9, (n, 9, h, w)))

    def f():
        return _project(deform_conv2d(x, mw, mb, off, mod, pad=1), np.random.default_rng([seed, 6]))

    _merge(
        report,
        grad_check(
            f,
            {
                f"deform_conv2d[{seed}].input": x,
                f"deform_conv2d[{seed}].weight": mw,
                f"deform_conv2d[{seed}].bias": mb,
                f"deform_conv2d[{seed}].offsets": off,
                f"deform_conv2d[{seed}].modulations": mod,
            },
            tol,
        ),
    )


def _check_softmax(report, seed, tol):
    rng = np.random.default_rng([seed, 7])
    logits = _t(rng.standard_normal((3, 5)) * 2.0)
    temp = (1.0, 3.0, 0.5)[seed % 3]

    def f():
        return _project(T.softmax_T(logits, temp), np.random.default_rng([seed, 8]))

    _merge(report, grad_check(f, {f"softmax_T[{seed}]": logits}, tol))


def _check_pool(report, seed, tol):
    rng = np.random.default_rng([seed, 9])
    h = 5 if seed % 2 == 0 else 4
    x = _t(rng.standard_normal((2, 3, h, h)))

    def f():
        return _project(T.adaptive_avg_pool(x, 2, 2), np.random.default_rng([seed, 10]))

    _merge(report, grad_check(f, {f"adaptive_avg_pool[{seed}]": x}, tol))


def _check_head(report, seed, tol):
    rng = np.random.default_rng([seed, 11])
    x = _t(rng.standard_normal((4, 6)))
    w = _t(rng.standard_normal((3, 6)) * 0.5)
    b = _t(rng.standard_normal(3) * 0.1)

    def f():
        return _project(T.linear(x, w, b), np.random.default_rng([seed, 12]))

    _merge(report, grad_check(f, {f"head[{seed}].input": x, f"head[{seed}].weight": w, f"head[{seed}].bias": b}, tol))


def _check_sample_norm(report, seed, tol):
    rng = np.random.default_rng([seed, 13])
    x = _t(rng.standard_normal((2, 3, 4, 4)))

    def f():
        return _project(T.sample_norm(x), np.random.default_rng([seed, 14]))

    _merge(report, grad_check(f, {f"sample_norm[{seed}]": x}, tol))


def _check_sigmoid(report, seed, tol):
    rng = np.random.default_rng([seed, 15])
    x = _t(rng.standard_normal((3, 4)) * 2.0)

    def f():
        return _project(T.sigmoid(x), np.random.default_rng([seed, 16]))

    _merge(report, grad_check(f, {f"sigmoid[{seed}]": x}, tol))


def _check_kl_loss(report, seed, tol):
    rng = np.random.default_rng([seed, 17])
    student = _t(rng.standard_normal((4, 5)) * 2.0)
    teacher = rng.standard_normal((4, 5)) * 2.0
    alpha = (0.5, 1.0, 0.25)[seed % 3]
    temp = (1.0, 3.0, 3.0)[seed % 3]
    literal = seed % 2 == 0
    cfg = DistillConfig(temperature=temp, alpha=alpha, literal_t2_mode=literal)

    def f():
        return kl_loss(student, teacher, cfg)

    _merge(report, grad_check(f, {f"kl_loss[{seed}]": student}, tol))


def _check_ce_loss(report, seed, tol):
    rng = np.random.default_rng([seed, 18])
    student = _t(rng.standard_normal((4, 5)) * 2.0)
    labels = rng.integers(0, 5, 4)
    alpha = (0.0, 0.5, 0.25)[seed % 3]

    def f():
        return ce_loss(student, labels, alpha)

    _merge(report, grad_check(f, {f"ce_loss[{seed}]": student}, tol))


def _check_total_loss(report, seed, tol):
    rng = np.random.default_rng([seed, 19])
    student = _t(rng.standard_normal((4, 5)) * 2.0)
    teachers = TeacherOutputs(
        logits_a=rng.standard_normal((4, 5)) * 2.0,
        logits_b=rng.standard_normal((4, 5)) * 2.0,
    )
    labels = rng.integers(0, 5, 4)
    weight = _t(rng.standard_normal((2, 3)))
    alpha = (0.0, 0.5, 1.0)[seed % 3]
    temp = (1.0, 3.0, 3.0)[seed % 3]
    cfg = DistillConfig(temperature=temp, alpha=alpha)

    def f():
        l2 = T.mul_scalar(T.sum_all(T.mul(weight, weight)), 1e-2)
        return total_loss(student, teachers, labels, cfg, l2)[0]

    _merge(
        report,
        grad_check(f, {f"total_loss[{seed}].student": student, f"total_loss[{seed}].l2_weight": weight}, tol),
    )


def _lattice_margin(cfg, params, images) -> float:
    """Smallest distance of any deformable sampling position from the
    integer lattice.  Central differences are only a valid oracle when the
    finite-difference interval stays inside one bilinear cell."""
    feat_a = backbone_forward(cfg.backbone_a, params, "backbone_a", images)
    feat_b = backbone_forward(cfg.backbone_b, params, "backbone_b", images)
    fused = T.concat_channels(feat_a, feat_b)
    dfp = DeformFusionParams(
        params["fusion.main_weight"], params["fusion.main_bias"],
        params["fusion.predictor_weight"], params["fusion.predictor_bias"],
    )
    offsets, _ = predict_offsets_modulations(fused, dfp)
    positions = offsets.data + 0.0  # base grid entries are integers
    return float(np.abs(positions - np.rint(positions)).min())


COMPOSITE_SEED = 1


def _check_composite_model(report, tol, seed=COMPOSITE_SEED):
    """Whole-network pass on the micro preset: every parameter against
    central differences.  The offset predictor is randomised away from its
    zero init so the sampling positions sit off the lattice; the margin is
    audited before checking."""
    cfg = preset_config("micro")
    rng = np.random.default_rng([seed, 20])
    params = init_fusion_params(cfg, rng, dtype=np.float64)
    for name in ("fusion.predictor_weight", "fusion.predictor_bias"):
        t = params[name]
        t.data = rng.standard_normal(t.shape) * 0.3
    images = Tensor(rng.standard_normal((2, 3, 8, 8)))
    labels = rng.integers(0, cfg.num_classes, 2)
    margin = _lattice_margin(cfg, params, images)
    if margin < 2e-4:
        raise RuntimeError(
            f"composite check seed {seed} puts a sampling position {margin:.2e} "
            "from the lattice; pick a different seed"
        )

    def f():
        logits = model_forward(cfg, params, images, training=False)
        ce = ce_loss(logits, labels, alpha=0.0)
        return T.add(ce, l2_penalty(params, cfg.l2_lambda))

    _merge(report, grad_check(f, {f"model.{k}": v for k, v in params.items()}, tol))


def _check_fusion_block(report, seed, tol):
    """Offset/modulation prediction feeding the deformable conv, end to end."""
    rng = np.random.default_rng([seed, 21])
    n, c, h, w, o = 1, 3, 4, 4, 2
    fused = _t(rng.standard_normal((n, c, h, w)))
    dfp = DeformFusionParams.initialise(c, o, rng, dtype=np.float64)
    dfp.predictor_weight.data = rng.standard_normal(dfp.predictor_weight.shape) * 0.3
    dfp.predictor_bias.data = rng.standard_normal(dfp.predictor_bias.shape) * 0.3

    def f():
        off, mod = predict_offsets_modulations(fused, dfp)
        out = deform_conv2d(fused, dfp.main_weight, dfp.main_bias, off, mod, pad=1)
        return _project(out, np.random.default_rng([seed, 22]))

    inputs = {f"fusion_block[{seed}].input": fused}
    inputs.update({f"fusion_block[{seed}].{k}": v for k, v in dfp.tensors().items()})
    _merge(report, grad_check(f, inputs, tol))


def run_battery(
    tol: float = DEFAULT_TOL,
    seeds: Iterable[int] = (0, 1, 2),
    include_model: bool = True,
) -> GradCheckReport:
    report = GradCheckReport(tol=tol)
    for seed in seeds:
        _check_conv2d(report, seed, tol)
        _check_bilinear(report, seed, tol)
        _check_deform(report, seed, tol)
        _check_softmax(report, seed, tol)
        _check_pool(report, seed, tol)
        _check_head(report, seed, tol)
        _check_sample_norm(report, seed, tol)
        _check_sigmoid(report, seed, tol)
        _check_kl_loss(report, seed, tol)
        _check_ce_loss(report, seed, tol)
        _check_total_loss(report, seed, tol)
        _check_fusion_block(report, seed, tol)
    if include_model:
        _check_composite_model(report, tol)
    return report
