"""Network assembly: the two surrogate backbones, the fusion block, and the
affine classification head, plus analytic parameter/MAC accounting.

The paper-scale preset reproduces the reference dimensions (1792- and
768-channel streams at 7x7, 2560 fused channels, 64x7x7 fused output, a
3136-wide flatten and an 89-way head).  The surrogate backbones are small
stride-2 conv stacks with per-sample normalisation; they stand in for the
pretrained streams, whose weights are out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .deform import (
    KERNEL,
    MODULATION_CHANNELS,
    OFFSET_CHANNELS,
    DeformFusionParams,
    fusion_forward,
)
from .tensor import Tensor

NONLINEARITIES = {"relu": T.relu, "tanh": T.tanh}


@dataclass(frozen=True)
class BackboneConfig:
    """One surrogate stream: a stack of stride-2 3x3 convs (one per stage
    channel width) followed by a stride-1 refinement conv, each with a
    nonlinearity and per-sample normalisation."""

    stream: str
    stage_channels: tuple[int, ...]
    out_channels: int
    out_hw: int
    nonlinearity: str = "relu"

    def __post_init__(self):
        if self.out_channels <= 0:
            raise ValueError(f"backbone {self.stream}: out_channels must be positive")
        if not self.stage_channels:
            raise ValueError(f"backbone {self.stream}: need at least one stage")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"backbone {self.stream}: unknown nonlinearity {self.nonlinearity!r}")

    @property
    def input_hw(self) -> int:
        return self.out_hw * 2 ** len(self.stage_channels)


@dataclass(frozen=True)
class FusionNetConfig:
    backbone_a: BackboneConfig
    backbone_b: BackboneConfig
    fusion_channels: int = 64
    pooled_hw: int = 7
    num_classes: int = 89
    dropout_rate: float = 0.5
    l2_lambda: float = 1e-4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.backbone_a.out_hw != self.backbone_b.out_hw:
            raise ValueError("backbone output spatial sizes must match for fusion")

    @property
    def fused_channels(self) -> int:
        return self.backbone_a.out_channels + self.backbone_b.out_channels

    @property
    def flatten_dim(self) -> int:
        return self.fusion_channels * self.pooled_hw * self.pooled_hw


@dataclass(frozen=True)
class SingleStreamConfig:
    """A lone backbone with pooling and a head; used for teacher models."""

    backbone: BackboneConfig
    pooled_hw: int
    num_classes: int
    dropout_rate: float = 0.5
    l2_lambda: float = 1e-4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @property
    def flatten_dim(self) -> int:
        return self.backbone.out_channels * self.pooled_hw * self.pooled_hw


# ---------------------------------------------------------------------------
# parameter initialisation
# ---------------------------------------------------------------------------

def _conv_init(out_ch: int, in_ch: int, rng: np.random.Generator, dtype) -> Tensor:
    std = float(np.sqrt(2.0 / (in_ch * KERNEL * KERNEL)))
    w = rng.standard_normal((out_ch, in_ch, KERNEL, KERNEL)) * std
    return Tensor(w.astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_backbone_params(
    cfg: BackboneConfig, prefix: str, rng: np.random.Generator, dtype=np.float32, in_channels: int = 3
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    prev = in_channels
    for si, ch in enumerate(cfg.stage_channels):
        params[f"{prefix}.stage{si}.weight"] = _conv_init(ch, prev, rng, dtype)
        params[f"{prefix}.stage{si}.bias"] = _zeros(ch, dtype)
        prev = ch
    params[f"{prefix}.refine.weight"] = _conv_init(cfg.out_channels, prev, rng, dtype)
    params[f"{prefix}.refine.bias"] = _zeros(cfg.out_channels, dtype)
    return params


def _head_init(num_classes: int, flatten_dim: int, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    std = float(np.sqrt(1.0 / flatten_dim))
    w = rng.standard_normal((num_classes, flatten_dim)) * std
    return {
        "head.weight": Tensor(w.astype(dtype), requires_grad=True),
        "head.bias": _zeros(num_classes, dtype),
    }


def init_fusion_params(config: FusionNetConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params = init_backbone_params(config.backbone_a, "backbone_a", rng, dtype)
    params.update(init_backbone_params(config.backbone_b, "backbone_b", rng, dtype))
    dfp = DeformFusionParams.initialise(config.fused_channels, config.fusion_channels, rng, dtype)
    for name, t in dfp.tensors().items():
        params[f"fusion.{name}"] = t
    params.update(_head_init(config.num_classes, config.flatten_dim, rng, dtype))
    return params


def init_single_params(config: SingleStreamConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params = init_backbone_params(config.backbone, "backbone", rng, dtype)
    params.update(_head_init(config.num_classes, config.flatten_dim, rng, dtype))
    return params


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def backbone_forward(cfg: BackboneConfig, params: dict[str, Tensor], prefix: str, images: Tensor) -> Tensor:
    if images.shape[1] != params[f"{prefix}.stage0.weight"].shape[1]:
        raise ValueError(
            f"backbone {cfg.stream}: input has {images.shape[1]} channels, "
            f"expected {params[f'{prefix}.stage0.weight'].shape[1]}"
        )
    act = NONLINEARITIES[cfg.nonlinearity]
    x = images
    hw = images.shape[2]
    if images.shape[2] != images.shape[3]:
        raise ValueError(f"backbone {cfg.stream}: expects square inputs, got {images.shape[2:]}")
    for si in range(len(cfg.stage_channels)):
        if hw % 2 != 0:
            raise ValueError(
                f"backbone {cfg.stream}: spatial size {hw} not divisible by stage strides "
                f"(input {images.shape[2]} cannot reach {cfg.out_hw})"
            )
        x = T.conv2d(x, params[f"{prefix}.stage{si}.weight"], params[f"{prefix}.stage{si}.bias"], stride=2, pad=1)
        x = T.sample_norm(act(x))
        hw //= 2
    if hw != cfg.out_hw:
        raise ValueError(
            f"backbone {cfg.stream}: input {images.shape[2]} reduces to {hw}, configured for {cfg.out_hw}"
        )
    x = T.conv2d(x, params[f"{prefix}.refine.weight"], params[f"{prefix}.refine.bias"], stride=1, pad=1)
    return T.sample_norm(act(x))


def _deform_view(params: dict[str, Tensor]) -> DeformFusionParams:
    return DeformFusionParams(
        main_weight=params["fusion.main_weight"],
        main_bias=params["fusion.main_bias"],
        predictor_weight=params["fusion.predictor_weight"],
        predictor_bias=params["fusion.predictor_bias"],
    )


def model_forward(
    config: FusionNetConfig,
    params: dict[str, Tensor],
    images: Tensor,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    dropout_mask: Optional[np.ndarray] = None,
    return_features: bool = False,
):
    """Run the full pipeline and return pre-softmax logits (N x classes).

    Class probabilities, when needed, are softmax_T(logits, 1).
    """
    feat_a = backbone_forward(config.backbone_a, params, "backbone_a", images)
    feat_b = backbone_forward(config.backbone_b, params, "backbone_b", images)
    fused = fusion_forward(feat_a, feat_b, _deform_view(params), config.pooled_hw)
    dropped = T.dropout(fused, config.dropout_rate, training, rng=rng, mask=dropout_mask)
    features = T.flatten(dropped)
    logits = T.linear(features, params["head.weight"], params["head.bias"])
    if return_features:
        return logits, features
    return logits


def single_forward(
    config: SingleStreamConfig,
    params: dict[str, Tensor],
    images: Tensor,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    dropout_mask: Optional[np.ndarray] = None,
    return_features: bool = False,
):
    feat = backbone_forward(config.backbone, params, "backbone", images)
    pooled = T.adaptive_avg_pool(feat, config.pooled_hw, config.pooled_hw)
    dropped = T.dropout(pooled, config.dropout_rate, training, rng=rng, mask=dropout_mask)
    features = T.flatten(dropped)
    logits = T.linear(features, params["head.weight"], params["head.bias"])
    if return_features:
        return logits, features
    return logits


def l2_penalty(params: dict[str, Tensor], lam: float) -> Tensor:
    """lambda * sum of squared conv/affine weights; biases are excluded."""
    total: Optional[Tensor] = None
    for name, t in params.items():
        if not name.endswith("weight"):
            continue
        sq = T.sum_all(T.mul(t, t))
        total = sq if total is None else T.add(total, sq)
    if total is None:
        raise ValueError("l2_penalty: no weight tensors found")
    return T.mul_scalar(total, float(lam))


@dataclass
class FusionNet:
    """Config + parameters with a convenience forward over raw arrays."""

    config: FusionNetConfig
    params: dict[str, Tensor]

    @classmethod
    def initialise(cls, config: FusionNetConfig, seed: int, dtype=np.float32) -> "FusionNet":
        rng = np.random.default_rng([seed, 0xD5])
        return cls(config, init_fusion_params(config, rng, dtype))

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def dropout_shape(self) -> tuple[int, int, int]:
        return (self.config.fusion_channels, self.config.pooled_hw, self.config.pooled_hw)

    def forward(self, images, **kw):
        x = images if isinstance(images, Tensor) else Tensor(images)
        return model_forward(self.config, self.params, x, **kw)

    def l2_term(self) -> Tensor:
        return l2_penalty(self.params, self.config.l2_lambda)


@dataclass
class SingleStreamNet:
    config: SingleStreamConfig
    params: dict[str, Tensor]

    @classmethod
    def initialise(cls, config: SingleStreamConfig, seed: int, dtype=np.float32) -> "SingleStreamNet":
        rng = np.random.default_rng([seed, 0x51])
        return cls(config, init_single_params(config, rng, dtype))

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def dropout_shape(self) -> tuple[int, int, int]:
        return (self.config.backbone.out_channels, self.config.pooled_hw, self.config.pooled_hw)

    def forward(self, images, **kw):
        x = images if isinstance(images, Tensor) else Tensor(images)
        return single_forward(self.config, self.params, x, **kw)

    def l2_term(self) -> Tensor:
        return l2_penalty(self.params, self.config.l2_lambda)


# ---------------------------------------------------------------------------
# analytic accounting
# ---------------------------------------------------------------------------

def conv_param_count(out_ch: int, in_ch: int, k: int = KERNEL) -> int:
    return out_ch * in_ch * k * k + out_ch


def _backbone_param_count(cfg: BackboneConfig, in_channels: int = 3) -> int:
    total = 0
    prev = in_channels
    for ch in cfg.stage_channels:
        total += conv_param_count(ch, prev)
        prev = ch
    return total + conv_param_count(cfg.out_channels, prev)


def count_params(config: FusionNetConfig) -> dict[str, int]:
    """Analytic per-module parameter counts derived from the config shapes."""
    fused = config.fused_channels
    counts = {
        "backbone_a": _backbone_param_count(config.backbone_a),
        "backbone_b": _backbone_param_count(config.backbone_b),
        "fusion": conv_param_count(config.fusion_channels, fused)
        + conv_param_count(OFFSET_CHANNELS + MODULATION_CHANNELS, fused),
        "head": config.num_classes * config.flatten_dim + config.num_classes,
    }
    counts["total"] = sum(counts.values())
    return counts


def conv_macs(out_ch: int, in_ch: int, k: int, out_h: int, out_w: int) -> int:
    """Multiply-accumulates of one convolution layer, per sample."""
    return out_ch * in_ch * k * k * out_h * out_w


def affine_macs(fan_in: int, fan_out: int) -> int:
    return fan_in * fan_out


def estimate_flops(config: FusionNetConfig, input_hw: int) -> dict[str, int]:
    """Per-sample MAC estimate over all conv/affine layers.

    An estimate only: the surrogate backbones do not share the reference
    streams' internals, so their compute is not comparable with published
    model-complexity figures.
    """
    layers: dict[str, int] = {}

    def walk_backbone(cfg: BackboneConfig, prefix: str) -> int:
        hw = input_hw
        prev = 3
        for si, ch in enumerate(cfg.stage_channels):
            if hw % 2 != 0:
                raise ValueError(f"estimate_flops: spatial size {hw} not halvable at {prefix}.stage{si}")
            hw //= 2
            layers[f"{prefix}.stage{si}"] = conv_macs(ch, prev, KERNEL, hw, hw)
            prev = ch
        layers[f"{prefix}.refine"] = conv_macs(cfg.out_channels, prev, KERNEL, hw, hw)
        return hw

    hw_a = walk_backbone(config.backbone_a, "backbone_a")
    walk_backbone(config.backbone_b, "backbone_b")
    fused = config.fused_channels
    layers["fusion.predictor"] = conv_macs(OFFSET_CHANNELS + MODULATION_CHANNELS, fused, KERNEL, hw_a, hw_a)
    layers["fusion.main"] = conv_macs(config.fusion_channels, fused, KERNEL, hw_a, hw_a)
    layers["head"] = affine_macs(config.flatten_dim, config.num_classes)

    conv_total = sum(v for k_, v in layers.items() if k_ != "head")
    result = dict(layers)
    result["conv_total"] = conv_total
    result["affine_total"] = layers["head"]
    result["total"] = conv_total + layers["head"]
    return result


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def preset_config(name: str, num_classes: Optional[int] = None) -> FusionNetConfig:
    """Named configurations.

    paper: the reference dimensions (224x224 inputs) — shape and parameter
           accounting; far too large to train here.
    desk:  32x32 inputs, small channels — all training runs.
    micro: 8x8 inputs, tiny channels, smooth nonlinearity — gradient checks.
    """
    if name == "paper":
        cfg = FusionNetConfig(
            backbone_a=BackboneConfig("a", (32, 64, 128, 256, 512), 1792, 7, "relu"),
            backbone_b=BackboneConfig("b", (24, 48, 96, 192, 384), 768, 7, "relu"),
            fusion_channels=64,
            pooled_hw=7,
            num_classes=89,
        )
    elif name == "desk":
        cfg = FusionNetConfig(
            backbone_a=BackboneConfig("a", (16, 32, 64), 64, 4, "relu"),
            backbone_b=BackboneConfig("b", (8, 16, 32), 32, 4, "relu"),
            fusion_channels=16,
            pooled_hw=4,
            num_classes=10,
        )
    elif name == "micro":
        cfg = FusionNetConfig(
            backbone_a=BackboneConfig("a", (3, 4), 4, 2, "tanh"),
            backbone_b=BackboneConfig("b", (2, 3), 3, 2, "tanh"),
            fusion_channels=3,
            pooled_hw=2,
            num_classes=3,
        )
    else:
        raise ValueError(f"unknown preset {name!r} (choose paper, desk, or micro)")
    if num_classes is not None:
        cfg = replace(cfg, num_classes=num_classes)
    return cfg


def teacher_config(config: FusionNetConfig, stream: str) -> SingleStreamConfig:
    """Single-stream teacher derived from one of the student's backbones."""
    if stream == "a":
        bb = config.backbone_a
    elif stream == "b":
        bb = config.backbone_b
    else:
        raise ValueError(f"stream must be 'a' or 'b', got {stream!r}")
    return SingleStreamConfig(
        backbone=bb,
        pooled_hw=config.pooled_hw,
        num_classes=config.num_classes,
        dropout_rate=config.dropout_rate,
        l2_lambda=config.l2_lambda,
    )
