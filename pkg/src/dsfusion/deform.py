"""Deformable dynamic fusion: offset/modulation prediction and the
modulated deformable convolution built on bilinear sampling.

Offset channel layout for kernel size K: taps are enumerated row-major as
k = ki*K + kj, with channel 2k holding the vertical displacement and
channel 2k+1 the horizontal one (pixel units).  Modulation channel k is
the multiplicative weight of tap k, already squashed into (0, 1) by the
predictor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tensor import _bilinear_grads, _bilinear_pieces, _bilinear_value
from .tensor import _tap_forward, _tap_grad_input, _tap_grad_weight

KERNEL = 3
OFFSET_CHANNELS = 2 * KERNEL * KERNEL  # 18
MODULATION_CHANNELS = KERNEL * KERNEL  # 9


@dataclass
class DeformFusionParams:
    """Weights of the fusion block: the main 3x3 deformable convolution and
    the 3x3 predictor that emits 18 offset + 9 modulation channels.

    The predictor starts at exactly zero so the initial deformation is the
    identity: offsets 0, modulations logistic(0) = 0.5.
    """

    main_weight: Tensor  # out_ch x in_ch x 3 x 3
    main_bias: Tensor  # out_ch
    predictor_weight: Tensor  # 27 x in_ch x 3 x 3
    predictor_bias: Tensor  # 27

    @property
    def in_channels(self) -> int:
        return self.main_weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.main_weight.shape[0]

    @classmethod
    def initialise(
        cls,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> "DeformFusionParams":
        std = float(np.sqrt(2.0 / (in_channels * KERNEL * KERNEL)))
        main_w = (rng.standard_normal((out_channels, in_channels, KERNEL, KERNEL)) * std).astype(dtype)
        pred_shape = (OFFSET_CHANNELS + MODULATION_CHANNELS, in_channels, KERNEL, KERNEL)
        return cls(
            main_weight=Tensor(main_w, requires_grad=True),
            main_bias=Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True),
            predictor_weight=Tensor(np.zeros(pred_shape, dtype=dtype), requires_grad=True),
            predictor_bias=Tensor(np.zeros(pred_shape[0], dtype=dtype), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {
            "main_weight": self.main_weight,
            "main_bias": self.main_bias,
            "predictor_weight": self.predictor_weight,
            "predictor_bias": self.predictor_bias,
        }


def predict_offsets_modulations(fused: Tensor, params: DeformFusionParams):
    """Predict per-position sampling offsets and (0,1) modulation weights
    from the fused feature map itself."""
    if fused.shape[1] != params.in_channels:
        raise ValueError(
            f"predict_offsets_modulations: input has {fused.shape[1]} channels, "
            f"params expect {params.in_channels}"
        )
    raw = T.conv2d(fused, params.predictor_weight, params.predictor_bias, stride=1, pad=1)
    offsets = T.slice_channels(raw, 0, OFFSET_CHANNELS)
    modulations = T.sigmoid(
        T.slice_channels(raw, OFFSET_CHANNELS, OFFSET_CHANNELS + MODULATION_CHANNELS)
    )
    return offsets, modulations


def deform_conv2d(
    x: Tensor,
    main_weight: Tensor,
    main_bias: Optional[Tensor],
    offsets: Tensor,
    modulations: Tensor,
    pad: int = 1,
    stride: int = 1,
) -> Tensor:
    """Modulated deformable convolution.

    Each kernel tap samples the input at its regular grid position plus a
    predicted per-position offset, bilinearly interpolated with zero
    padding outside the map, and is scaled by its modulation weight.
    With zero offsets and unit modulations this reduces to conv2d.
    """
    if stride != 1:
        raise ValueError("deform_conv2d supports stride 1 only")
    n, c, h, w = x.shape
    o, i, kh, kw = main_weight.shape
    if kh != kw:
        raise ValueError(f"deform_conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if c != i:
        raise ValueError(f"deform_conv2d: input has {c} channels but the weight expects {i}")
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"deform_conv2d: {k}x{k} kernel does not fit {h}x{w} input with pad {pad}")
    if offsets.shape != (n, 2 * k * k, ho, wo):
        raise ValueError(
            f"deform_conv2d: offsets shape {offsets.shape} != {(n, 2 * k * k, ho, wo)}"
        )
    if modulations.shape != (n, k * k, ho, wo):
        raise ValueError(
            f"deform_conv2d: modulations shape {modulations.shape} != {(n, k * k, ho, wo)}"
        )
    if main_bias is not None and main_bias.shape != (o,):
        raise ValueError(f"deform_conv2d: bias shape {main_bias.shape} != ({o},)")

    dtype = x.data.dtype
    grid_y = np.arange(ho, dtype=dtype)[None, :, None]
    grid_x = np.arange(wo, dtype=dtype)[None, None, :]
    out = np.zeros((n, o, ho, wo), dtype=dtype)
    caches = []
    for tap in range(k * k):
        ki, kj = divmod(tap, k)
        py = grid_y + float(ki - pad) + offsets.data[:, 2 * tap]
        px = grid_x + float(kj - pad) + offsets.data[:, 2 * tap + 1]
        corners, wy, wx = _bilinear_pieces(x.data, py, px)
        sampled = _bilinear_value(corners, wy, wx)  # (n, c, ho, wo)
        weighted = sampled * modulations.data[:, tap][:, None]
        out += _tap_forward(main_weight.data[:, :, ki, kj], weighted)
        caches.append((corners, wy, wx, sampled))
    if main_bias is not None:
        out += main_bias.data[None, :, None, None]

    def backward_fn(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(main_weight.data) if main_weight.requires_grad else None
        goff = np.zeros_like(offsets.data) if offsets.requires_grad else None
        gmod = np.zeros_like(modulations.data) if modulations.requires_grad else None
        for tap in range(k * k):
            ki, kj = divmod(tap, k)
            corners, wy, wx, sampled = caches[tap]
            wk = main_weight.data[:, :, ki, kj]
            if gw is not None:
                weighted = sampled * modulations.data[:, tap][:, None]
                gw[:, :, ki, kj] = _tap_grad_weight(g, weighted)
            du = _tap_grad_input(wk, g)
            if gmod is not None:
                gmod[:, tap] = (du * sampled).sum(axis=1)
            gs = du * modulations.data[:, tap][:, None]
            gfeat, gpy, gpx = _bilinear_grads(
                x.data.shape, corners, wy, wx, gs,
                need_feat=gx is not None, need_coords=goff is not None,
            )
            if gx is not None:
                gx += gfeat
            if goff is not None:
                goff[:, 2 * tap] = gpy
                goff[:, 2 * tap + 1] = gpx
        gb = None
        if main_bias is not None and main_bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if main_bias is None:
            return gx, gw, goff, gmod
        return gx, gw, gb, goff, gmod

    prev = (x, main_weight) if main_bias is None else (x, main_weight, main_bias)
    prev = prev + (offsets, modulations)
    return T._make(out, prev, backward_fn)


def fuse_streams(feat_a: Tensor, feat_b: Tensor) -> Tensor:
    """Concatenate the two backbone feature maps along the channel axis,
    stream A first."""
    return T.concat_channels(feat_a, feat_b)


def fusion_forward(feat_a: Tensor, feat_b: Tensor, params: DeformFusionParams, pooled_hw: int) -> Tensor:
    """Full fusion block: concat, predict offsets and modulations, apply the
    modulated deformable convolution, pool to the target spatial size."""
    fused = fuse_streams(feat_a, feat_b)
    offsets, modulations = predict_offsets_modulations(fused, params)
    y = deform_conv2d(fused, params.main_weight, params.main_bias, offsets, modulations, pad=1)
    return T.adaptive_avg_pool(y, pooled_hw, pooled_hw)
