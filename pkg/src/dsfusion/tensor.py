"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

A ``Tensor`` wraps a NumPy array together with an optional gradient and the
links needed to replay the recorded computation backwards.  Ops are plain
functions that return new tensors; calling :func:`backward` on a scalar
result accumulates gradients additively into the ``grad`` field of every
tensor that has ``requires_grad`` set.

Single precision is the working default; pass float64 arrays for
finite-difference checking, where the extra precision matters.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "zero_grads",
    "add",
    "sub",
    "neg",
    "mul",
    "add_scalar",
    "mul_scalar",
    "sum_all",
    "reshape",
    "flatten",
    "relu",
    "tanh",
    "sigmoid",
    "log",
    "linear",
    "pick",
    "concat_channels",
    "slice_channels",
    "softmax_T",
    "log_softmax_T",
    "conv2d",
    "bilinear_sample",
    "adaptive_avg_pool",
    "dropout",
    "sample_norm",
]

_FLOAT_DTYPES = (np.float32, np.float64)
LOG_EPS = 1e-12


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``data`` is always a float32 or float64 ndarray.  ``grad`` stays ``None``
    until a backward pass deposits into it; repeated backward passes without
    :func:`zero_grads` keep adding.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._prev: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, prev: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in prev))
    if out.requires_grad:
        out._prev = prev
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list:
    """Children-first ordering; each node appears exactly once."""
    order: list = []
    seen: set = set()
    stack: list = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss.

    Gradients are added into ``grad`` of every ``requires_grad`` tensor in
    the graph, so calling this twice on the same loss doubles them.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    flows: dict = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(order):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        grads_in = node._backward(g)
        for p, gi in zip(node._prev, grads_in):
            if gi is None or not p.requires_grad:
                continue
            key = id(p)
            flows[key] = gi if key not in flows else flows[key] + gi


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _make(np.sum(a.data), (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    """Row-major reshape of an N×C×H×W tensor to N×(C·H·W)."""
    if a.data.ndim != 4:
        raise ValueError(f"flatten expects a 4-d tensor, got shape {a.data.shape}")
    n = a.data.shape[0]
    return reshape(a, (n, a.data.size // n))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype, copy=False)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with the argument clamped below at ``eps``."""
    clamped = np.maximum(a.data, eps)
    active = a.data >= eps

    def backward_fn(g):
        return (g * active / clamped,)

    return _make(np.log(clamped), (a,), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: x (N×D) · weightᵀ (D×C) + bias (C) -> N×C."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"linear expects 2-d input/weight, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(f"linear: input width {x.data.shape[1]} != weight fan-in {weight.data.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise ValueError(f"linear: bias shape {bias.data.shape} != ({weight.data.shape[0]},)")
        out = out + bias.data

    def backward_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    prev = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, prev, backward_fn)


def pick(x: Tensor, indices) -> Tensor:
    """Select one entry per row: out[i] = x[i, indices[i]]."""
    idx = np.asarray(indices)
    n, c = x.data.shape
    if idx.shape != (n,):
        raise ValueError(f"pick: need {n} indices, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= c:
        raise ValueError(f"pick: index out of range [0, {c})")
    rows = np.arange(n)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _make(x.data[rows, idx], (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two N×C×H×W tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4-d tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(
            f"concat_channels: batch/spatial mismatch {a.data.shape} vs {b.data.shape}"
        )
    ca = a.data.shape[1]

    def backward_fn(g):
        return g[:, :ca], g[:, ca:]

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), backward_fn)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 4:
        raise ValueError("slice_channels expects a 4-d tensor")
    c = a.data.shape[1]
    if not (0 <= start <= stop <= c):
        raise ValueError(f"slice_channels: [{start}, {stop}) out of range for {c} channels")

    def backward_fn(g):
        gx = np.zeros_like(a.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make(a.data[:, start:stop].copy(), (a,), backward_fn)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _softmax_data(x: np.ndarray, temperature: float) -> np.ndarray:
    z = x / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_T(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature-scaled softmax over the last axis, stabilised by
    max-subtraction.  Rows sum to one."""
    if temperature <= 0:
        raise ValueError(f"softmax_T: temperature must be positive, got {temperature}")
    t = float(temperature)
    y = _softmax_data(logits.data, t)

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot) / t,)

    return _make(y, (logits,), backward_fn)


def log_softmax_T(logits: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"log_softmax_T: temperature must be positive, got {temperature}")
    t = float(temperature)
    z = logits.data / t
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward_fn(g):
        return ((g - sm * g.sum(axis=-1, keepdims=True)) / t,)

    return _make(out, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _tap_forward(w_tap: np.ndarray, patch: np.ndarray) -> np.ndarray:
    """(O,C) x (N,C,H,W) -> (N,O,H,W) channel contraction via batched matmul."""
    n, c, h, w = patch.shape
    out = np.matmul(w_tap, patch.reshape(n, c, h * w))
    return out.reshape(n, w_tap.shape[0], h, w)


def _tap_grad_weight(g: np.ndarray, patch: np.ndarray) -> np.ndarray:
    """(N,O,H,W), (N,C,H,W) -> (O,C)."""
    return np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))


def _tap_grad_input(w_tap: np.ndarray, g: np.ndarray) -> np.ndarray:
    """(O,C), (N,O,H,W) -> (N,C,H,W)."""
    n, o, h, w = g.shape
    out = np.matmul(w_tap.T, g.reshape(n, o, h * w))
    return out.reshape(n, w_tap.shape[1], h, w)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2-d cross-correlation of N×C×H×W input with O×C×KH×KW weights."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input/weight, got {x.data.shape} and {weight.data.shape}")
    n, c, h, w = x.data.shape
    o, i, kh, kw = weight.data.shape
    if c != i:
        raise ValueError(f"conv2d: input has {c} channels but the weight expects {i}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValueError(
            f"conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with pad {pad}"
        )
    if bias is not None and bias.data.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({o},)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = np.zeros((n, o, ho, wo), dtype=x.data.dtype)
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
            out += _tap_forward(weight.data[:, :, ki, kj], np.ascontiguousarray(patch))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward_fn(g):
        gx_p = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for ki in range(kh):
            for kj in range(kw):
                sl_h = slice(ki, ki + stride * ho, stride)
                sl_w = slice(kj, kj + stride * wo, stride)
                if gw is not None:
                    patch = np.ascontiguousarray(xp[:, :, sl_h, sl_w])
                    gw[:, :, ki, kj] = _tap_grad_weight(g, patch)
                if gx_p is not None:
                    gx_p[:, :, sl_h, sl_w] += _tap_grad_input(weight.data[:, :, ki, kj], g)
        gx = None
        if gx_p is not None:
            gx = gx_p[:, :, pad : pad + h, pad : pad + w] if pad else gx_p
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    prev = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, prev, backward_fn)


# ---------------------------------------------------------------------------
# bilinear sampling (shared by the public op and deformable convolution)
# ---------------------------------------------------------------------------

def _bilinear_pieces(feat: np.ndarray, py: np.ndarray, px: np.ndarray):
    """Gather the four corner values around each (py, px) location.

    feat: (N, C, H, W); py/px: (N, *S).  Samples outside the map contribute
    zero.  Returns the corner values (N, C, *S each) and the interpolation
    weights, everything needed for both the value and its derivatives.
    """
    n, c, h, w = feat.shape
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    wy = (py - y0).astype(feat.dtype)
    wx = (px - x0).astype(feat.dtype)

    flat = feat.reshape(n, c, h * w)
    spatial = py.shape[1:]
    m = int(np.prod(spatial, dtype=np.int64)) if spatial else 1

    corners = []
    for yi, xi in ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        idx = (yc * w + xc).reshape(n, 1, m)
        vals = np.take_along_axis(flat, np.broadcast_to(idx, (n, c, m)), axis=2)
        vals = vals.reshape((n, c) + spatial) * valid[:, None]
        corners.append((vals, valid, yc, xc))
    return corners, wy, wx


def _bilinear_value(corners, wy, wx):
    (v00, _, _, _), (v01, _, _, _), (v10, _, _, _), (v11, _, _, _) = corners
    wy_ = wy[:, None]
    wx_ = wx[:, None]
    return (
        v00 * (1 - wy_) * (1 - wx_)
        + v01 * (1 - wy_) * wx_
        + v10 * wy_ * (1 - wx_)
        + v11 * wy_ * wx_
    )


def _bilinear_grads(feat_shape, corners, wy, wx, gval, need_feat: bool, need_coords: bool):
    """Backward of bilinear sampling.

    gval: (N, C, *S).  Returns (gfeat, gpy, gpx); entries are None when not
    requested.  Coordinate gradients use the in-cell derivative of the
    interpolation formula.
    """
    n, c, h, w = feat_shape
    (v00, m00, y00, x00) = corners[0]
    (v01, m01, y01, x01) = corners[1]
    (v10, m10, y10, x10) = corners[2]
    (v11, m11, y11, x11) = corners[3]
    wy_ = wy[:, None]
    wx_ = wx[:, None]

    gfeat = None
    if need_feat:
        weights = ((1 - wy_) * (1 - wx_), (1 - wy_) * wx_, wy_ * (1 - wx_), wy_ * wx_)
        acc = np.zeros(n * c * h * w, dtype=gval.dtype)
        coff = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
        for (vals, valid, yc, xc), cw in zip(corners, weights):
            contrib = gval * cw * valid[:, None]
            idx = (yc * w + xc)[:, None] + coff.reshape((n, c) + (1,) * (gval.ndim - 2))
            acc += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=acc.size)
        gfeat = acc.reshape(n, c, h, w).astype(gval.dtype, copy=False)

    gpy = gpx = None
    if need_coords:
        dval_dy = (v10 - v00) * (1 - wx_) + (v11 - v01) * wx_
        dval_dx = (v01 - v00) * (1 - wy_) + (v11 - v10) * wy_
        gpy = (gval * dval_dy).sum(axis=1)
        gpx = (gval * dval_dx).sum(axis=1)
    return gfeat, gpy, gpx


def bilinear_sample(feature: Tensor, coords: Tensor) -> Tensor:
    """Sample a C×H×W feature map at fractional (y, x) coordinates.

    coords is M×2; the result is C×M.  Out-of-bounds samples read as zero,
    and gradients flow to both the feature values and the coordinates.
    """
    if feature.data.ndim != 3:
        raise ValueError(f"bilinear_sample: feature must be C×H×W, got {feature.data.shape}")
    if coords.data.ndim != 2 or coords.data.shape[1] != 2:
        raise ValueError(f"bilinear_sample: coords must be M×2, got {coords.data.shape}")
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("bilinear_sample: coords must be finite")
    c, h, w = feature.data.shape
    m = coords.data.shape[0]
    feat4 = feature.data[None]
    py = coords.data[:, 0][None]
    px = coords.data[:, 1][None]
    corners, wy, wx = _bilinear_pieces(feat4, py, px)
    val = _bilinear_value(corners, wy, wx)  # (1, C, M)

    def backward_fn(g):
        gval = g[None] if g.ndim == 2 else g.reshape(1, c, m)
        gfeat, gpy, gpx = _bilinear_grads(
            feat4.shape, corners, wy, wx, gval,
            need_feat=feature.requires_grad, need_coords=coords.requires_grad,
        )
        gf = gfeat[0] if gfeat is not None else None
        gc = None
        if gpy is not None:
            gc = np.stack([gpy[0], gpx[0]], axis=1)
        return gf, gc

    return _make(val[0], (feature, coords), backward_fn)


# ---------------------------------------------------------------------------
# pooling / dropout / normalisation
# ---------------------------------------------------------------------------

def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average pooling over an even partition of the input into out_h×out_w
    windows.  Identity when the output size equals the input size."""
    if x.data.ndim != 4:
        raise ValueError("adaptive_avg_pool expects a 4-d tensor")
    n, c, h, w = x.data.shape
    if out_h > h or out_w > w:
        raise ValueError(
            f"adaptive_avg_pool: output {out_h}x{out_w} larger than input {h}x{w}"
        )
    hb = [(i * h // out_h, -(-(i + 1) * h // out_h)) for i in range(out_h)]
    wb = [(j * w // out_w, -(-(j + 1) * w // out_w)) for j in range(out_w)]
    out = np.empty((n, c, out_h, out_w), dtype=x.data.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                gx[:, :, h0:h1, w0:w1] += g[:, :, i : i + 1, j : j + 1] / ((h1 - h0) * (w1 - w0))
        return (gx,)

    return _make(out, (x,), backward_fn)


def dropout(
    x: Tensor,
    p: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1−p), so evaluation is
    the identity.  A precomputed keep mask (already scaled) may be supplied
    instead of an rng for reproducible per-sample masking."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout: training mode needs an rng or a mask")
        mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    else:
        mask = np.asarray(mask, dtype=x.data.dtype)
        if mask.shape != x.data.shape:
            raise ValueError(f"dropout: mask shape {mask.shape} != {x.data.shape}")
    m = mask
    return _make(x.data * m, (x,), lambda g: (g * m,))


def sample_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample RMS normalisation over all non-batch axes.

    Uses no batch statistics, so batching never couples samples.
    """
    if x.data.ndim < 2:
        raise ValueError("sample_norm expects a batched tensor")
    axes = tuple(range(1, x.data.ndim))
    n_el = int(np.prod(x.data.shape[1:]))
    ms = np.mean(x.data * x.data, axis=axes, keepdims=True)
    r = np.sqrt(ms + eps)
    y = x.data / r

    def backward_fn(g):
        dot = np.sum(g * x.data, axis=axes, keepdims=True)
        return (g / r - x.data * dot / (n_el * r ** 3),)

    return _make(y, (x,), backward_fn)
