"""Sectioned binary checkpoint container.

Layout (all integers little-endian uint32 unless noted):

    magic "FNETCKPT" (8 bytes) | version | config block length | config block
    (utf-8 "key = value" lines) | tensor count | per tensor: name length,
    name (utf-8), rank, extents..., raw little-endian float32 data

Round-trips are bit-exact for float32 parameters.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .model import BackboneConfig, FusionNetConfig, SingleStreamConfig
from .tensor import Tensor

MAGIC = b"FNETCKPT"
VERSION = 1

AnyConfig = Union[FusionNetConfig, SingleStreamConfig]


def _backbone_lines(prefix: str, bb: BackboneConfig) -> list[str]:
    return [
        f"{prefix}.stream = {bb.stream}",
        f"{prefix}.stage_channels = {','.join(str(c) for c in bb.stage_channels)}",
        f"{prefix}.out_channels = {bb.out_channels}",
        f"{prefix}.out_hw = {bb.out_hw}",
        f"{prefix}.nonlinearity = {bb.nonlinearity}",
    ]


def config_to_lines(config: AnyConfig) -> list[str]:
    if isinstance(config, FusionNetConfig):
        lines = ["arch = fusion"]
        lines += _backbone_lines("backbone_a", config.backbone_a)
        lines += _backbone_lines("backbone_b", config.backbone_b)
        lines += [
            f"fusion_channels = {config.fusion_channels}",
            f"pooled_hw = {config.pooled_hw}",
            f"num_classes = {config.num_classes}",
            f"dropout_rate = {config.dropout_rate!r}",
            f"l2_lambda = {config.l2_lambda!r}",
        ]
    elif isinstance(config, SingleStreamConfig):
        lines = ["arch = single"]
        lines += _backbone_lines("backbone", config.backbone)
        lines += [
            f"pooled_hw = {config.pooled_hw}",
            f"num_classes = {config.num_classes}",
            f"dropout_rate = {config.dropout_rate!r}",
            f"l2_lambda = {config.l2_lambda!r}",
        ]
    else:
        raise TypeError(f"unsupported config type {type(config).__name__}")
    return lines


def _parse_kv(lines: list[str]) -> dict[str, str]:
    kv = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ValueError(f"checkpoint config: malformed line {line!r}")
        kv[key.strip()] = value.strip()
    return kv


def _backbone_from_kv(kv: dict[str, str], prefix: str) -> BackboneConfig:
    return BackboneConfig(
        stream=kv[f"{prefix}.stream"],
        stage_channels=tuple(int(c) for c in kv[f"{prefix}.stage_channels"].split(",")),
        out_channels=int(kv[f"{prefix}.out_channels"]),
        out_hw=int(kv[f"{prefix}.out_hw"]),
        nonlinearity=kv[f"{prefix}.nonlinearity"],
    )


def config_from_lines(lines: list[str]) -> AnyConfig:
    kv = _parse_kv(lines)
    arch = kv.get("arch")
    if arch == "fusion":
        return FusionNetConfig(
            backbone_a=_backbone_from_kv(kv, "backbone_a"),
            backbone_b=_backbone_from_kv(kv, "backbone_b"),
            fusion_channels=int(kv["fusion_channels"]),
            pooled_hw=int(kv["pooled_hw"]),
            num_classes=int(kv["num_classes"]),
            dropout_rate=float(kv["dropout_rate"]),
            l2_lambda=float(kv["l2_lambda"]),
        )
    if arch == "single":
        return SingleStreamConfig(
            backbone=_backbone_from_kv(kv, "backbone"),
            pooled_hw=int(kv["pooled_hw"]),
            num_classes=int(kv["num_classes"]),
            dropout_rate=float(kv["dropout_rate"]),
            l2_lambda=float(kv["l2_lambda"]),
        )
    raise ValueError(f"checkpoint config: unknown arch {arch!r}")


def save_checkpoint(path, config: AnyConfig, params: dict[str, Tensor]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg_bytes = ("\n".join(config_to_lines(config)) + "\n").encode("utf-8")
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(params))
    for name, t in params.items():
        name_b = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        blob += struct.pack("<I", len(name_b))
        blob += name_b
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path):
    """Returns (config, params) with all parameters marked trainable."""
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    pos = 8

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = config_from_lines(bytes(take(cfg_len)).decode("utf-8").splitlines())
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n_el = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * n_el), dtype="<f4").reshape(shape)
        params[name] = Tensor(data.copy(), requires_grad=True)
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes after tensor records")
    return config, params
