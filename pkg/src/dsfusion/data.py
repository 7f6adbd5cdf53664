"""Dataset ingestion, splitting, subsampling, and image preprocessing.

Supported sources: the CIFAR-10 binary batch format (3073-byte records:
one label byte, then 3072 channel-planar pixel bytes), folder-per-class
trees of binary P6 portable pixmaps, and a procedural synthetic generator
for desk-scale runs.  All loaders reject malformed input outright; nothing
is silently truncated.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

CIFAR10_RECORD_BYTES = 3073
CIFAR10_CLASS_NAMES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2023, 0.1994, 0.2010)


@dataclass
class LabeledDataset:
    """Images (N x 3 x H x W, float32 in [0, 1] before normalisation),
    integer labels, class names, and a provenance note."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    provenance: str = "unknown"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        n_classes = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            raise ValueError(f"labels outside [0, {n_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices, provenance: Optional[str] = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            class_names=list(self.class_names),
            provenance=provenance or f"{self.provenance}|subset[{len(idx)}]",
        )


@dataclass(frozen=True)
class Preprocess:
    """Optional bicubic resize target plus per-channel normalisation."""

    resize_hw: Optional[tuple[int, int]] = None
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std entries must be positive, got {self.std}")


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------

def load_cifar10_binary(paths) -> LabeledDataset:
    """Load one or more CIFAR-10 binary batch files.

    Files are processed in sorted path order.  Each record is 1 label byte
    followed by 32x32 red, green, and blue planes.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    paths = sorted(Path(p) for p in paths)
    if not paths:
        raise ValueError("load_cifar10_binary: no input files")
    images = []
    labels = []
    for path in paths:
        raw = path.read_bytes()
        n_rec, rem = divmod(len(raw), CIFAR10_RECORD_BYTES)
        if rem != 0:
            raise ValueError(
                f"{path}: truncated record at byte offset {n_rec * CIFAR10_RECORD_BYTES} "
                f"(file has {len(raw)} bytes; records are {CIFAR10_RECORD_BYTES} bytes)"
            )
        if n_rec == 0:
            raise ValueError(f"{path}: empty batch file")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(n_rec, CIFAR10_RECORD_BYTES)
        lab = arr[:, 0].astype(np.int64)
        bad = np.flatnonzero(lab > 9)
        if bad.size:
            raise ValueError(f"{path}: record {bad[0]} has label byte {lab[bad[0]]} > 9")
        images.append(arr[:, 1:].reshape(n_rec, 3, 32, 32).astype(np.float32) / 255.0)
        labels.append(lab)
    return LabeledDataset(
        images=np.concatenate(images),
        labels=np.concatenate(labels),
        class_names=list(CIFAR10_CLASS_NAMES),
        provenance="cifar10:" + ",".join(p.name for p in paths),
    )


# ---------------------------------------------------------------------------
# P6 portable pixmaps and folder-per-class trees
# ---------------------------------------------------------------------------

def read_ppm(path) -> np.ndarray:
    """Read a binary P6 pixmap (8-bit, maxval 255) as float32 3 x H x W in
    [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] != b"P6":
        raise ValueError(f"{path}: not a binary P6 pixmap")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise ValueError(f"{path}: truncated P6 header")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(raw) and raw[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(raw[start:pos]))
        else:
            raise ValueError(f"{path}: malformed P6 header near byte {pos}")
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported (need 8-bit, maxval 255)")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise ValueError(f"{path}: missing whitespace after P6 maxval")
    pos += 1
    n_bytes = width * height * 3
    if len(raw) - pos < n_bytes:
        raise ValueError(f"{path}: pixel data truncated ({len(raw) - pos} of {n_bytes} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n_bytes, offset=pos)
    img = pixels.reshape(height, width, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    """Write a 3 x H x W float image in [0, 1] as a binary P6 pixmap."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm: image must be 3 x H x W, got {image.shape}")
    _, h, w = image.shape
    bytes_hwc = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes_hwc.tobytes())


def load_folder_dataset(root, resize_hw: Optional[tuple[int, int]] = None) -> LabeledDataset:
    """Load a folder-per-class tree of P6 pixmaps.

    Classes are ordered by lexicographic directory name, which fixes the
    label assignment.  Mixed image sizes are rejected unless a resize
    target is given.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class directories")
    images = []
    labels = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise ValueError(f"{cdir}: empty class directory")
        for f in files:
            img = read_ppm(f)
            if resize_hw is not None:
                img = resize_bicubic(img, *resize_hw)
            images.append(img)
            labels.append(label)
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ValueError(
            f"{root}: mixed image sizes {sorted(shapes)}; configure a resize target"
        )
    return LabeledDataset(
        images=np.stack(images),
        labels=np.asarray(labels),
        class_names=[d.name for d in class_dirs],
        provenance=f"folder:{root}",
    )


# ---------------------------------------------------------------------------
# splitting and subsampling
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split_indices(
    labels: np.ndarray, train_fraction: float = 0.8, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class index split; every class keeps at least one test sample."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 0x5711])
    train_parts = []
    test_parts = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = len(idx)
        if n < 2:
            raise ValueError(f"class {c} has {n} sample(s); need at least 2 to split")
        k = _round_half_up(train_fraction * n)
        k = max(1, min(k, n - 1))
        perm = rng.permutation(n)
        train_parts.append(idx[perm[:k]])
        test_parts.append(idx[perm[k:]])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(test_parts))


def stratified_split(
    ds: LabeledDataset, train_fraction: float = 0.8, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    train_idx, test_idx = stratified_split_indices(ds.labels, train_fraction, seed)
    return (
        ds.subset(train_idx, provenance=f"{ds.provenance}|split=train"),
        ds.subset(test_idx, provenance=f"{ds.provenance}|split=test"),
    )


def subsample_fraction(ds: LabeledDataset, fraction: float = 0.10, seed: int = 0) -> LabeledDataset:
    """Per-class sampling without replacement of max(1, round(fraction * n))
    items, deterministic per seed."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng([seed, 0x5AB5])
    parts = []
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        k = max(1, _round_half_up(fraction * len(idx)))
        perm = rng.permutation(len(idx))
        parts.append(idx[perm[:k]])
    chosen = np.sort(np.concatenate(parts))
    return ds.subset(chosen, provenance=f"{ds.provenance}|frac={fraction}")


def write_split_manifest(path, n_total: int, train_indices) -> None:
    """Text manifest of 'index<TAB>split' lines, one per sample."""
    train = set(int(i) for i in np.asarray(train_indices))
    lines = [f"{i}\t{'train' if i in train else 'test'}" for i in range(n_total)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split_manifest(path) -> tuple[np.ndarray, np.ndarray]:
    train = []
    test = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        idx_s, _, split = line.partition("\t")
        (train if split == "train" else test).append(int(idx_s))
    return np.asarray(train, dtype=np.int64), np.asarray(test, dtype=np.int64)


# ---------------------------------------------------------------------------
# resizing and normalisation
# ---------------------------------------------------------------------------

def _catmull_rom(t: np.ndarray) -> np.ndarray:
    # a = -0.5 cubic convolution kernel
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    near = 1.5 * t3 - 2.5 * t2 + 1.0
    far = -0.5 * t3 + 2.5 * t2 - 4.0 * t + 2.0
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) matrix of edge-clamped Catmull-Rom weights with
    half-pixel-centre alignment."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        j0 = int(np.floor(src))
        t = src - j0
        taps = np.array([j0 - 1, j0, j0 + 1, j0 + 2])
        weights = _catmull_rom(np.array([1.0 + t, t, 1.0 - t, 2.0 - t]))
        for j, wt in zip(taps, weights):
            w[o, min(max(j, 0), n_in - 1)] += wt
    return w


def resize_bicubic(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Catmull-Rom (a = -0.5) resize over the trailing two axes,
    edge-clamped; the identity when the size is unchanged."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize_bicubic: output {out_h}x{out_w} invalid")
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if (h, w) == (out_h, out_w):
        return image.copy()
    wr = _resize_weights(h, out_h)
    wc = _resize_weights(w, out_w)
    out = np.einsum("ij,...jk,lk->...il", wr, image.astype(np.float64), wc, optimize=True)
    return out.astype(image.dtype, copy=False)


def normalize(images: np.ndarray, pre: Preprocess) -> np.ndarray:
    """Per-channel (x - mean) / std over the axis third from the end."""
    images = np.asarray(images)
    if images.shape[-3] != 3:
        raise ValueError(f"normalize: expected 3 channels third from last, got {images.shape}")
    shape = (3, 1, 1)
    mean = np.asarray(pre.mean, dtype=images.dtype).reshape(shape)
    std = np.asarray(pre.std, dtype=images.dtype).reshape(shape)
    return (images - mean) / std


def apply_preprocess(ds: LabeledDataset, pre: Preprocess) -> LabeledDataset:
    images = ds.images
    if pre.resize_hw is not None:
        images = resize_bicubic(images, *pre.resize_hw)
    return LabeledDataset(
        images=normalize(images, pre),
        labels=ds.labels,
        class_names=list(ds.class_names),
        provenance=f"{ds.provenance}|preprocessed",
    )


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synth_dataset(
    num_classes: int,
    n_per_class: int,
    image_hw: int,
    seed: int = 0,
    noise_std: float = 0.05,
) -> LabeledDataset:
    """Procedural dataset: each class is a fixed oriented grating plus a
    class-specific blob, with seeded pixel noise on top.  At zero noise the
    images within a class are identical and classes are separated by
    construction."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if n_per_class < 1 or image_hw < 4:
        raise ValueError("need n_per_class >= 1 and image_hw >= 4")
    rng = np.random.default_rng([seed, 0x5E07])
    grid = (np.arange(image_hw) + 0.5) / image_hw
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    protos = np.empty((num_classes, 3, image_hw, image_hw), dtype=np.float64)
    for c in range(num_classes):
        theta = np.pi * c / num_classes
        freq = 2.0 + (c % 4)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        cy = 0.5 + 0.3 * np.sin(2.399963 * (c + 1))
        cx = 0.5 + 0.3 * np.cos(2.399963 * (c + 1))
        blob = 0.35 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.06)
        for ch in range(3):
            wave = np.sin(2.0 * np.pi * freq * ramp + 2.0 * np.pi * ch / 3.0 + 0.7 * c)
            protos[c, ch] = np.clip(0.5 + 0.3 * wave + blob, 0.0, 1.0)
    n = num_classes * n_per_class
    images = np.repeat(protos, n_per_class, axis=0)
    if noise_std > 0:
        images = images + noise_std * rng.standard_normal(images.shape)
        images = np.clip(images, 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    return LabeledDataset(
        images=images.astype(np.float32),
        labels=labels,
        class_names=[f"class_{c:02d}" for c in range(num_classes)],
        provenance=f"synth:{num_classes}x{n_per_class}x{image_hw}@seed={seed}",
    )
