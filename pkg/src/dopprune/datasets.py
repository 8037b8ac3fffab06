"""Image sets: IDX files, synthetic shapes with ground-truth masks, sampling,
augmentation and the ablation inputs (all-one matrices, random segments)."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import LabeledBatch, as_tensor

# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODES = {v.kind + str(v.itemsize): k for k, v in IDX_TYPES.items()}


class IdxFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.offset = offset


def read_idx_raw(path) -> np.ndarray:
    """Parse an IDX file into an array of its stored dtype (native byte order)."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(path, 0, f"expected 4-byte magic, file has {len(data)} bytes")
    zero, code, ndim = struct.unpack_from(">HBB", data, 0)
    if zero != 0 or code not in IDX_TYPES or ndim == 0:
        raise IdxFormatError(path, 0, f"bad magic 0x{data[:4].hex()}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(path, len(data), f"expected {header} header bytes, got {len(data)}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    dtype = IDX_TYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    actual = len(data) - header
    if actual != expected:
        raise IdxFormatError(path, header, f"expected {expected} payload bytes, got {actual}")
    return np.frombuffer(data, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def load_idx(path) -> np.ndarray:
    """Load an IDX file.

    Unsigned-byte tensors of rank >= 2 (images) are scaled to [0, 1] float64;
    rank-1 unsigned-byte files (labels) come back as int64. Other element
    types are returned as float64 without scaling.
    """
    arr = read_idx_raw(path)
    if arr.dtype == np.uint8:
        return arr.astype(np.int64) if arr.ndim == 1 else arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def write_idx(path, array: np.ndarray) -> None:
    """Write ``array`` as IDX using its dtype (uint8, int8, int16, int32, float32, float64)."""
    array = np.asarray(array)
    key = array.dtype.kind + str(array.dtype.itemsize)
    if array.dtype.kind == "i" and array.dtype.itemsize == 8:
        raise ValueError("IDX has no 64-bit integer type")
    if key not in _CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    code = _CODES[key]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array, dtype=IDX_TYPES[code]).tobytes())


# ---------------------------------------------------------------------------
# Image sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledImageSet:
    """Images in [0, 1], NHWC, with labels and the train-split channel mean."""

    images: np.ndarray
    labels: np.ndarray
    mean: np.ndarray
    classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "images", as_tensor(self.images, "images"))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.images.ndim != 4:
            raise ValueError(f"images must be NHWC, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if self.mean.shape != (self.images.shape[-1],):
            raise ValueError("mean must have one entry per channel")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def centered(self) -> np.ndarray:
        return self.images - self.mean

    def of_class(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], self.mean, self.classes,
                               self.split, self.provenance)


def channel_mean(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64).mean(axis=(0, 1, 2))


def from_idx(images_path, labels_path, classes: int | None = None, split: str = "train",
             mean: np.ndarray | None = None) -> LabeledImageSet:
    images = load_idx(images_path)
    if images.ndim == 3:
        images = images[..., None]
    labels = load_idx(labels_path).astype(np.int64)
    if mean is None:
        if split != "train":
            raise ValueError("a non-train split needs the train-split mean")
        mean = channel_mean(images)
    classes = int(labels.max()) + 1 if classes is None else classes
    return LabeledImageSet(images, labels, mean, classes, split, f"idx:{Path(images_path).name}")


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring", "frame", "xcross", "hbar", "vbar")

PALETTE = (
    (0.90, 0.10, 0.10), (0.10, 0.75, 0.15), (0.15, 0.25, 0.95), (0.95, 0.85, 0.10),
    (0.85, 0.15, 0.85), (0.10, 0.85, 0.85), (0.95, 0.55, 0.05), (0.98, 0.98, 0.98),
)


def shape_mask(kind: str, size: int, cy: float, cx: float, height: int, width: int) -> np.ndarray:
    """Boolean raster of a shape with bounding extent ``size`` centred at (cy, cx)."""
    yy, xx = np.mgrid[0:height, 0:width]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    r = size / 2.0
    ady, adx = np.abs(dy), np.abs(dx)
    box = (ady <= r) & (adx <= r)
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "square":
        return (ady <= 0.8 * r) & (adx <= 0.8 * r)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (adx <= (dy + r) / 2.0)
    if kind == "cross":
        t = r / 3.0
        return box & ((adx <= t) | (ady <= t))
    if kind == "diamond":
        return adx + ady <= r
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "frame":
        m = np.maximum(adx, ady)
        return (m <= 0.85 * r) & (m >= 0.5 * r)
    if kind == "xcross":
        t = 0.3 * r * np.sqrt(2.0)
        return (np.maximum(adx, ady) <= 0.85 * r) & ((np.abs(dx - dy) <= t) | (np.abs(dx + dy) <= t))
    if kind == "hbar":
        return (ady <= r / 3.5) & (adx <= r)
    if kind == "vbar":
        return (adx <= r / 3.5) & (ady <= r)
    raise ValueError(f"unknown shape {kind!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic-shapes corpus; its hash names the dataset."""

    classes: int = 10
    image_size: int = 32
    shapes: tuple[str, ...] = SHAPES
    n_train: int = 2000
    n_test: int = 500
    min_size: int = 11
    max_size: int = 18
    min_area: int = 25
    max_area: int = 300
    clutter: int = 3
    clutter_size: tuple[int, int] = (3, 6)
    palette: tuple[tuple[float, float, float], ...] = PALETTE
    background: tuple[float, float] = (0.3, 0.6)
    noise: float = 0.03
    seed: int = 0

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ShapesDataset:
    train: LabeledImageSet
    test: LabeledImageSet
    train_masks: np.ndarray
    test_masks: np.ndarray
    spec: SyntheticSpec = field(repr=False)


def _render(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = spec.image_size
    kind = spec.shapes[label]
    bg = rng.uniform(*spec.background)
    img = np.full((n, n, 3), bg) + rng.normal(0.0, spec.noise, size=(n, n, 3))
    palette = np.asarray(spec.palette)
    for _ in range(spec.clutter):
        s = rng.integers(spec.clutter_size[0], spec.clutter_size[1] + 1)
        cy, cx = rng.uniform(0, n, size=2)
        blob = shape_mask("square" if rng.random() < 0.5 else "circle", s, cy, cx, n, n)
        img[blob] = palette[rng.integers(len(palette))]
    for _ in range(100):
        size = int(rng.integers(spec.min_size, spec.max_size + 1))
        lo, hi = size / 2.0, n - size / 2.0
        cy, cx = rng.uniform(lo, hi, size=2)
        mask = shape_mask(kind, size, cy, cx, n, n)
        if spec.min_area <= mask.sum() <= spec.max_area:
            break
    else:
        raise ValueError(f"cannot place {kind} with area in [{spec.min_area}, {spec.max_area}]")
    img[mask] = palette[rng.integers(len(palette))]
    return np.clip(img, 0.0, 1.0), mask


def generate_shapes(spec: SyntheticSpec) -> ShapesDataset:
    """Render train and test splits; each image has one class shape plus clutter.

    Labels cycle through the classes, so splits whose size is divisible by the
    class count are exactly balanced.
    """
    if spec.classes > len(spec.shapes):
        raise ValueError(f"{spec.classes} classes but only {len(spec.shapes)} shapes")
    if spec.max_size > spec.image_size or spec.min_size > spec.max_size:
        raise ValueError("shape size range does not fit the canvas")
    rng = np.random.default_rng(spec.seed)
    splits = {}
    for split, count in (("train", spec.n_train), ("test", spec.n_test)):
        labels = np.arange(count) % spec.classes
        labels = labels[rng.permutation(count)]
        images = np.empty((count, spec.image_size, spec.image_size, 3))
        masks = np.empty((count, spec.image_size, spec.image_size), dtype=bool)
        for i, y in enumerate(labels):
            images[i], masks[i] = _render(spec, int(y), rng)
        splits[split] = (images, labels, masks)
    mean = channel_mean(splits["train"][0])
    prov = f"synthetic:{spec.digest()}"
    train = LabeledImageSet(splits["train"][0], splits["train"][1], mean, spec.classes, "train", prov)
    test = LabeledImageSet(splits["test"][0], splits["test"][1], mean, spec.classes, "test", prov)
    return ShapesDataset(train, test, splits["train"][2], splits["test"][2], spec)


# ---------------------------------------------------------------------------
# Sampling and augmentation
# ---------------------------------------------------------------------------


def sample_indices(labels: np.ndarray, b: int, seed: int | np.random.Generator,
                   stratified: bool = False, classes: int | None = None) -> np.ndarray:
    """Indices of a mini-batch drawn without replacement.

    Stratified mode draws ``b // classes`` from every class, in class order.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("cannot sample from an empty source")
    if not 1 <= b <= n:
        raise ValueError(f"batch size {b} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    if not stratified:
        return rng.permutation(n)[:b]
    classes = int(labels.max()) + 1 if classes is None else classes
    per = b // classes
    out = []
    for k in range(classes):
        pool = np.flatnonzero(labels == k)
        if len(pool) < per:
            raise ValueError(f"class {k} has {len(pool)} items, {per} requested")
        out.append(rng.permutation(pool)[:per])
    return np.concatenate(out)


def sample_minibatch(source, b: int, seed, stratified: bool = False) -> LabeledBatch:
    """Mini-batch from anything with ``images`` and ``labels`` (image set or patch store)."""
    classes = getattr(source, "classes", None)
    idx = sample_indices(source.labels, b, seed, stratified, classes)
    return LabeledBatch(source.images[idx], source.labels[idx])


def augment(batch, rng: np.random.Generator | None, flip_p: float = 0.5, pad: int = 2):
    """Random horizontal flip and random crop after zero padding.

    Accepts an image array or a LabeledBatch and returns the same kind. With
    ``rng=None`` the input is returned unchanged. Zero padding corresponds to
    the dataset mean for centered inputs.
    """
    if rng is None:
        return batch
    if isinstance(batch, LabeledBatch):
        return LabeledBatch(augment(batch.images, rng, flip_p, pad), batch.labels)
    x = np.asarray(batch, dtype=np.float64)
    n, h, w, _ = x.shape
    flips = rng.random(n) < flip_p
    out = np.where(flips[:, None, None, None], x[:, :, ::-1, :], x)
    if pad > 0:
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        out = np.empty_like(x)
        for i, (oy, ox) in enumerate(offs):
            out[i] = padded[i, oy:oy + h, ox:ox + w]
    return out


def all_one_batch(shape, labels) -> LabeledBatch:
    """Images of ones with the given per-image shape, labels copied verbatim."""
    labels = np.array(labels, dtype=np.int64, copy=True)
    return LabeledBatch(np.ones((len(labels), *tuple(shape))), labels)


def random_segments(dataset: LabeledImageSet, count: int, seed, scales=(15, 50),
                    compactness: float = 0.1, min_pixels: int = 10, per_class: bool = True):
    """Patch store of randomly chosen SLIC segments (no clustering, no scoring).

    Each pick draws a source image, a segmentation scale and a segment
    uniformly. With ``per_class`` the count is split evenly over classes.
    """
    from .concepts.patches import make_patch, segments_of
    from .store import PatchStore

    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    if per_class:
        quotas = [count // dataset.classes + (1 if k < count % dataset.classes else 0)
                  for k in range(dataset.classes)]
        pools = [dataset.of_class(k) for k in range(dataset.classes)]
    else:
        quotas, pools = [count], [np.arange(len(dataset))]
    patches = []
    cache: dict[tuple[int, int], list] = {}
    for quota, pool in zip(quotas, pools):
        for _ in range(quota):
            i = int(pool[rng.integers(len(pool))])
            scale = scales[rng.integers(len(scales))]
            if (i, scale) not in cache:
                cache[(i, scale)] = segments_of(dataset.images[i], i, int(dataset.labels[i]), (scale,),
                                                compactness, min_pixels)
            segs = cache[(i, scale)]
            seg = segs[rng.integers(len(segs))]
            patches.append(make_patch(dataset.images[i], seg, dataset.mean))
    return PatchStore.from_patches(patches, dataset.mean, kind="random-segment")
