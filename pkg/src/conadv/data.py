"""Dataset loaders, synthetic generators and the flip-crop augmentation.

Every loader returns inputs scaled into [0, 1]. Image data is NHWC.

Dataset specs are short strings, e.g.::

    blobs:n=1000,d=16,classes=4,seed=7
    shapes:n=8192,size=12,seed=0
    idx:train_images=a.idx,train_labels=b.idx,test_images=c.idx,test_labels=d.idx
    csv:train=train.csv,test=test.csv
"""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


class MalformedHeaderError(DatasetError):
    pass


class LengthMismatchError(DatasetError):
    pass


class UnknownFormatError(DatasetError):
    pass


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    name: str = ""

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train_x.shape[1:])

    def __len__(self) -> int:
        return self.train_x.shape[0]


# ---------------------------------------------------------------- IDX files


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Unsigned-byte IDX array; dimensions are big-endian 32-bit counts."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise MalformedHeaderError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise MalformedHeaderError(f"{path}: bad magic 0x{magic:08x} (expected unsigned-byte IDX)")
    if expected_magic is not None and magic != expected_magic:
        raise MalformedHeaderError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if ndim == 0 or len(raw) < header:
        raise MalformedHeaderError(f"{path}: truncated header for {ndim} dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != expected:
        raise MalformedHeaderError(f"{path}: header promises {expected} bytes of data, found {body.size}")
    return body.reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise LengthMismatchError(f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels")
    x = images.astype(np.float64)[..., None] / 255.0
    return x, labels.astype(np.intp)


# ---------------------------------------------------------------- CSV


def _to_unit_range(x: np.ndarray) -> np.ndarray:
    if x.size == 0 or (x.min() >= 0.0 and x.max() <= 1.0):
        return x
    if x.min() >= 0.0 and x.max() <= 255.0:
        return x / 255.0
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def load_csv(path, label_column: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """One example per row: flattened features plus an integer label column.

    Features already in [0, 1] are kept, [0, 255] is divided by 255 and
    anything else is min-max scaled over the whole file.
    """
    path = Path(path)
    try:
        table = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: {exc}") from exc
    if table.shape[1] < 2:
        raise MalformedHeaderError(f"{path}: need at least one feature column and a label column")
    labels = table[:, label_column]
    if not np.all(labels == np.round(labels)) or labels.min() < 0:
        raise MalformedHeaderError(f"{path}: label column holds non-integer or negative values")
    x = np.delete(table, label_column % table.shape[1], axis=1)
    return _to_unit_range(x), labels.astype(np.intp)


# ---------------------------------------------------------------- synthetic


def make_blobs(n: int, d: int, num_classes: int, seed: int, spread: float = 0.08) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(num_classes, d))
    labels = rng.integers(0, num_classes, size=n)
    x = centers[labels] + spread * rng.standard_normal((n, d))
    return np.clip(x, 0.0, 1.0), labels.astype(np.intp)


SHAPE_CLASSES = (
    "square", "frame", "disk", "ring", "plus", "hbar", "vbar", "tri_up", "tri_down", "cross",
)


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    ay, ax = np.abs(dy), np.abs(dx)
    cheb = np.maximum(ay, ax)
    dist = np.sqrt(dy * dy + dx * dx)
    t = 0.45 * r  # stroke half-width scale
    if kind == "square":
        return cheb <= r
    if kind == "frame":
        return (cheb <= r) & (cheb >= r - 1.0)
    if kind == "disk":
        return dist <= r
    if kind == "ring":
        return (dist <= r) & (dist >= r - 1.1)
    if kind == "plus":
        return ((ax <= 0.6) & (ay <= r)) | ((ay <= 0.6) & (ax <= r))
    if kind == "hbar":
        return (ax <= r) & (ay <= np.maximum(t * 0.6, 0.6))
    if kind == "vbar":
        return (ay <= r) & (ax <= np.maximum(t * 0.6, 0.6))
    if kind == "tri_up":
        return (ay <= r) & (ax <= (dy + r) / 2.0)
    if kind == "tri_down":
        return (ay <= r) & (ax <= (r - dy) / 2.0)
    if kind == "cross":
        return (np.abs(ay - ax) <= 0.7) & (cheb <= r)
    raise ValueError(kind)


def make_shapes(n: int, size: int, seed: int, noise: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Grayscale glyphs, one class per shape, with jittered position and scale.

    Every glyph is mirror-symmetric about its own vertical axis, so
    horizontal flips preserve the label.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(SHAPE_CLASSES), size=n)
    r = rng.uniform(0.22, 0.36, size=n) * size
    margin = r + 0.5
    cy = rng.uniform(margin, size - 1 - margin)
    cx = rng.uniform(margin, size - 1 - margin)
    level = rng.uniform(0.5, 1.0, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x = np.zeros((n, size, size))
    for k, kind in enumerate(SHAPE_CLASSES):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            continue
        mask = _shape_mask(
            kind, yy[None], xx[None], cy[idx, None, None], cx[idx, None, None], r[idx, None, None]
        )
        x[idx] = mask * level[idx, None, None]
    x += noise * rng.standard_normal(x.shape)
    return np.clip(x, 0.0, 1.0)[..., None], labels.astype(np.intp)


# ---------------------------------------------------------------- specs


def parse_spec(spec: str) -> tuple[str, dict[str, str]]:
    kind, _, rest = spec.partition(":")
    fields = {}
    for item in filter(None, rest.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise UnknownFormatError(f"dataset spec field {item!r} is not key=value")
        fields[key.strip()] = value.strip()
    return kind.strip().lower(), fields


def _split(x, y, test_fraction: float, seed: int):
    n_test = int(round(x.shape[0] * test_fraction))
    order = np.random.default_rng(seed + 1).permutation(x.shape[0])
    test, train = order[:n_test], order[n_test:]
    return x[train], y[train], x[test], y[test]


def load_dataset(spec: str) -> Dataset:
    kind, f = parse_spec(spec)
    if kind == "blobs":
        n, d, z, seed = int(f.get("n", 1000)), int(f.get("d", 16)), int(f.get("classes", 4)), int(f.get("seed", 0))
        n_test = int(f.get("test", 0))
        x, y = make_blobs(n + n_test, d, z, seed)
        return Dataset(x[:n], y[:n], x[n:], y[n:], z, spec)
    if kind == "shapes":
        n, size, seed = int(f.get("n", 8192)), int(f.get("size", 12)), int(f.get("seed", 0))
        n_test = int(f.get("test", 2048))
        noise = float(f.get("noise", 0.15))
        x, y = make_shapes(n + n_test, size, seed, noise)
        return Dataset(x[:n], y[:n], x[n:], y[n:], len(SHAPE_CLASSES), spec)
    if kind == "idx":
        x, y = load_idx_pair(f["train_images"], f["train_labels"])
        if "test_images" in f:
            tx, ty = load_idx_pair(f["test_images"], f["test_labels"])
        else:
            x, y, tx, ty = _split(x, y, float(f.get("test_fraction", 0.2)), int(f.get("seed", 0)))
        z = int(f.get("classes", max(y.max(initial=0), ty.max(initial=0)) + 1))
        return Dataset(x, y, tx, ty, z, spec)
    if kind == "csv":
        x, y = load_csv(f["train"])
        if "test" in f:
            tx, ty = load_csv(f["test"])
            if tx.shape[1] != x.shape[1]:
                raise LengthMismatchError(f"train rows have {x.shape[1]} features, test rows {tx.shape[1]}")
        else:
            x, y, tx, ty = _split(x, y, float(f.get("test_fraction", 0.2)), int(f.get("seed", 0)))
        if "shape" in f:
            shape = tuple(int(s) for s in f["shape"].split("x"))
            x, tx = x.reshape((-1,) + shape), tx.reshape((-1,) + shape)
        z = int(f.get("classes", max(y.max(initial=0), ty.max(initial=0)) + 1))
        return Dataset(x, y, tx, ty, z, spec)
    raise UnknownFormatError(f"unknown dataset format {kind!r}; use blobs, shapes, idx or csv")


# ---------------------------------------------------------------- augmentation


def flip_crop(x: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random horizontal flip, then a random crop from a zero-padded copy.

    Non-image (2-D) inputs pass through unchanged.
    """
    if x.ndim != 4:
        return x
    n, h, w, _ = x.shape
    flip = rng.random(n) < 0.5
    offy = rng.integers(0, 2 * pad + 1, size=n)
    offx = rng.integers(0, 2 * pad + 1, size=n)
    x = np.where(flip[:, None, None, None], x[:, :, ::-1, :], x)
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty_like(x)
    for dy in range(2 * pad + 1):
        for dx in range(2 * pad + 1):
            sel = np.flatnonzero((offy == dy) & (offx == dx))
            if sel.size:
                out[sel] = padded[sel, dy:dy + h, dx:dx + w, :]
    return out
