"""Synthetic datasets, the dataset container format, and label codecs.

Toy generators are pure functions of their arguments including the seed.
Byte-image data is stored as raw bytes and uniformly dequantized only when
batches are drawn.

Container format ``TZKD`` (little-endian):

  magic ``TZKD`` | u8 version=1 | u8 kind (0=continuous, 1=byte-image)
  | u32 n | u32 D  (continuous)  or  u32 c, u32 h, u32 w  (byte-image)
  | observations as one TZKT tensor ((n,D) or (n,c,h,w), f32)
  | u32 n_heads | per head: u32 name_len, name utf8, n label bytes
    (0, 1, or 255 = unobserved)
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tz
from .errors import ConfigError, ContractError, FormatError, RangeError
from .tensor import Tensor, read_tensor, write_tensor

_TZKD_MAGIC = b"TZKD"
_TZKD_VERSION = 1
_KIND_CODES = {"continuous": 0, "byte-image": 1}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_UNOBSERVED_BYTE = 255


@dataclass
class BatchHead:
    """Per-head label columns for one batch: e in {0,1,-1}, optional codes."""

    e: np.ndarray
    c: Optional[np.ndarray] = None
    c_mask: Optional[np.ndarray] = None  # rows of c that are observed


@dataclass
class Batch:
    """A minibatch: float observation rows plus per-head labels."""

    t: np.ndarray
    heads: dict[str, BatchHead] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.t.shape[0]


@dataclass
class Dataset:
    """Observations plus per-head existence labels.

    ``x`` is (n, D) floats for continuous data or (n, c, h, w) uint8 for
    byte images. Label columns hold 0/1 with -1 for unobserved.
    """

    name: str
    kind: str
    x: np.ndarray
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    class_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "byte-image":
            self.x = np.asarray(self.x)
            if self.x.ndim != 4:
                raise ConfigError("byte-image data must be (n, c, h, w)")
            if self.x.dtype != np.uint8:
                if np.any(self.x < 0) or np.any(self.x > 255):
                    raise ConfigError("byte images must lie in [0, 255]")
                self.x = self.x.astype(np.uint8)
        else:
            self.x = np.asarray(self.x, dtype=np.float32)
            if self.x.ndim != 2:
                raise ConfigError("continuous data must be (n, D)")
        for hid, col in self.labels.items():
            col = np.asarray(col, dtype=np.int16)
            if col.shape != (self.n,):
                raise ConfigError(f"label column {hid!r} length mismatch")
            bad = ~np.isin(col, (-1, 0, 1))
            if np.any(bad):
                raise ConfigError(f"label column {hid!r} has values outside 0/1/-1")
            self.labels[hid] = col

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return int(np.prod(self.x.shape[1:]))

    @property
    def image_shape(self) -> Optional[tuple]:
        return tuple(self.x.shape[1:]) if self.kind == "byte-image" else None

    def observations(self, rng: Optional[np.random.Generator] = None,
                     idx: Optional[np.ndarray] = None) -> np.ndarray:
        """Float rows; byte images are uniformly dequantized to [0, 1)."""
        x = self.x if idx is None else self.x[idx]
        flat = x.reshape(x.shape[0], -1)
        if self.kind == "byte-image":
            if rng is None:
                raise ContractError("byte-image observations need an rng to dequantize")
            u = rng.random(flat.shape)
            return ((flat.astype(np.float64) + u) / 256.0)
        return flat.astype(np.float64)

    def batch(self, idx: np.ndarray,
              rng: Optional[np.random.Generator] = None) -> Batch:
        t = self.observations(rng=rng, idx=idx)
        heads = {hid: BatchHead(e=col[idx].copy())
                 for hid, col in self.labels.items()}
        return Batch(t=t, heads=heads)

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = rng.integers(0, self.n, size=batch_size)
        return self.batch(idx, rng=rng)


# -- toy generators -------------------------------------------------------------


def make_toy(kind: str, n: int, noise: float, seed: int, **kw) -> Dataset:
    """Deterministic 2-D toy datasets with per-component head labels."""
    if n < 1:
        raise ContractError("make_toy needs n >= 1")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        centers = _blob_centers(kw.pop("centers", 2), kw.pop("radius", 4.0))
        _reject_kwargs(kind, kw)
        comp = rng.integers(0, len(centers), size=n)
        x = centers[comp] + noise * rng.standard_normal((n, 2))
        labels = _component_labels("blob", comp, len(centers))
    elif kind == "two-moons":
        _reject_kwargs(kind, kw)
        comp = rng.integers(0, 2, size=n)
        theta = rng.random(n) * np.pi
        x = np.where(comp[:, None] == 0,
                     np.stack([np.cos(theta), np.sin(theta)], axis=1),
                     np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1))
        x = x + noise * rng.standard_normal((n, 2))
        labels = _component_labels("moon", comp, 2)
    elif kind == "gaussian-mixture":
        k = int(kw.pop("components", 3))
        radius = float(kw.pop("radius", 2.5))
        _reject_kwargs(kind, kw)
        centers = _circle_centers(k, radius)
        comp = rng.integers(0, k, size=n)
        x = centers[comp] + noise * rng.standard_normal((n, 2))
        labels = _component_labels("mix", comp, k)
    elif kind == "ring":
        radius = float(kw.pop("radius", 2.0))
        _reject_kwargs(kind, kw)
        theta = rng.random(n) * 2.0 * np.pi
        r = radius + noise * rng.standard_normal(n)
        x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        labels = {}
    else:
        raise ConfigError(f"unknown toy kind {kind!r}")
    ids = comp.astype(np.int64) if kind != "ring" else None
    return Dataset(name=f"{kind}-n{n}-s{seed}", kind="continuous",
                   x=x.astype(np.float32), labels=labels, class_ids=ids)


def _reject_kwargs(kind: str, kw: dict) -> None:
    if kw:
        raise ConfigError(f"toy kind {kind!r} got unknown options {sorted(kw)}")


def _blob_centers(centers, radius: float) -> np.ndarray:
    if isinstance(centers, (int, np.integer)):
        if centers == 2:
            return np.array([[-3.0, 0.0], [3.0, 0.0]])
        return _circle_centers(int(centers), radius)
    arr = np.asarray(centers, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigError("explicit blob centers must be (k, 2)")
    return arr


def _circle_centers(k: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(k) / k
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def _component_labels(stem: str, comp: np.ndarray, k: int) -> dict[str, np.ndarray]:
    return {f"{stem}{j}": (comp == j).astype(np.int16) for j in range(k)}


# -- label codecs -----------------------------------------------------------------


@dataclass
class LabelCodec:
    """Mapping between integer class labels and per-head bit columns."""

    scheme: str  # "one-bit-per-class" | "binary-code"
    n_bits: int
    stem: str = "bit"

    def __post_init__(self):
        if self.scheme not in ("one-bit-per-class", "binary-code"):
            raise ConfigError(f"unknown codec scheme {self.scheme!r}")
        if self.n_bits < 1:
            raise ConfigError("codec needs n_bits >= 1")

    def head_ids(self) -> list[str]:
        return [f"{self.stem}{j}" for j in range(self.n_bits)]


def encode_labels(labels: np.ndarray, codec: LabelCodec) -> dict[str, np.ndarray]:
    """Integer labels -> per-head bit columns.

    binary-code emits the most significant bit first (label 3 with 4 bits is
    0,0,1,1); one-bit-per-class emits one indicator column per class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0):
        raise RangeError("labels must be non-negative")
    if codec.scheme == "binary-code":
        if np.any(labels >= 2 ** codec.n_bits):
            raise RangeError(
                f"labels must be < 2^{codec.n_bits} for the binary code")
        shifts = codec.n_bits - 1 - np.arange(codec.n_bits)
        return {hid: ((labels >> s) & 1).astype(np.int16)
                for hid, s in zip(codec.head_ids(), shifts)}
    if np.any(labels >= codec.n_bits):
        raise RangeError("labels must be < n_bits for one-bit-per-class")
    return {hid: (labels == j).astype(np.int16)
            for j, hid in enumerate(codec.head_ids())}


def decode_labels(columns: dict[str, np.ndarray], codec: LabelCodec) -> np.ndarray:
    """Inverse of :func:`encode_labels` on the declared range."""
    cols = [np.asarray(columns[hid], dtype=np.int64) for hid in codec.head_ids()]
    stacked = np.stack(cols, axis=0)
    if codec.scheme == "binary-code":
        shifts = codec.n_bits - 1 - np.arange(codec.n_bits)
        return (stacked * (1 << shifts)[:, None]).sum(axis=0)
    hits = stacked.sum(axis=0)
    if np.any(hits != 1):
        raise RangeError("one-bit-per-class rows must have exactly one set bit")
    return np.argmax(stacked, axis=0)


# -- container io -------------------------------------------------------------------


def save_dataset(path, ds: Dataset) -> None:
    buf = io.BytesIO()
    buf.write(_TZKD_MAGIC)
    buf.write(struct.pack("<BB", _TZKD_VERSION, _KIND_CODES[ds.kind]))
    buf.write(struct.pack("<I", ds.n))
    if ds.kind == "continuous":
        buf.write(struct.pack("<I", ds.x.shape[1]))
    else:
        c, h, w = ds.x.shape[1:]
        buf.write(struct.pack("<III", c, h, w))
    with tz.precision("f32"):
        write_tensor(buf, Tensor(ds.x.astype(np.float32)))
    buf.write(struct.pack("<I", len(ds.labels)))
    for hid, col in ds.labels.items():
        raw = hid.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        out = col.astype(np.int64).copy()
        out[out == -1] = _UNOBSERVED_BYTE
        buf.write(out.astype(np.uint8).tobytes())
    with open(path, "wb") as fp:
        fp.write(buf.getvalue())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fp:
        raw = fp.read()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != _TZKD_MAGIC:
        raise FormatError(f"bad container magic {magic!r} at offset 0")
    version, kind_code = struct.unpack("<BB", buf.read(2))
    if version != _TZKD_VERSION:
        raise FormatError(f"unsupported container version {version}")
    if kind_code not in _CODE_KINDS:
        raise FormatError(f"unknown dataset kind code {kind_code}")
    kind = _CODE_KINDS[kind_code]
    (n,) = struct.unpack("<I", buf.read(4))
    if kind == "continuous":
        (d,) = struct.unpack("<I", buf.read(4))
        expected = (n, d)
    else:
        c, h, w = struct.unpack("<III", buf.read(12))
        expected = (n, c, h, w)
    try:
        obs = read_tensor(buf)
    except FormatError as err:
        raise FormatError(f"container payload: {err}") from None
    if obs.shape != expected:
        raise FormatError(
            f"declared size {expected} disagrees with payload shape {obs.shape}"
        )
    (n_heads,) = struct.unpack("<I", buf.read(4))
    labels = {}
    for _ in range(n_heads):
        (name_len,) = struct.unpack("<I", buf.read(4))
        hid = buf.read(name_len).decode("utf-8")
        col_raw = buf.read(n)
        if len(col_raw) != n:
            raise FormatError(
                f"label column {hid!r} truncated at offset {buf.tell()}"
            )
        col = np.frombuffer(col_raw, dtype=np.uint8).astype(np.int16)
        col[col == _UNOBSERVED_BYTE] = -1
        labels[hid] = col
    if buf.read(1):
        raise FormatError(f"trailing bytes after label block at offset {buf.tell() - 1}")
    x = obs.data
    if kind == "byte-image":
        if np.any(x < 0) or np.any(x > 255):
            raise FormatError("byte-image payload has values outside [0, 255]")
        x = x.astype(np.uint8)
    return Dataset(name=os.path.basename(str(path)), kind=kind, x=x, labels=labels)


# -- image helpers -------------------------------------------------------------------


def pad_to_side(images: np.ndarray, side: int) -> np.ndarray:
    """Center (n,c,h,w) byte images on a zero canvas of side x side."""
    n, c, h, w = images.shape
    if h > side or w > side:
        raise ConfigError(f"cannot pad {h}x{w} images down to {side}x{side}")
    out = np.zeros((n, c, side, side), dtype=images.dtype)
    top = (side - h) // 2
    left = (side - w) // 2
    out[:, :, top:top + h, left:left + w] = images
    return out


def gray_to_rgb(images: np.ndarray) -> np.ndarray:
    """Duplicate a single grayscale channel into three identical channels."""
    if images.shape[1] != 1:
        raise ConfigError("gray_to_rgb expects 1-channel images")
    return np.repeat(images, 3, axis=1)


def load_grid_images(path, side: int, rgb: bool = False) -> Dataset:
    """Load a byte-image container, center-pad to ``side``, optionally to RGB."""
    ds = load_dataset(path)
    if ds.kind != "byte-image":
        raise FormatError(f"{path} is not a byte-image container")
    x = pad_to_side(ds.x, side)
    if rgb and x.shape[1] == 1:
        x = gray_to_rgb(x)
    return Dataset(name=ds.name, kind="byte-image", x=x, labels=ds.labels)


def write_pgm(path, image: np.ndarray) -> None:
    """Write one (h, w) uint8 array as a binary PGM."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ConfigError("write_pgm expects an (h, w) array")
    img = np.clip(img, 0, 255).astype(np.uint8)
    with open(path, "wb") as fp:
        fp.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fp.write(img.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write one (3, h, w) uint8 array as a binary PPM."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ConfigError("write_ppm expects a (3, h, w) array")
    img = np.clip(img, 0, 255).astype(np.uint8)
    with open(path, "wb") as fp:
        fp.write(f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode())
        fp.write(np.moveaxis(img, 0, -1).tobytes())
