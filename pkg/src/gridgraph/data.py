"""Dataset ingestion (IDX, binary PPM), seeded randomness and splits."""
from __future__ import annotations

import gzip
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream.

    The n-th output only depends on ``seed + n * gamma``, so blocks of draws
    are generated vectorized while staying identical to the scalar recurrence.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def _block(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GAMMA
            out = _mix(z)
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        return out

    def next_u64(self) -> int:
        return int(self._block(1)[0])

    def random(self, size=None):
        """Uniform doubles in [0, 1) built from the top 53 bits."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._block(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high).

        Uses floor(u * span); the bias is below span / 2**53.
        """
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        span = high - low
        u = self.random(size)
        if size is None:
            return low + min(int(u * span), span - 1)
        return low + np.minimum((u * span).astype(np.int64), span - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream; does not advance this stream."""
        with np.errstate(over="ignore"):
            z = _mix(np.array([self.state ^ ((int(tag) * 0xD1B54A32D192ED03) & _MASK64)],
                              dtype=np.uint64))
        return Rng(int(z[0]))


@dataclass
class Dataset:
    images: np.ndarray  # (count, rows, cols, channels) in [0, 1]
    labels: np.ndarray  # (count,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx])


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def decode_idx_images(raw: bytes) -> np.ndarray:
    if len(raw) < 16:
        raise FormatError("IDX image file truncated in header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x}")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise FormatError(f"IDX image payload truncated: {len(raw)} < {need} bytes")
    pix = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pix.reshape(count, rows, cols)


def decode_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError("IDX label file truncated in header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad IDX label magic 0x{magic:08x}")
    if len(raw) < 8 + count:
        raise FormatError(f"IDX label payload truncated: {len(raw)} < {8 + count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def parse_idx(images_file, labels_file) -> Dataset:
    pix = decode_idx_images(_read_bytes(images_file))
    labels = decode_idx_labels(_read_bytes(labels_file))
    if len(pix) != len(labels):
        raise FormatError(f"count mismatch: {len(pix)} images vs {len(labels)} labels")
    images = (pix.astype(np.float64) / 255.0)[..., None]
    return Dataset(images, labels)


def encode_idx_images(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    count, rows, cols = pixels.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + pixels.tobytes()


def encode_idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Inverse of the 1/255 scaling."""
    return np.rint(np.asarray(images) * 255.0).astype(np.uint8)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(directory, split: str):
    """Locate the standard MNIST file pair (optionally gzipped) in ``directory``."""
    directory = Path(directory)
    found = []
    for stem in MNIST_FILES[split]:
        for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"),
                     stem.replace("-idx", ".idx") + ".gz"):
            if (directory / cand).exists():
                found.append(directory / cand)
                break
        else:
            raise FileNotFoundError(f"MNIST {split} file {stem}[.gz] not found in {directory}")
    return tuple(found)


def load_mnist(directory, split: str) -> Dataset:
    return parse_idx(*find_mnist(directory, split))


_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PPM_TOKEN.match(raw, pos)
        if m is None:
            raise FormatError(f"{path}: malformed PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    n = width * height * 3
    if len(raw) < pos + n:
        raise FormatError(f"{path}: truncated PPM payload")
    pix = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos)
    return pix.reshape(height, width, 3).astype(np.float64) / 255.0


def load_ppm_dir(path) -> Dataset:
    """Load every ``*.ppm`` in ``path``; the label is the leading integer of the file name.

    ``3_000123.ppm`` has label 3.  Files are read in sorted name order.
    """
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() == ".ppm")
    if not files:
        return Dataset(np.zeros((0, 0, 0, 3)), np.zeros(0, dtype=np.int64))
    images, labels = [], []
    for f in files:
        m = re.match(r"(\d+)", f.name)
        if m is None:
            raise FormatError(f"{f.name}: file name must start with the class label")
        images.append(read_ppm(f))
        labels.append(int(m.group(1)))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"images in {path} have differing shapes {sorted(shapes)}")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64))


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255), value = round(255 * pixel)."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[..., 0]
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PPM_TOKEN.match(raw, pos)
        if m is None:
            raise FormatError(f"{path}: malformed PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pix.reshape(h, w).astype(np.float64) / 255.0


def split(dataset: Dataset, sizes, rng: Rng) -> tuple[Dataset, ...]:
    """Seeded Fisher-Yates shuffle, then consecutive prefix slices of the given sizes."""
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes) or sum(sizes) > len(dataset):
        raise ValueError(f"split sizes {sizes} exceed dataset size {len(dataset)}")
    perm = rng.permutation(len(dataset))
    parts, start = [], 0
    for s in sizes:
        parts.append(dataset.subset(perm[start:start + s]))
        start += s
    return tuple(parts)


def threads_from_env() -> int:
    return max(1, int(os.environ.get("GRIDGRAPH_THREADS", "1")))
