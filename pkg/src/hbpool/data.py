"""Synthetic attribute-pair images, tensor containers and Netpbm I/O.

Tensor container layout (all integers u32 little-endian)::

    b"HBPT" | version | entry count
    per entry: name length | utf-8 name | rank | extents... | float32 LE values (row-major)
"""
from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"HBPT"
VERSION = 1


class TensorFileError(ValueError):
    """Base class for malformed tensor containers."""


class BadMagicError(TensorFileError):
    pass


class TruncatedError(TensorFileError):
    pass


class TrailingBytesError(TensorFileError):
    pass


class DuplicateNameError(TensorFileError):
    pass


class UnsupportedVersionError(TensorFileError):
    pass


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Labeled samples: images ``n x H x W x 3`` or a feature-map triple."""

    labels: np.ndarray
    images: np.ndarray | None = None
    features: tuple[np.ndarray, ...] | None = None
    n_classes: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if (self.images is None) == (self.features is None):
            raise ValueError("a dataset holds either images or feature maps, not both")
        n = len(self.labels)
        if self.images is not None and len(self.images) != n:
            raise ValueError(f"{len(self.images)} images vs {n} labels")
        if self.features is not None:
            first = self.features[0].shape
            for f in self.features:
                if f.shape != first:
                    raise ValueError(f"feature maps in a triple must share shape: {first} vs {f.shape}")
            if first[0] != n:
                raise ValueError(f"{first[0]} feature samples vs {n} labels")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def inputs(self):
        return self.images if self.images is not None else self.features

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        if self.images is not None:
            return Dataset(self.labels[idx], images=self.images[idx], n_classes=self.n_classes)
        return Dataset(self.labels[idx], features=tuple(f[idx] for f in self.features), n_classes=self.n_classes)

    def split(self, seed: int, test_fraction: float = 0.2) -> tuple["Dataset", "Dataset"]:
        """Stratified train/test split; per class the first ``round(f*n)`` shuffled samples go to test."""
        rng = np.random.default_rng([seed, 0x5E11])
        train, test = [], []
        for k in range(self.n_classes):
            members = np.flatnonzero(self.labels == k)
            members = members[rng.permutation(len(members))]
            n_test = int(round(test_fraction * len(members)))
            test.extend(members[:n_test])
            train.extend(members[n_test:])
        return self.subset(np.sort(train)), self.subset(np.sort(test))


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 16
    image_size: int = 32
    palette_a: int = 4
    palette_b: int = 4
    noise_std: float = 0.1
    samples_per_class: int = 100
    seed: int = 0
    patch_size: int = 10

    def validate(self) -> None:
        if self.classes != self.palette_a * self.palette_b:
            raise ValueError(
                f"classes ({self.classes}) must equal palette_a x palette_b "
                f"({self.palette_a} x {self.palette_b})"
            )
        if min(self.palette_a, self.palette_b, self.samples_per_class) <= 0:
            raise ValueError("palettes and samples_per_class must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if 2 * self.patch_size > self.image_size:
            raise ValueError("two patches must fit side by side in the image")


BACKGROUND = 0.0


def _grating(size: int, attr: int, vertical: bool, phase: float) -> np.ndarray:
    """Gray sinusoidal stripes whose period (2 + attr pixels) encodes the attribute.

    Stripes run horizontally or vertically, so a left-right flip never changes
    the attribute.
    """
    r, c = np.mgrid[0:size, 0:size]
    u = c if vertical else r
    g = 0.5 + 0.45 * np.cos(2 * np.pi * u / (2.0 + attr) + phase)
    return np.repeat(g[..., None], 3, axis=2)


def _checker(size: int, attr: int, n_attr: int, offset: int) -> np.ndarray:
    """Checkerboard of a hue (encoding the attribute) against black."""
    rgb = np.array(colorsys.hsv_to_rgb(attr / n_attr, 0.9, 0.95))
    r, c = np.mgrid[0:size, 0:size]
    on = ((r + c + offset) % 2 == 0)[..., None]
    return np.where(on, rgb, 0.05)


def _place_two(rng: np.random.Generator, size: int, patch: int) -> tuple[tuple[int, int], tuple[int, int]]:
    hi = size - patch + 1
    grid = np.stack(np.mgrid[0:hi, 0:hi], axis=-1).reshape(-1, 2)
    while True:
        first = grid[rng.integers(len(grid))]
        far = np.abs(grid - first).max(axis=1) >= patch
        if far.any():
            # a corner always has a partner when 2 * patch <= size
            second = grid[far][rng.integers(far.sum())]
            return (int(first[0]), int(first[1])), (int(second[0]), int(second[1]))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Render ``samples_per_class`` images per class.

    Each image holds a gray grating (attribute ``a``: stripe period) and a
    colored checkerboard (attribute ``b``: hue) at random, non-overlapping
    positions on a black background. The label is ``a * palette_b + b``.

    The background is black because the backbone has no biases: empty
    regions then give near-zero features and the pooled vector is carried by
    the two patches instead of a shared background response.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s, p = spec.image_size, spec.patch_size
    n = spec.classes * spec.samples_per_class
    images = np.empty((n, s, s, 3))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for label in range(spec.classes):
        a, b = divmod(label, spec.palette_b)
        for _ in range(spec.samples_per_class):
            img = np.full((s, s, 3), BACKGROUND)
            (r1, c1), (r2, c2) = _place_two(rng, s, p)
            img[r1:r1 + p, c1:c1 + p] = _grating(p, a, bool(rng.integers(2)), rng.uniform(0, 2 * np.pi))
            img[r2:r2 + p, c2:c2 + p] = _checker(p, b, spec.palette_b, int(rng.integers(2)))
            if spec.noise_std > 0:
                img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = label
            i += 1
    return Dataset(labels, images=images, n_classes=spec.classes)


# ---------------------------------------------------------------------------
# tensor container


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors; names must be unique (a mapping guarantees it)."""
    for name, value in tensors.items():
        if any(s <= 0 for s in np.shape(value)):
            raise ValueError(f"tensor {name!r} has a non-positive extent {np.shape(value)}")
    Path(path).write_bytes(encode_tensors(tensors))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"payload ends inside {what} (need {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"magic mismatch: expected {MAGIC!r}, found {magic!r}")
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    count = r.u32("entry count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        rank = r.u32("rank")
        shape = tuple(r.u32("extent") for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size, f"values of {name!r}"), dtype="<f4")
        out[name] = data.astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise TrailingBytesError(f"{len(buf) - r.pos} bytes after the last declared entry")
    return out


def read_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Netpbm images


def _read_header(buf: bytes, fields: int) -> tuple[list[bytes], int]:
    """Whitespace-separated header tokens (with # comments), and the payload offset."""
    tokens, pos = [], 0
    while len(tokens) < fields:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated Netpbm header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def load_ppm(path) -> np.ndarray:
    """Binary P6 image as ``H x W x 3`` float64 in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, off = _read_header(buf, 4)
    if tokens[0] != b"P6":
        raise ImageFormatError(f"expected P6 magic, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 256:
        raise ImageFormatError(f"only 8-bit PPM is supported (maxval {maxval})")
    if len(buf) - off < h * w * 3:
        raise ImageFormatError("PPM payload shorter than its header declares")
    raw = np.frombuffer(buf, dtype=np.uint8, count=h * w * 3, offset=off)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def save_ppm(path, image: np.ndarray) -> None:
    """Write an ``H x W x 3`` image in [0, 1] as 8-bit P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"expected H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    px = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())


def to_gray8(heat: np.ndarray) -> np.ndarray:
    """Min-max scale a map to 0..255; a constant map becomes all zeros."""
    heat = np.asarray(heat, dtype=np.float64)
    lo, hi = heat.min(), heat.max()
    if not hi > lo:
        return np.zeros(heat.shape, dtype=np.uint8)
    return np.round((heat - lo) / (hi - lo) * 255).astype(np.uint8)


def save_pgm(path, heat: np.ndarray) -> None:
    heat = np.asarray(heat)
    if heat.ndim != 2:
        raise ImageFormatError(f"expected an h x w map, got {heat.shape}")
    h, w = heat.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + to_gray8(heat).tobytes())


def load_pgm(path) -> np.ndarray:
    """Binary P5 map as uint8 ``h x w``."""
    buf = Path(path).read_bytes()
    tokens, off = _read_header(buf, 4)
    if tokens[0] != b"P5":
        raise ImageFormatError(f"expected P5 magic, found {tokens[0]!r}")
    w, h = int(tokens[1]), int(tokens[2])
    if len(buf) - off < h * w:
        raise ImageFormatError("PGM payload shorter than its header declares")
    return np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# manifests


MANIFEST = "manifest.txt"


def write_image_dataset(root, dataset: Dataset) -> Path:
    """Save images as PPM under ``root/images`` plus a ``path,label`` manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(dataset))))
    lines = []
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        rel = f"images/{i:0{width}d}.ppm"
        save_ppm(root / rel, img)
        lines.append(f"{rel},{int(label)}")
    manifest = root / MANIFEST
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_manifest(path, n_classes: int | None = None) -> Dataset:
    """Load a ``<relative path>,<label>`` manifest (paths relative to its directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    base = path.parent
    images, labels = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        rel, sep, label = line.rpartition(",")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected '<path>,<label>'")
        images.append(load_ppm(base / rel))
        labels.append(int(label))
    if not images:
        raise ValueError(f"{path}: manifest lists no samples")
    return Dataset(np.array(labels), images=np.stack(images), n_classes=n_classes)
