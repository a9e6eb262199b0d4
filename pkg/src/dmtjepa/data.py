"""Synthetic shape images and the fixed binary corpus format.

The synthetic generator draws one primary shape (disk, square, or triangle)
per image, with optional smaller distractor shapes, random geometry, and
foreground/background intensities drawn from class-independent ranges: the
class is carried by geometry alone, never by intensity statistics. Labels
and per-pixel masks exist for probing and analysis only; pre-training code
receives an :class:`UnlabeledImages` view that simply has no labels.

Corpus files are little-endian and trivially parseable:

    magic "DMTJ" | version u32 | count u32 | C u32 | H u32 | W u32
    count * C * H * W  float32 payload
    crc32(payload) u32

A manifest is a text file with one ``relpath mean_per_channel std_per_channel``
line per corpus file (means/stds comma-separated). An optional
``<corpusfile>.labels`` sidecar (one integer per record) makes a corpus
probeable.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DMTJ"
CORPUS_VERSION = 1
CLASS_NAMES = ("disk", "square", "triangle")


class DataSpecError(ValueError):
    """The synthetic-data specification is unusable."""


class CorpusFormatError(ValueError):
    """Corpus bytes do not follow the container format."""


class CorpusTruncatedError(CorpusFormatError):
    """Corpus file ends before the declared payload/checksum."""


class CorpusChecksumError(CorpusFormatError):
    """Payload checksum does not match the stored CRC32."""


@dataclass(frozen=True)
class SyntheticShapesSpec:
    image_size: tuple[int, int] = (32, 32)
    channels: int = 1
    num_classes: int = 3
    shapes_per_image: int = 1
    fg_range: tuple[float, float] = (0.65, 0.95)
    bg_range: tuple[float, float] = (0.05, 0.35)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise DataSpecError(f"num_classes must be in [2, {len(CLASS_NAMES)}]")
        if self.channels not in (1, 3):
            raise DataSpecError("channels must be 1 or 3")
        if self.shapes_per_image < 1:
            raise DataSpecError("shapes_per_image must be >= 1")
        for name, (lo, hi) in (("fg_range", self.fg_range), ("bg_range", self.bg_range)):
            if not (0.0 <= lo <= hi <= 1.0):
                raise DataSpecError(f"{name} must be an ordered range inside [0, 1]")
        if self.noise_sigma < 0:
            raise DataSpecError("noise_sigma must be non-negative")
        h, w = self.image_size
        # The square has the smallest radius for a given area.
        if math.sqrt(_PRIMARY_AREA[0] * h * w / 4.0) < 2.0:
            raise DataSpecError(f"canvas {self.image_size} too small to fit a shape")


# Shape sizes are drawn as an area fraction of the canvas and converted to a
# per-class radius, so foreground area carries no class information: the
# classes are separable by geometry alone.
_PRIMARY_AREA = (0.10, 0.25)
_DISTRACTOR_AREA = (0.010, 0.030)
_AREA_COEF = {0: math.pi, 1: 4.0, 2: 2.0}  # area = coef * r^2 per shape kind


class UnlabeledImages:
    """Label-free view of a dataset: the only thing pre-training may touch."""

    def __init__(self, images: np.ndarray):
        self.images = images

    def __len__(self) -> int:
        return self.images.shape[0]

    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class ImageDataset:
    images: np.ndarray  # (B, C, H, W) float64
    labels: np.ndarray | None = None
    masks: np.ndarray | None = None  # (B, H, W) uint8, 0 = background, 1+class = shape

    def __len__(self) -> int:
        return self.images.shape[0]

    def unlabeled(self) -> UnlabeledImages:
        return UnlabeledImages(self.images)

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise DataSpecError("dataset has no labels; probes refuse to run")
        return self.labels


# ----------------------------------------------------------------------
# Shape rendering
# ----------------------------------------------------------------------

def _shape_mask(kind: int, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == 0:  # disk
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:  # square
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    # triangle, apex up: half-width grows linearly from apex to base
    rel = (yy - (cy - r)) / (2.0 * r)
    return (rel >= 0.0) & (rel <= 1.0) & (np.abs(xx - cx) <= rel * r)


def _draw_shape(canvas: np.ndarray, mask_plane: np.ndarray, kind: int,
                area_range: tuple[float, float], fg_range, rng) -> None:
    c, h, w = canvas.shape
    area = rng.uniform(area_range[0], area_range[1]) * h * w
    r = math.sqrt(area / _AREA_COEF[kind])
    r = min(r, (min(h, w) - 2) / 2.0)  # keep the shape inside the canvas
    cy = rng.uniform(r, h - 1 - r)
    cx = rng.uniform(r, w - 1 - r)
    mask = _shape_mask(kind, h, w, cy, cx, r)
    for ch in range(c):
        canvas[ch][mask] = rng.uniform(*fg_range)
    mask_plane[mask] = kind + 1


def generate_synthetic(spec: SyntheticShapesSpec, count: int) -> ImageDataset:
    """Deterministic dataset of ``count`` images; labels cycle the classes.

    The label is the class with the largest rendered foreground area, which
    equals the primary shape's class except when distractors of one class
    jointly outgrow a small primary.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    images = np.zeros((count, spec.channels, h, w), dtype=np.float64)
    labels = np.zeros(count, dtype=np.int64)
    masks = np.zeros((count, h, w), dtype=np.uint8)
    for i in range(count):
        primary = i % spec.num_classes
        canvas = np.empty((spec.channels, h, w), dtype=np.float64)
        for ch in range(spec.channels):
            canvas[ch] = rng.uniform(*spec.bg_range)
        plane = masks[i]
        _draw_shape(canvas, plane, primary, _PRIMARY_AREA, spec.fg_range, rng)
        for _ in range(spec.shapes_per_image - 1):
            kind = int(rng.integers(spec.num_classes))
            _draw_shape(canvas, plane, kind, _DISTRACTOR_AREA, spec.fg_range, rng)
        if spec.noise_sigma > 0:
            canvas += rng.normal(0.0, spec.noise_sigma, size=canvas.shape)
        np.clip(canvas, 0.0, 1.0, out=canvas)
        areas = [np.count_nonzero(plane == k + 1) for k in range(spec.num_classes)]
        best = int(np.argmax(areas))
        labels[i] = best if areas[best] > areas[primary] else primary
        images[i] = canvas
    # Quantize to float32 grid so corpus round-trips are bit-exact.
    images = np.float64(np.float32(images))
    return ImageDataset(images=images, labels=labels, masks=masks)


# ----------------------------------------------------------------------
# Corpus container
# ----------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIII")


def write_corpus(path, images: np.ndarray) -> None:
    """Write (B, C, H, W) images as float32 records with a payload CRC32."""
    arr = np.asarray(images)
    if arr.ndim != 4:
        raise CorpusFormatError(f"corpus images must be 4-D, got shape {arr.shape}")
    b, c, h, w = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, CORPUS_VERSION, b, c, h, w))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    os.replace(tmp, path)


def read_corpus(path) -> np.ndarray:
    """Read a corpus file back as float64 (B, C, H, W)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorpusTruncatedError(f"{path}: shorter than the header")
    magic, version, b, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {magic!r}")
    if version != CORPUS_VERSION:
        raise CorpusFormatError(f"{path}: unsupported corpus version {version}")
    expected = b * c * h * w * 4
    body = raw[_HEADER.size :]
    if len(body) < expected + 4:
        raise CorpusTruncatedError(
            f"{path}: payload truncated ({len(body)} bytes, need {expected + 4})"
        )
    payload = body[:expected]
    (crc,) = struct.unpack_from("<I", body, expected)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorpusChecksumError(f"{path}: checksum mismatch")
    arr = np.frombuffer(payload, dtype="<f4").reshape(b, c, h, w)
    return arr.astype(np.float64)


def _parse_floats(field: str) -> np.ndarray:
    return np.array([float(x) for x in field.split(",")], dtype=np.float64)


def load_raw_corpus(root, manifest_name: str = "manifest.txt") -> ImageDataset:
    """Load every corpus in a manifest with per-channel normalization.

    Lines are ``relpath means stds``; an empty manifest yields an empty
    dataset. Labels come from optional ``<relpath>.labels`` sidecars and are
    attached only when every listed corpus has one.
    """
    root = Path(root)
    lines = [
        ln.strip()
        for ln in (root / manifest_name).read_text(encoding="utf-8").splitlines()
        if ln.strip() and not ln.startswith("#")
    ]
    parts_images: list[np.ndarray] = []
    parts_labels: list[np.ndarray] = []
    labels_complete = True
    shape = None
    for line in lines:
        fields = line.split()
        if len(fields) != 3:
            raise CorpusFormatError(f"manifest line needs 3 fields: {line!r}")
        relpath, mean_s, std_s = fields
        images = read_corpus(root / relpath)
        mean, std = _parse_floats(mean_s), _parse_floats(std_s)
        c = images.shape[1]
        if mean.size != c or std.size != c:
            raise CorpusFormatError(f"{relpath}: stats do not match {c} channels")
        if np.any(std <= 0):
            raise CorpusFormatError(f"{relpath}: non-positive std")
        if shape is None:
            shape = images.shape[1:]
        elif images.shape[1:] != shape:
            raise CorpusFormatError(f"{relpath}: image shape {images.shape[1:]} != {shape}")
        images = (images - mean[None, :, None, None]) / std[None, :, None, None]
        parts_images.append(images)
        sidecar = root / (relpath + ".labels")
        if sidecar.exists():
            ids = np.array(
                [int(x) for x in sidecar.read_text(encoding="utf-8").split()], dtype=np.int64
            )
            if ids.size != images.shape[0]:
                raise CorpusFormatError(f"{sidecar}: {ids.size} labels for {images.shape[0]} records")
            parts_labels.append(ids)
        else:
            labels_complete = False
    if not parts_images:
        return ImageDataset(images=np.zeros((0, 1, 1, 1), dtype=np.float64))
    labels = np.concatenate(parts_labels) if (labels_complete and parts_labels) else None
    return ImageDataset(images=np.concatenate(parts_images), labels=labels)
