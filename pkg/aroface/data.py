"""
Synthetic landmark-anchored datasets, their on-disk format, and the
alignment-perturbation protocol.

Each class is a set of oriented grating patches centred on the five template
landmarks, so a small misalignment breaks the registration between pattern
and landmark the way face alignment error does for real faces.

On disk a dataset is a directory with `meta.json`, `manifest.jsonl` (one row
per sample) and one `.ten` file per image: a 16-byte magic, three uint32 LE
dims (c, h, w) and c*h*w float64 LE values.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field

from aroface import geometry, warp
from aroface.constraint import N_LANDMARKS, LandmarkTemplate
from aroface.errors import (ContractViolation, FileIntegrityError, ManifestError, MissingFileError,
                            ShapeMismatchError)
from aroface.geometry import AffineParams, GridShape
from aroface.utils import rng as rng_utils

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"AROTEN01".ljust(16, b"\0")
_DIMS = struct.Struct("<III")


@dataclass(frozen=True)
class Sample:
    sample_id: int
    image: np.ndarray
    label: int
    landmarks: np.ndarray  # (5, 2) centered (u, v)


@dataclass
class Dataset:
    samples: List[Sample]
    num_classes: int
    channels: int
    shape: GridShape
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for s in self.samples:
            if not 0 <= s.label < self.num_classes:
                raise ContractViolation(f"sample {s.sample_id} label {s.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def ids(self) -> np.ndarray:
        return np.array([s.sample_id for s in self.samples], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.num_classes, self.channels, self.shape, dict(self.meta))


class PerturbSpec(BaseModel):
    """Zero-mean Gaussian alignment error; scale is drawn around 1."""

    rotation_std: float = Field(0.05, ge=0.0)
    translation_std: float = Field(1.5, ge=0.0)
    scale_std: float = Field(0.05, ge=0.0)


class SyntheticSpec(BaseModel):
    n_classes: int = Field(10, ge=2)
    train_per_class: int = Field(200, ge=1)
    test_per_class: int = Field(50, ge=1)
    height: int = Field(64, ge=1)
    width: int = Field(64, ge=1)
    channels: int = Field(1, ge=1)
    noise_std: float = Field(0.05, ge=0.0)
    seed: int = Field(0, ge=0)


# --- generation ---

def _class_pattern(gen: np.random.Generator, tpl: LandmarkTemplate, channels: int,
                   u: np.ndarray, v: np.ndarray) -> np.ndarray:
    base = min(tpl.shape.height, tpl.shape.width)
    sigma = 0.07 * base
    image = np.zeros((channels,) + u.shape)
    for p in tpl.points:
        orientation = gen.uniform(0.0, math.pi)
        wavelength = gen.uniform(0.12, 0.3) * base
        phase = gen.uniform(0.0, 2.0 * math.pi)
        amplitude = gen.uniform(0.5, 1.0) * gen.choice([-1.0, 1.0])
        du, dv = u - p.u, v - p.v
        along = du * math.cos(orientation) + dv * math.sin(orientation)
        envelope = np.exp(-(du ** 2 + dv ** 2) / (2.0 * sigma ** 2))
        grating = amplitude * envelope * np.cos(2.0 * math.pi * along / wavelength + phase)
        image += grating[None] * gen.uniform(0.5, 1.0, size=(channels, 1, 1))
    return image


def generate_synthetic(n_classes: int, per_class: int, shape: GridShape, tpl: LandmarkTemplate, seed: int,
                       noise_std: float = 0.05, channels: int = 1, first_id: int = 0,
                       split: str = "train") -> Dataset:
    """Class patterns depend only on (seed, class); noise on (seed, split, sample id)."""
    if n_classes < 2 or per_class < 1:
        raise ContractViolation(f"need n_classes >= 2 and per_class >= 1, got {n_classes}, {per_class}")
    if tpl.shape != shape:
        tpl = tpl.rescaled(shape)
    u, v = geometry.grid_coordinates(shape)
    landmarks = tpl.as_array()
    samples = []
    sid = first_id
    for label in range(n_classes):
        pattern = _class_pattern(rng_utils.stream(seed, "synthetic", "class", label), tpl, channels, u, v)
        for _ in range(per_class):
            noise = rng_utils.stream(seed, "synthetic", split, sid).standard_normal(pattern.shape)
            samples.append(Sample(sid, pattern + noise_std * noise, label, landmarks.copy()))
            sid += 1
    meta = {"seed": seed, "noise_std": noise_std, "split": split, "generator": "landmark-gratings"}
    return Dataset(samples, n_classes, channels, shape, meta)


def synthetic_splits(spec: SyntheticSpec, tpl: LandmarkTemplate) -> Tuple[Dataset, Dataset]:
    """Train and test sets sharing class patterns, with disjoint sample ids."""
    shape = GridShape(spec.height, spec.width)
    train = generate_synthetic(spec.n_classes, spec.train_per_class, shape, tpl, spec.seed,
                               spec.noise_std, spec.channels, split="train")
    test = generate_synthetic(spec.n_classes, spec.test_per_class, shape, tpl, spec.seed,
                              spec.noise_std, spec.channels, first_id=len(train), split="test")
    return train, test


# --- alignment perturbation ---

def draw_perturbation(spec: PerturbSpec, gen: np.random.Generator) -> AffineParams:
    z = gen.standard_normal(4)
    scale = 1.0 + spec.scale_std * z[3]
    if scale <= 0.0:
        logger.warning("perturbation scale %.4g clamped to 1e-3", scale)
        scale = 1e-3
    return AffineParams(spec.rotation_std * z[0], spec.translation_std * z[1], spec.translation_std * z[2], scale)


def apply_perturbation(s: Sample, theta: AffineParams) -> Sample:
    """Warp the image; landmark content from p lands at T(p) under the pull-based warp."""
    lu, lv = geometry.forward_coords(theta, s.landmarks[:, 0], s.landmarks[:, 1])
    return replace(s, image=warp.warp_image(s.image, theta), landmarks=np.stack([lu, lv], axis=1))


def perturb_alignment(s: Sample, spec: PerturbSpec, gen: np.random.Generator) -> Sample:
    return apply_perturbation(s, draw_perturbation(spec, gen))


def perturb_stream(seed: int, sample_id: int) -> np.random.Generator:
    return rng_utils.stream(seed, "perturb", sample_id)


# --- I/O ---

def _write_tensor(path: Path, image: np.ndarray) -> None:
    c, h, w = image.shape
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(_DIMS.pack(c, h, w))
        f.write(np.ascontiguousarray(image, dtype="<f8").tobytes())


def _read_tensor(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFileError("tensor file missing", path)
    blob = path.read_bytes()
    header = len(TENSOR_MAGIC) + _DIMS.size
    if len(blob) < header:
        raise FileIntegrityError("tensor file truncated in header", path)
    if blob[:len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise FileIntegrityError("bad tensor magic", path)
    c, h, w = _DIMS.unpack_from(blob, len(TENSOR_MAGIC))
    if len(blob) != header + 8 * c * h * w:
        raise FileIntegrityError(f"tensor file has {len(blob) - header} data bytes, expected {8 * c * h * w}", path)
    return np.frombuffer(blob, dtype="<f8", offset=header).reshape(c, h, w).astype(np.float64)


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    meta = {
        "num_classes": dataset.num_classes,
        "channels": dataset.channels,
        "height": dataset.shape.height,
        "width": dataset.shape.width,
        "count": len(dataset),
        **dataset.meta,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    with open(directory / "manifest.jsonl", "w", encoding="utf-8") as f:
        for s in dataset.samples:
            rel = f"images/{s.sample_id:07d}.ten"
            _write_tensor(directory / rel, s.image)
            row = {
                "id": s.sample_id,
                "label": s.label,
                "path": rel,
                "shape": list(s.image.shape),
                "landmarks": [float(x) for x in s.landmarks.reshape(-1)],
            }
            f.write(json.dumps(row) + "\n")
    logger.info("wrote %d samples to %s", len(dataset), directory)
    return directory


def load_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    manifest_path = directory / "manifest.jsonl"
    for p in (meta_path, manifest_path):
        if not p.exists():
            raise MissingFileError("dataset file missing", p)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        num_classes, channels = int(meta["num_classes"]), int(meta["channels"])
        shape = GridShape(int(meta["height"]), int(meta["width"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"malformed dataset meta ({e})", meta_path) from e

    samples = []
    with open(manifest_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                sid, label, rel = int(row["id"]), int(row["label"]), str(row["path"])
                expected = tuple(int(x) for x in row["shape"])
                landmarks = np.array(row["landmarks"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"malformed manifest row {lineno} ({e})", manifest_path) from e
            if landmarks.size != 2 * N_LANDMARKS:
                raise ManifestError(f"manifest row {lineno} needs {2 * N_LANDMARKS} landmark values", manifest_path)
            image = _read_tensor(directory / rel)
            if image.shape != expected or image.shape != (channels, shape.height, shape.width):
                raise ShapeMismatchError(f"tensor dims {image.shape} disagree with manifest {expected}", directory / rel)
            samples.append(Sample(sid, image, label, landmarks.reshape(N_LANDMARKS, 2)))
    if "count" in meta and int(meta["count"]) != len(samples):
        raise ManifestError(f"meta lists {meta['count']} samples, manifest has {len(samples)}", manifest_path)
    extra = {k: v for k, v in meta.items() if k not in {"num_classes", "channels", "height", "width", "count"}}
    return Dataset(samples, num_classes, channels, shape, extra)


def save_preview(images: np.ndarray, path: Union[str, Path], columns: int = 8, pad: int = 2) -> Path:
    """Contact sheet PNG of (n, c, h, w) images, each min-max scaled to 0..255 grayscale."""
    images = np.asarray(images, dtype=np.float64)
    n, _, h, w = images.shape
    columns = max(1, min(columns, n))
    rows = int(math.ceil(n / columns))
    sheet = Image.new("L", (columns * (w + pad) + pad, rows * (h + pad) + pad), 0)
    for k, img in enumerate(images):
        gray = img.mean(axis=0)
        lo, hi = gray.min(), gray.max()
        scaled = np.zeros_like(gray) if hi == lo else (gray - lo) / (hi - lo)
        tile = Image.fromarray(np.round(scaled * 255).astype(np.uint8))
        r, c = divmod(k, columns)
        sheet.paste(tile, (pad + c * (w + pad), pad + r * (h + pad)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sheet.save(path, format="PNG")
    return path
