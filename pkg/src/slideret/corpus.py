"""Task-stream data model, on-disk feature format, and synthetic stream generation.

A slide is represented purely by its feature cube: an (n_p, d_f) float32
matrix of patch embeddings plus slide/task/class/site labels.  Streams are
ordered sequences of class-disjoint task datasets.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatchError,
    DuplicateSlideIdError,
    MissingFileError,
    NonFiniteFeatureError,
)

_HEADER = struct.Struct("<II")  # n_p, d_f as unsigned 32-bit little-endian


@dataclass(frozen=True)
class FeatureCube:
    """One slide's patch-feature matrix plus its labels."""

    slide_id: str
    task_id: int
    class_label: int
    site_label: int
    features: np.ndarray  # (n_p, d_f) float32

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise NonFiniteFeatureError(f"slide {self.slide_id!r} contains non-finite features")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def d_f(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class TaskDataset:
    """All slides belonging to one task of the stream."""

    task_id: int
    cubes: tuple[FeatureCube, ...]

    def __post_init__(self):
        cubes = tuple(self.cubes)
        for cube in cubes:
            if cube.task_id != self.task_id:
                raise ValueError(
                    f"cube {cube.slide_id!r} has task_id {cube.task_id}, expected {self.task_id}"
                )
        object.__setattr__(self, "cubes", cubes)

    @property
    def class_set(self) -> frozenset[int]:
        return frozenset(c.class_label for c in self.cubes)

    @property
    def site_set(self) -> frozenset[int]:
        return frozenset(c.site_label for c in self.cubes)


@dataclass(frozen=True)
class TaskStream:
    """An ordered, class-disjoint sequence of task datasets."""

    tasks: tuple[TaskDataset, ...]

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValueError("stream must contain at least one task")
        for position, task in enumerate(tasks):
            if task.task_id != position:
                raise ValueError(f"tasks must be ordered 0..T-1 without gaps, got {task.task_id} at {position}")
        seen_ids: set[str] = set()
        for task in tasks:
            for cube in task.cubes:
                if cube.slide_id in seen_ids:
                    raise DuplicateSlideIdError(f"duplicate slide_id {cube.slide_id!r}")
                seen_ids.add(cube.slide_id)
        dims = {c.d_f for t in tasks for c in t.cubes}
        if len(dims) > 1:
            raise DimensionMismatchError(f"inconsistent feature dimensions in stream: {sorted(dims)}")
        seen_classes: set[int] = set()
        for task in tasks:
            overlap = seen_classes & task.class_set
            if overlap:
                raise ValueError(f"task {task.task_id} reuses class labels {sorted(overlap)}")
            seen_classes |= task.class_set
        object.__setattr__(self, "tasks", tasks)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def d_f(self) -> int:
        return self.tasks[0].cubes[0].d_f

    def all_cubes(self) -> list[FeatureCube]:
        return [c for t in self.tasks for c in t.cubes]


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the Gaussian-cluster synthetic stream generator."""

    num_tasks: int = 4
    classes_per_task: int = 2
    sites_per_task: int = 1
    slides_per_class: int = 40
    patches_per_slide: int = 32
    d_f: int = 32
    class_separation: float = 10.0
    patch_noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_tasks", "classes_per_task", "sites_per_task", "slides_per_class", "patches_per_slide", "d_f"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.class_separation <= 0:
            raise ValueError("class_separation must be > 0")
        if self.patch_noise_sigma <= 0:
            raise ValueError("patch_noise_sigma must be > 0")


# ---------------------------------------------------------------------------
# Binary feature files


def write_feature_array(path: Path, features: np.ndarray) -> None:
    """Write an (n_p, d_f) float32 matrix with an 8-byte (n_p, d_f) header."""
    feats = np.ascontiguousarray(features, dtype="<f4")
    n_p, d_f = feats.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(n_p, d_f))
        fh.write(feats.tobytes())


def read_feature_array(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"feature binary not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DimensionMismatchError(f"{path}: truncated header")
    n_p, d_f = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 4 * n_p * d_f
    if len(raw) != expected:
        raise DimensionMismatchError(
            f"{path}: header declares {n_p}x{d_f} ({expected} bytes), file has {len(raw)} bytes"
        )
    feats = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n_p, d_f)
    return feats.astype(np.float32)


# ---------------------------------------------------------------------------
# Manifest I/O
#
# Manifest schema (JSON):
# {
#   "d_f": int,
#   "tasks": [
#     {"task_id": 0,
#      "slides": [{"slide_id": str, "class_label": int, "site_label": int,
#                  "path": relative path to feature binary}, ...]},
#     ...
#   ]
# }


def load_manifest(path: Path) -> TaskStream:
    """Load a stream from a manifest file; features are read bit-exactly."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    d_f = int(doc["d_f"])
    root = path.parent
    tasks = []
    for task_doc in doc["tasks"]:
        cubes = []
        for slide in task_doc["slides"]:
            feats = read_feature_array(root / slide["path"])
            if feats.shape[1] != d_f:
                raise DimensionMismatchError(
                    f"slide {slide['slide_id']!r}: binary d_f={feats.shape[1]}, manifest d_f={d_f}"
                )
            if not np.all(np.isfinite(feats)):
                raise NonFiniteFeatureError(f"slide {slide['slide_id']!r} contains non-finite features")
            cubes.append(
                FeatureCube(
                    slide_id=slide["slide_id"],
                    task_id=int(task_doc["task_id"]),
                    class_label=int(slide["class_label"]),
                    site_label=int(slide["site_label"]),
                    features=feats,
                )
            )
        tasks.append(TaskDataset(task_id=int(task_doc["task_id"]), cubes=tuple(cubes)))
    return TaskStream(tasks=tuple(tasks))


def write_manifest(stream: TaskStream, out_dir: Path) -> Path:
    """Materialize a stream as manifest.json plus one binary per slide."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    doc = {"d_f": stream.d_f, "tasks": []}
    for task in stream.tasks:
        slides = []
        for cube in task.cubes:
            rel = f"features/{cube.slide_id}.bin"
            write_feature_array(out_dir / rel, cube.features)
            slides.append(
                {
                    "slide_id": cube.slide_id,
                    "class_label": cube.class_label,
                    "site_label": cube.site_label,
                    "path": rel,
                }
            )
        doc["tasks"].append({"task_id": task.task_id, "slides": slides})
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# Synthetic streams


def generate_synthetic_stream(spec: SyntheticSpec) -> TaskStream:
    """Generate a deterministic Gaussian-cluster stream.

    Each global class gets a prototype mean drawn from N(0, s^2 I) with
    s = class_separation / sqrt(d_f), so the expected distance between two
    prototypes is about sqrt(2) * class_separation.  Patch rows are the
    prototype plus isotropic noise.  Each class maps to exactly one site, so
    class relevance implies site relevance.
    """
    rng = np.random.default_rng(spec.seed)
    scale = spec.class_separation / math.sqrt(spec.d_f)
    tasks = []
    for task_id in range(spec.num_tasks):
        cubes = []
        for local_class in range(spec.classes_per_task):
            global_class = task_id * spec.classes_per_task + local_class
            site = task_id * spec.sites_per_task + (local_class % spec.sites_per_task)
            prototype = rng.normal(0.0, scale, size=spec.d_f)
            for slide_idx in range(spec.slides_per_class):
                noise = rng.normal(0.0, spec.patch_noise_sigma, size=(spec.patches_per_slide, spec.d_f))
                cubes.append(
                    FeatureCube(
                        slide_id=f"t{task_id}_c{global_class}_s{slide_idx}",
                        task_id=task_id,
                        class_label=global_class,
                        site_label=site,
                        features=(prototype + noise).astype(np.float32),
                    )
                )
        tasks.append(TaskDataset(task_id=task_id, cubes=tuple(cubes)))
    return TaskStream(tasks=tuple(tasks))


def sample_patches(cube: FeatureCube, n_sample: int, rng: np.random.Generator) -> FeatureCube:
    """Subsample patch rows uniformly without replacement.

    Returns the cube unchanged when it already has at most n_sample rows.
    """
    if n_sample < 1:
        raise ValueError("n_sample must be >= 1")
    if cube.n_patches <= n_sample:
        return cube
    idx = rng.choice(cube.n_patches, size=n_sample, replace=False)
    return FeatureCube(
        slide_id=cube.slide_id,
        task_id=cube.task_id,
        class_label=cube.class_label,
        site_label=cube.site_label,
        features=cube.features[np.sort(idx)],
    )
