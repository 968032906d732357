"""Exemplar reservoir and replay with frozen target distances.

The bank keeps a uniform-over-history sample of (cube, label) exemplars via
Algorithm R.  At each task boundary the previous encoder re-encodes every
exemplar and the full pairwise Euclidean distance matrix is frozen as the
consistency target; replay batches carry the aligned sub-matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import FeatureCube, read_feature_array, write_feature_array
from .encoder import EncoderParams, forward
from .losses import euclidean_distance_matrix


@dataclass
class ReplayBatch:
    cubes: list[FeatureCube]
    labels: np.ndarray
    bank_indices: np.ndarray
    target_submatrix: np.ndarray  # (k, k), aligned with bank_indices


@dataclass
class MemoryBank:
    capacity: int
    seen: int = 0
    exemplars: list[tuple[FeatureCube, int]] = field(default_factory=list)
    target_matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    def __len__(self) -> int:
        return len(self.exemplars)


def reservoir_update(bank: MemoryBank, item: tuple[FeatureCube, int],
                     rng: np.random.Generator) -> MemoryBank:
    """Algorithm R step: every streamed item ends up stored with probability
    capacity/seen."""
    bank.seen += 1
    if len(bank.exemplars) < bank.capacity:
        bank.exemplars.append(item)
    else:
        slot = rng.integers(0, bank.seen)
        if slot < bank.capacity:
            bank.exemplars[slot] = item
    return bank


def finalize_task(bank: MemoryBank, prev_encoder: EncoderParams) -> MemoryBank:
    """Rebuild the frozen target distance matrix with the task-end encoder."""
    if not bank.exemplars:
        raise RuntimeError("cannot finalize an empty memory bank")
    reps = np.stack([forward(prev_encoder, cube)[0] for cube, _ in bank.exemplars])
    bank.target_matrix = euclidean_distance_matrix(reps)
    return bank


def sample_replay(bank: MemoryBank, k: int, rng: np.random.Generator) -> ReplayBatch:
    """Draw k distinct exemplars (clamped to bank size) with their aligned
    target sub-matrix."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if bank.target_matrix is None:
        raise RuntimeError("finalize_task must run before sampling replay")
    k = min(k, len(bank.exemplars))
    idx = rng.choice(len(bank.exemplars), size=k, replace=False)
    cubes = [bank.exemplars[i][0] for i in idx]
    labels = np.array([bank.exemplars[i][1] for i in idx], dtype=np.int64)
    sub = bank.target_matrix[np.ix_(idx, idx)]
    return ReplayBatch(cubes=cubes, labels=labels, bank_indices=idx, target_submatrix=sub)


# ---------------------------------------------------------------------------
# Serialization (exemplar binaries + target matrix, feature-file convention)


def save_bank(bank: MemoryBank, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"capacity": bank.capacity, "seen": bank.seen, "exemplars": []}
    for i, (cube, label) in enumerate(bank.exemplars):
        rel = f"exemplar_{i:04d}.bin"
        write_feature_array(out_dir / rel, cube.features)
        meta["exemplars"].append(
            {
                "path": rel,
                "label": int(label),
                "slide_id": cube.slide_id,
                "task_id": cube.task_id,
                "class_label": cube.class_label,
                "site_label": cube.site_label,
            }
        )
    if bank.target_matrix is not None:
        write_feature_array(out_dir / "target_matrix.bin", bank.target_matrix.astype(np.float32))
        meta["target_matrix"] = "target_matrix.bin"
    (out_dir / "bank.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_bank(in_dir: Path) -> MemoryBank:
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "bank.json").read_text())
    bank = MemoryBank(capacity=meta["capacity"], seen=meta["seen"])
    for entry in meta["exemplars"]:
        cube = FeatureCube(
            slide_id=entry["slide_id"],
            task_id=entry["task_id"],
            class_label=entry["class_label"],
            site_label=entry["site_label"],
            features=read_feature_array(in_dir / entry["path"]),
        )
        bank.exemplars.append((cube, entry["label"]))
    if "target_matrix" in meta:
        bank.target_matrix = read_feature_array(in_dir / meta["target_matrix"]).astype(np.float64)
    return bank
