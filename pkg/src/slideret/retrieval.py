"""Brute-force Euclidean retrieval over encoded slide representations.

The index stores one representation per database slide, produced by a frozen
encoder.  Queries are ranked by ascending distance with deterministic ties
broken by slide_id; a query present in the database never matches itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import FeatureCube
from .encoder import EncoderParams, forward


@dataclass(frozen=True)
class IndexEntry:
    slide_id: str
    task_id: int
    class_label: int
    site_label: int
    representation: np.ndarray


@dataclass(frozen=True)
class RetrievalIndex:
    entries: tuple[IndexEntry, ...]
    encoder: EncoderParams
    encoder_stage: int = -1


@dataclass(frozen=True)
class RetrievalQueue:
    query_slide_id: str
    ranked: tuple[tuple[str, float], ...]  # (slide_id, distance), ascending

    def slide_ids(self) -> list[str]:
        return [sid for sid, _ in self.ranked]


def build_index(encoder: EncoderParams, database: list[FeatureCube],
                encoder_stage: int = -1) -> RetrievalIndex:
    """Encode every database slide once with the frozen encoder."""
    if not database:
        raise ValueError("database must be nonempty")
    entries = []
    for cube in database:
        rep, _, _ = forward(encoder, cube)
        entries.append(
            IndexEntry(
                slide_id=cube.slide_id,
                task_id=cube.task_id,
                class_label=cube.class_label,
                site_label=cube.site_label,
                representation=rep,
            )
        )
    return RetrievalIndex(entries=tuple(entries), encoder=encoder, encoder_stage=encoder_stage)


def _rank(index: RetrievalIndex, query_cube: FeatureCube,
          entries: list[IndexEntry]) -> RetrievalQueue:
    query_rep, _, _ = forward(index.encoder, query_cube)
    candidates = [e for e in entries if e.slide_id != query_cube.slide_id]
    if not candidates:
        return RetrievalQueue(query_slide_id=query_cube.slide_id, ranked=())
    reps = np.stack([e.representation for e in candidates])
    dists = np.sqrt(np.sum((reps - query_rep) ** 2, axis=1))
    order = sorted(range(len(candidates)), key=lambda i: (dists[i], candidates[i].slide_id))
    ranked = tuple((candidates[i].slide_id, float(dists[i])) for i in order)
    return RetrievalQueue(query_slide_id=query_cube.slide_id, ranked=ranked)


def query(index: RetrievalIndex, query_cube: FeatureCube, k: int) -> RetrievalQueue:
    """Top-k nearest database slides; truncated when k exceeds the database."""
    if k < 1:
        raise ValueError("k must be >= 1")
    full = _rank(index, query_cube, list(index.entries))
    return RetrievalQueue(query_slide_id=full.query_slide_id, ranked=full.ranked[:k])


def full_ranking(index: RetrievalIndex, query_cube: FeatureCube,
                 restrict_to: set[int] | None = None) -> RetrievalQueue:
    """Complete ranking, optionally over entries from the given task ids."""
    entries = list(index.entries)
    if restrict_to is not None:
        entries = [e for e in entries if e.task_id in restrict_to]
        if not entries:
            raise ValueError("task restriction matches no database entries")
    return _rank(index, query_cube, entries)


def entry_lookup(index: RetrievalIndex) -> dict[str, IndexEntry]:
    return {e.slide_id: e for e in index.entries}
