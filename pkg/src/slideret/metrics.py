"""Retrieval precision and cross-stage consistency metrics.

Precision side: average precision, P@k, and hit-rate R@k, at tumor-type
(class label) and anatomic-site granularity, averaged over a held-out query
split.  Consistency side: per-query Spearman rho and Kendall tau between the
rankings an old task's queries receive at different training stages, averaged
per task pair and aggregated over the upper triangle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import TaskStream


def average_precision(relevance_flags: Sequence[int]) -> float:
    """AP over the full ranking; all-irrelevant rankings score 0."""
    flags = np.asarray(relevance_flags, dtype=np.float64)
    if flags.size == 0:
        raise ValueError("relevance_flags must be nonempty")
    total_relevant = flags.sum()
    if total_relevant == 0:
        return 0.0
    cum = np.cumsum(flags)
    ranks = np.arange(1, flags.size + 1)
    return float(np.sum(flags * cum / ranks) / total_relevant)


def precision_at_k(relevance_flags: Sequence[int], k: int) -> float:
    """Fraction of relevant items in the top k (or available prefix)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    flags = np.asarray(relevance_flags, dtype=np.float64)
    prefix = flags[:k]
    return float(prefix.sum() / k)


def recall_hit_at_k(relevance_flags: Sequence[int], k: int) -> float:
    """1.0 if any of the top k items is relevant, else 0.0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    flags = np.asarray(relevance_flags, dtype=np.float64)
    return 1.0 if flags[:k].sum() > 0 else 0.0


# ---------------------------------------------------------------------------
# Rank correlation


def _rank_arrays(rank_a: Sequence, rank_b: Sequence) -> tuple[np.ndarray, np.ndarray]:
    if len(rank_a) != len(rank_b) or set(rank_a) != set(rank_b):
        raise ValueError("rankings must be total orders over the same item set")
    n = len(rank_a)
    if n < 2:
        raise ValueError("rankings must contain at least 2 items")
    pos_b = {item: i for i, item in enumerate(rank_b)}
    r1 = np.arange(1, n + 1)
    r2 = np.array([pos_b[item] + 1 for item in rank_a])
    return r1, r2


def spearman_rho(rank_a: Sequence, rank_b: Sequence) -> float:
    """rho = 1 - 6*sum(d_k^2) / (n*(n^2-1)) over the rank differences."""
    r1, r2 = _rank_arrays(rank_a, rank_b)
    n = r1.size
    d = r1 - r2
    return float(1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1)))


def kendall_tau(rank_a: Sequence, rank_b: Sequence) -> float:
    """tau = (concordant - discordant) / (n*(n-1)/2)."""
    r1, r2 = _rank_arrays(rank_a, rank_b)
    n = r1.size
    s1 = np.sign(r1[:, None] - r1[None, :])
    s2 = np.sign(r2[:, None] - r2[None, :])
    upper = np.triu_indices(n, k=1)
    return float(np.sum(s1[upper] * s2[upper]) / (n * (n - 1) / 2))


# ---------------------------------------------------------------------------
# Query split


def holdout_split(stream: TaskStream, fraction: float = 0.2, seed: int = 0) -> dict[int, list[str]]:
    """Per-class held-out query slides, deterministic given the seed.

    Returns test slide_ids keyed by task_id; at least one slide per class is
    held out.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng([seed, 0x5B17])
    split: dict[int, list[str]] = {}
    for task in stream.tasks:
        by_class: dict[int, list[str]] = {}
        for cube in task.cubes:
            by_class.setdefault(cube.class_label, []).append(cube.slide_id)
        test_ids = []
        for label in sorted(by_class):
            ids = sorted(by_class[label])
            n_test = max(1, int(round(fraction * len(ids))))
            picked = rng.choice(len(ids), size=min(n_test, len(ids)), replace=False)
            test_ids.extend(ids[i] for i in sorted(picked))
        split[task.task_id] = test_ids
    return split


# ---------------------------------------------------------------------------
# Consistency protocol


@dataclass(frozen=True)
class ConsistencyTable:
    """Upper-triangular per-task-pair correlations, 1-based (i, j) keys."""

    rho: dict[tuple[int, int], float]
    tau: dict[tuple[int, int], float]
    num_tasks: int

    def complete(self) -> bool:
        expected = {(i, j) for i in range(1, self.num_tasks) for j in range(i + 1, self.num_tasks + 1)}
        return set(self.rho) == expected and set(self.tau) == expected


def _representation_table(params, cubes) -> dict[str, np.ndarray]:
    from .encoder import forward

    return {cube.slide_id: forward(params, cube)[0] for cube in cubes}


def _ranking_ids(query_id: str, query_rep: np.ndarray, db_ids: list[str],
                 reps: dict[str, np.ndarray]) -> list[str]:
    candidates = [sid for sid in db_ids if sid != query_id]
    dists = {sid: float(np.linalg.norm(reps[sid] - query_rep)) for sid in candidates}
    return sorted(candidates, key=lambda sid: (dists[sid], sid))


def consistency_evaluation(checkpoints: Sequence, stream: TaskStream,
                           test_split: dict[int, list[str]]) -> ConsistencyTable:
    """Rank-correlation of old-task retrieval queues across stages.

    For tasks i < j (1-based): the database is every slide of tasks <= i,
    encoded once by the stage-i encoder and once by the stage-j encoder;
    each held-out query of task i is ranked under both and the per-query
    rho/tau are averaged.
    """
    if len(checkpoints) < 2:
        raise RuntimeError("consistency evaluation needs at least 2 stage checkpoints")
    num_stages = len(checkpoints)
    # representations of every slide under every stage encoder
    all_cubes = stream.all_cubes()
    rep_tables = [_representation_table(ck.params, all_cubes) for ck in checkpoints]

    rho: dict[tuple[int, int], float] = {}
    tau: dict[tuple[int, int], float] = {}
    for i in range(num_stages - 1):
        db_ids = sorted(c.slide_id for c in all_cubes if c.task_id <= i)
        query_ids = test_split.get(i, [])
        for j in range(i + 1, num_stages):
            rhos, taus = [], []
            for qid in query_ids:
                rank_i = _ranking_ids(qid, rep_tables[i][qid], db_ids, rep_tables[i])
                rank_j = _ranking_ids(qid, rep_tables[j][qid], db_ids, rep_tables[j])
                rhos.append(spearman_rho(rank_i, rank_j))
                taus.append(kendall_tau(rank_i, rank_j))
            rho[(i + 1, j + 1)] = float(np.mean(rhos))
            tau[(i + 1, j + 1)] = float(np.mean(taus))
    return ConsistencyTable(rho=rho, tau=tau, num_tasks=num_stages)


def _aggregate(values: dict[tuple[int, int], float], num_tasks: int) -> float:
    n = num_tasks
    outer = 0.0
    for i in range(1, n):
        inner = sum(values[(i, j)] for j in range(i + 1, n + 1)) / (n - i)
        outer += inner
    return outer / (n - 1)


def aggregate_src(table: ConsistencyTable) -> float:
    if not table.complete():
        raise RuntimeError("consistency table is incomplete")
    return _aggregate(table.rho, table.num_tasks)


def aggregate_krc(table: ConsistencyTable) -> float:
    if not table.complete():
        raise RuntimeError("consistency table is incomplete")
    return _aggregate(table.tau, table.num_tasks)


# ---------------------------------------------------------------------------
# Stage report


@dataclass
class StageReport:
    stage: int
    map: float
    r_at_3: float
    p_at_5: float
    site_map: float
    site_r_at_3: float
    site_p_at_5: float
    src: float | None = None
    krc: float | None = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "mAP": self.map,
            "r_at_3": self.r_at_3,
            "p_at_5": self.p_at_5,
            "site_map": self.site_map,
            "site_r_at_3": self.site_r_at_3,
            "site_p_at_5": self.site_p_at_5,
            "src": self.src,
            "krc": self.krc,
        }


def stage_report(checkpoint, stream: TaskStream, test_split: dict[int, list[str]],
                 k_recall: int = 3, k_precision: int = 5) -> StageReport:
    """Leave-one-out retrieval metrics over all tasks seen at this stage."""
    from .retrieval import build_index, entry_lookup, full_ranking

    seen_tasks = set(checkpoint.tasks_seen)
    database = [c for c in stream.all_cubes() if c.task_id in seen_tasks]
    index = build_index(checkpoint.params, database, encoder_stage=checkpoint.stage)
    lookup = entry_lookup(index)
    cube_by_id = {c.slide_id: c for c in database}

    query_ids = [qid for t in sorted(seen_tasks) for qid in test_split.get(t, [])]
    ap, r3, p5 = [], [], []
    site_ap, site_r3, site_p5 = [], [], []
    for qid in query_ids:
        qcube = cube_by_id[qid]
        queue = full_ranking(index, qcube)
        ranked = queue.slide_ids()
        class_flags = [1 if lookup[s].class_label == qcube.class_label else 0 for s in ranked]
        site_flags = [1 if lookup[s].site_label == qcube.site_label else 0 for s in ranked]
        if sum(class_flags) == 0:
            warnings.warn(f"query {qid!r}: no relevant slide in database, AP scored 0")
        ap.append(average_precision(class_flags))
        r3.append(recall_hit_at_k(class_flags, k_recall))
        p5.append(precision_at_k(class_flags, k_precision))
        site_ap.append(average_precision(site_flags))
        site_r3.append(recall_hit_at_k(site_flags, k_recall))
        site_p5.append(precision_at_k(site_flags, k_precision))

    return StageReport(
        stage=checkpoint.stage,
        map=float(np.mean(ap)),
        r_at_3=float(np.mean(r3)),
        p_at_5=float(np.mean(p5)),
        site_map=float(np.mean(site_ap)),
        site_r_at_3=float(np.mean(site_r3)),
        site_p_at_5=float(np.mean(site_p5)),
    )
