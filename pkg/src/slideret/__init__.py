"""Continual whole-slide retrieval: reservoir replay with distance-consistency
rehearsal, brute-force retrieval, and precision/consistency evaluation."""

from .corpus import (
    FeatureCube,
    SyntheticSpec,
    TaskDataset,
    TaskStream,
    generate_synthetic_stream,
    load_manifest,
    sample_patches,
    write_manifest,
)
from .encoder import EncoderParams, backward, expand_head, forward, init_params, snapshot
from .losses import (
    combined_objective,
    cross_entropy,
    distance_consistency_loss,
    euclidean_distance_matrix,
    pairwise_loss,
)
from .memory_bank import MemoryBank, ReplayBatch, finalize_task, reservoir_update, sample_replay
from .metrics import (
    ConsistencyTable,
    StageReport,
    aggregate_krc,
    aggregate_src,
    average_precision,
    consistency_evaluation,
    holdout_split,
    kendall_tau,
    precision_at_k,
    recall_hit_at_k,
    spearman_rho,
    stage_report,
)
from .retrieval import RetrievalIndex, RetrievalQueue, build_index, full_ranking, query
from .trainer import StageCheckpoint, TrainerConfig, TrainState, adam_step, run_stream, train_task

__all__ = [name for name in dir() if not name.startswith("_")]
