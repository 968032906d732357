"""Continual training loop over a task stream.

Four experiment modes share one loop:

  finetune     -- sequential tasks, no memory bank
  joint        -- one training phase over the union of all tasks (upper bound)
  lwsr_no_dcr  -- replay exemplars feed the pairwise/cross-entropy losses only
  lwsr         -- replay plus the distance consistency term

Per mini-batch: current slides (patch-subsampled) and, when enabled, a replay
draw from the reservoir are encoded, the combined loss is evaluated on the
concatenation, and one Adam step is taken.  At each task boundary the encoder
is snapshotted and the bank's target distance matrix rebuilt with it.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import FeatureCube, TaskDataset, TaskStream, sample_patches
from .encoder import (
    EncoderParams,
    accumulate_grads,
    backward,
    expand_head,
    forward,
    init_params,
    snapshot,
    zero_grads,
)
from .errors import InvalidStreamError
from .losses import combined_objective
from .memory_bank import MemoryBank, finalize_task, reservoir_update, sample_replay

MODES = ("finetune", "joint", "lwsr", "lwsr_no_dcr")


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    """Named sub-stream of the experiment seed."""
    return np.random.default_rng([seed, zlib.crc32(purpose.encode())])


@dataclass
class TrainerConfig:
    mode: str = "lwsr"
    epochs_per_task: int = 70
    batch_size: int = 10
    replay_batch_size: int = 30
    learning_rate: float = 1e-5
    alpha: float = 0.01
    margin: float = 1.0
    patch_sample: int = 2048
    buffer_capacity: int = 10
    scheduler_step: int = 30
    scheduler_gamma: float = 0.5
    seed: int = 0
    hidden: int = 64
    attn_dim: int = 32
    d_repr: int = 32
    pairwise_scope: str = "all"
    resample_patches_each_epoch: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("epochs_per_task", "batch_size", "replay_batch_size", "patch_sample",
                     "buffer_capacity", "scheduler_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0 or self.scheduler_gamma <= 0:
            raise ValueError("learning_rate and scheduler_gamma must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    @property
    def uses_replay(self) -> bool:
        return self.mode in ("lwsr", "lwsr_no_dcr")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.mode == "lwsr" else 0.0


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamMoments":
        return cls(
            m={k: np.zeros(a.shape, dtype=np.float64) for k, a in params.arrays().items()},
            v={k: np.zeros(a.shape, dtype=np.float64) for k, a in params.arrays().items()},
        )

    def expand_head(self, params: EncoderParams) -> None:
        """Re-shape classifier moments after a head expansion (new slots zero)."""
        for store in (self.m, self.v):
            for name in ("w_cls", "b_cls"):
                old = store[name]
                new = np.zeros(params.arrays()[name].shape, dtype=np.float64)
                new[..., : old.shape[-1]] = old
                store[name] = new


def adam_step(params: EncoderParams, grads: dict[str, np.ndarray], moments: AdamMoments,
              lr: float, step_count: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> EncoderParams:
    """Standard bias-corrected Adam update; mutates moments, returns new params."""
    updated = {}
    for name, arr in params.arrays().items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {arr.shape}")
        moments.m[name] = beta1 * moments.m[name] + (1 - beta1) * g
        moments.v[name] = beta2 * moments.v[name] + (1 - beta2) * g * g
        m_hat = moments.m[name] / (1 - beta1 ** step_count)
        v_hat = moments.v[name] / (1 - beta2 ** step_count)
        updated[name] = (arr.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32)
    return EncoderParams(**updated)


@dataclass
class TrainState:
    params: EncoderParams
    moments: AdamMoments
    bank: MemoryBank
    prev_encoder: EncoderParams | None = None
    stage: int = 0
    step_count: int = 0
    classes_seen: set[int] = field(default_factory=set)
    epoch_log: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class StageCheckpoint:
    stage: int
    params: EncoderParams  # frozen snapshot
    tasks_seen: tuple[int, ...]


def _encode_batch(params: EncoderParams, cubes: list[FeatureCube]):
    reps, logits, caches = [], [], []
    for cube in cubes:
        r, l, c = forward(params, cube)
        reps.append(r)
        logits.append(l)
        caches.append(c)
    return np.stack(reps), np.stack(logits), caches


def _train_phase(state: TrainState, cubes: list[FeatureCube], config: TrainerConfig,
                 shuffle_rng, patch_rng, replay_rng, reservoir_rng, stream_bank: bool) -> TrainState:
    """Epoch/mini-batch loop shared by per-task and joint training."""
    n = len(cubes)
    fixed = None
    if not config.resample_patches_each_epoch:
        fixed = [sample_patches(c, config.patch_sample, patch_rng) for c in cubes]

    for epoch in range(config.epochs_per_task):
        lr = config.learning_rate * config.scheduler_gamma ** (epoch // config.scheduler_step)
        order = shuffle_rng.permutation(n)
        epoch_cubes = fixed if fixed is not None else [
            sample_patches(c, config.patch_sample, patch_rng) for c in cubes
        ]
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            batch = [epoch_cubes[i] for i in order[start:start + config.batch_size]]
            labels = [c.class_label for c in batch]

            replay = None
            if config.uses_replay and state.bank.target_matrix is not None and len(state.bank) > 0:
                replay = sample_replay(state.bank, config.replay_batch_size, replay_rng)
                batch = batch + list(replay.cubes)
                labels = labels + list(replay.labels)

            reps, logits, caches = _encode_batch(state.params, batch)
            replay_slice = None
            target = None
            if replay is not None:
                replay_slice = slice(len(batch) - len(replay.cubes), len(batch))
                if config.mode == "lwsr":
                    target = replay.target_submatrix
            loss = combined_objective(
                reps, np.asarray(labels), logits,
                alpha=config.effective_alpha, margin=config.margin,
                replay_slice=replay_slice, target_submatrix=target,
                pairwise_scope=config.pairwise_scope,
            )

            total = zero_grads(state.params)
            for i, cache in enumerate(caches):
                accumulate_grads(total, backward(state.params, cache,
                                                 loss.grad_representations[i],
                                                 loss.grad_logits[i]))
            state.step_count += 1
            state.params = adam_step(state.params, total, state.moments, lr, state.step_count)
            epoch_losses.append(loss.components | {"total": loss.scalar})

        state.epoch_log.append({
            "stage": state.stage,
            "epoch": epoch,
            "lr": lr,
            **{k: float(np.mean([e[k] for e in epoch_losses])) for k in epoch_losses[0]},
        })

        if stream_bank and epoch == config.epochs_per_task - 1:
            for cube in epoch_cubes:
                reservoir_update(state.bank, (cube, cube.class_label), reservoir_rng)
    return state


def train_task(state: TrainState, task: TaskDataset, config: TrainerConfig) -> TrainState:
    """Train one task in sequence; expands the head, streams the reservoir,
    and finalizes the bank's target matrix at the boundary."""
    overlap = state.classes_seen & task.class_set
    if overlap:
        raise InvalidStreamError(f"task {task.task_id} reuses classes {sorted(overlap)}")

    new_total = len(state.classes_seen | task.class_set)
    if new_total > state.params.num_classes:
        state.params = expand_head(state.params, new_total,
                                   rng_for(config.seed, f"head_{task.task_id}"))
        state.moments.expand_head(state.params)

    state = _train_phase(
        state, list(task.cubes), config,
        rng_for(config.seed, f"shuffle_{task.task_id}"),
        rng_for(config.seed, f"patches_{task.task_id}"),
        rng_for(config.seed, f"replay_{task.task_id}"),
        rng_for(config.seed, f"reservoir_{task.task_id}"),
        stream_bank=config.uses_replay,
    )

    state.classes_seen |= task.class_set
    state.prev_encoder = snapshot(state.params)
    if config.uses_replay and len(state.bank) > 0:
        finalize_task(state.bank, state.prev_encoder)
    state.stage += 1
    return state


def run_stream(stream: TaskStream, config: TrainerConfig) -> list[StageCheckpoint]:
    """Train over the stream and return one frozen checkpoint per stage."""
    if stream.num_tasks < 1:
        raise ValueError("stream must contain at least one task")

    all_classes = sorted({c for t in stream.tasks for c in t.class_set})
    init_rng = rng_for(config.seed, "init")

    if config.mode == "joint":
        params = init_params(stream.d_f, len(all_classes), init_rng,
                             hidden=config.hidden, attn_dim=config.attn_dim,
                             d_repr=config.d_repr)
        state = TrainState(params=params, moments=AdamMoments.zeros_like(params),
                           bank=MemoryBank(capacity=config.buffer_capacity))
        cubes = stream.all_cubes()
        # Same rng tags as task 0 so that joint and sequential training on a
        # single-task stream follow identical parameter trajectories.
        state = _train_phase(state, cubes, config,
                             rng_for(config.seed, "shuffle_0"),
                             rng_for(config.seed, "patches_0"),
                             rng_for(config.seed, "replay_0"),
                             rng_for(config.seed, "reservoir_0"), stream_bank=False)
        return [StageCheckpoint(stage=stream.num_tasks - 1, params=snapshot(state.params),
                                tasks_seen=tuple(t.task_id for t in stream.tasks))]

    first_classes = len(stream.tasks[0].class_set)
    params = init_params(stream.d_f, first_classes, init_rng,
                         hidden=config.hidden, attn_dim=config.attn_dim,
                         d_repr=config.d_repr)
    state = TrainState(params=params, moments=AdamMoments.zeros_like(params),
                       bank=MemoryBank(capacity=config.buffer_capacity))
    checkpoints = []
    for task in stream.tasks:
        state = train_task(state, task, config)
        checkpoints.append(StageCheckpoint(stage=task.task_id, params=state.prev_encoder,
                                           tasks_seen=tuple(range(task.task_id + 1))))
    return checkpoints
