"""Loss components and their exact gradients.

Three pieces feed the combined objective: a margin-contrastive pairwise loss
over slide representations, cross-entropy over logits, and a distance
consistency loss that penalizes drift of pairwise Euclidean distances among
replayed exemplars relative to a frozen target matrix.  The total is

    L = 1.0 * L_pair + 1.0 * L_ce + alpha * L_dc

with the consistency term absent on the first task.  All math runs in
float64; coincident points use the zero subgradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LossValue:
    scalar: float
    grad_representations: np.ndarray | None = None  # (n, d_F)
    grad_logits: np.ndarray | None = None           # (n, C)
    components: dict[str, float] = field(default_factory=dict)


def euclidean_distance_matrix(representations: np.ndarray) -> np.ndarray:
    """All-pairs Euclidean distances; symmetric with a zero diagonal."""
    reps = np.asarray(representations, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[0] < 1:
        raise ValueError(f"expected a non-empty (n, d) matrix, got shape {reps.shape}")
    if not np.all(np.isfinite(reps)):
        raise ValueError("representations contain non-finite values")
    diff = reps[:, None, :] - reps[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    np.fill_diagonal(dist, 0.0)
    return dist


def distance_consistency_loss(d_current: np.ndarray, d_target: np.ndarray,
                              representations: np.ndarray) -> LossValue:
    """Mean squared off-diagonal distance drift, with gradients w.r.t. reps.

    scalar = ||d_current - d_target||_F^2 / (k*(k-1)); the raw squared
    Frobenius norm is reported in components["dc_raw"] for logging.
    """
    d_current = np.asarray(d_current, dtype=np.float64)
    d_target = np.asarray(d_target, dtype=np.float64)
    reps = np.asarray(representations, dtype=np.float64)
    k = reps.shape[0]
    if d_current.shape != (k, k) or d_target.shape != (k, k):
        raise ValueError(
            f"distance matrices must be ({k}, {k}), got {d_current.shape} and {d_target.shape}"
        )
    if k < 2:
        raise ValueError("need at least 2 representations")

    diff = d_current - d_target
    np.fill_diagonal(diff, 0.0)
    raw = float(np.sum(diff * diff))
    norm = k * (k - 1)
    scalar = raw / norm

    # d(dist_ij)/d(r_i) = (r_i - r_j) / dist_ij, zero subgradient at dist 0
    g = 2.0 * diff / norm
    safe = np.where(d_current > 0.0, d_current, 1.0)
    coeff = np.where(d_current > 0.0, (g + g.T) / safe, 0.0)
    rep_diff = reps[:, None, :] - reps[None, :, :]
    grads = np.einsum("ij,ijd->id", coeff, rep_diff)
    return LossValue(scalar=scalar, grad_representations=grads,
                     components={"dc": scalar, "dc_raw": raw})


def pairwise_loss(representations: np.ndarray, labels: np.ndarray,
                  margin: float = 1.0) -> LossValue:
    """Margin contrastive loss over all unordered pairs.

    Same-label pairs contribute d^2, different-label pairs max(0, m - d)^2;
    the scalar is the mean over pairs.
    """
    reps = np.asarray(representations, dtype=np.float64)
    labels = np.asarray(labels)
    n = reps.shape[0]
    if n < 2:
        return LossValue(scalar=0.0, grad_representations=np.zeros_like(reps))

    dist = euclidean_distance_matrix(reps)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff_label = ~(labels[:, None] == labels[None, :])

    num_pairs = n * (n - 1) / 2
    hinge = np.maximum(0.0, margin - dist)
    # Sum over ordered pairs double-counts each unordered pair, hence /2.
    pos_sum = np.sum(np.where(same, dist ** 2, 0.0)) / 2.0
    neg_sum = np.sum(np.where(diff_label, hinge ** 2, 0.0)) / 2.0
    scalar = (pos_sum + neg_sum) / num_pairs

    # dL/d(dist_ij) for the ordered-pair matrix, already halved per direction
    dl_ddist = np.zeros_like(dist)
    dl_ddist[same] = 2.0 * dist[same] / 2.0
    active = diff_label & (hinge > 0.0)
    dl_ddist[active] = -2.0 * hinge[active] / 2.0
    dl_ddist /= num_pairs

    safe = np.where(dist > 0.0, dist, 1.0)
    coeff = np.where(dist > 0.0, (dl_ddist + dl_ddist.T) / safe, 0.0)
    rep_diff = reps[:, None, :] - reps[None, :, :]
    grads = np.einsum("ij,ijd->id", coeff, rep_diff)
    return LossValue(scalar=scalar, grad_representations=grads, components={"pair": scalar})


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> LossValue:
    """Mean softmax cross-entropy; gradients w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    log_probs = shifted - log_z[:, None]
    scalar = float(-np.mean(log_probs[np.arange(n), labels]))
    softmax = np.exp(log_probs)
    one_hot = np.zeros_like(softmax)
    one_hot[np.arange(n), labels] = 1.0
    grads = (softmax - one_hot) / n
    return LossValue(scalar=scalar, grad_logits=grads, components={"ce": scalar})


def combined_objective(representations: np.ndarray, labels: np.ndarray,
                       logits: np.ndarray, alpha: float = 0.01, margin: float = 1.0,
                       replay_slice: slice | None = None,
                       target_submatrix: np.ndarray | None = None,
                       pairwise_scope: str = "all") -> LossValue:
    """Weighted sum of the three losses on the concatenated batch.

    representations/labels/logits cover current-task slides followed by the
    replay exemplars (replay_slice); the consistency term compares the replay
    block's distances against target_submatrix and is skipped when absent.
    pairwise_scope "current" restricts the contrastive loss to the
    non-replay block.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    reps = np.asarray(representations, dtype=np.float64)
    n = reps.shape[0]

    if pairwise_scope == "all":
        pair = pairwise_loss(reps, labels, margin=margin)
        pair_grads = pair.grad_representations
    elif pairwise_scope == "current":
        stop = replay_slice.start if replay_slice is not None else n
        pair = pairwise_loss(reps[:stop], labels[:stop], margin=margin)
        pair_grads = np.zeros_like(reps)
        pair_grads[:stop] = pair.grad_representations
    else:
        raise ValueError(f"unknown pairwise_scope {pairwise_scope!r}")

    ce = cross_entropy(logits, labels)

    grad_reps = pair_grads.copy()
    components = {"pair": pair.scalar, "ce": ce.scalar, "dc": 0.0, "dc_raw": 0.0}
    scalar = pair.scalar + ce.scalar
    if target_submatrix is not None and replay_slice is not None:
        replay_reps = reps[replay_slice]
        if replay_reps.shape[0] >= 2:
            d_current = euclidean_distance_matrix(replay_reps)
            dc = distance_consistency_loss(d_current, target_submatrix, replay_reps)
            scalar += alpha * dc.scalar
            grad_reps[replay_slice] += alpha * dc.grad_representations
            components["dc"] = dc.scalar
            components["dc_raw"] = dc.components["dc_raw"]

    return LossValue(scalar=scalar, grad_representations=grad_reps,
                     grad_logits=ce.grad_logits, components=components)
