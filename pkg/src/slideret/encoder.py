"""Gated-attention bag encoder with a hand-written backward pass.

Maps an (n_p, d_f) feature cube to a slide representation and class logits:

    h_i    = tanh(x_i W_proj + b_proj)            (n_p, h)
    g_i    = tanh(h_i V)                          (n_p, a)
    a_i    = softmax_i(g_i . w_attn)              attention over patches
    pooled = sum_i a_i h_i                        (h,)
    repr   = pooled W_repr + b_repr               (d_F,)
    logits = repr W_cls + b_cls                   (C,)

Parameters are stored float32; all computation runs in float64 so analytic
gradients match central finite differences tightly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .corpus import FeatureCube

PARAM_NAMES = ("w_proj", "b_proj", "v", "w_attn", "w_repr", "b_repr", "w_cls", "b_cls")


@dataclass(frozen=True)
class EncoderParams:
    w_proj: np.ndarray  # (d_f, h)
    b_proj: np.ndarray  # (h,)
    v: np.ndarray       # (h, a)
    w_attn: np.ndarray  # (a,)
    w_repr: np.ndarray  # (h, d_F)
    b_repr: np.ndarray  # (d_F,)
    w_cls: np.ndarray   # (d_F, C)
    b_cls: np.ndarray   # (C,)

    @property
    def d_f(self) -> int:
        return self.w_proj.shape[0]

    @property
    def d_repr(self) -> int:
        return self.w_repr.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}


@dataclass(frozen=True)
class ForwardCache:
    """Intermediates of one forward pass, consumed by backward()."""

    x: np.ndarray        # (n_p, d_f) float64
    h: np.ndarray        # (n_p, h)
    g: np.ndarray        # (n_p, a)
    attn: np.ndarray     # (n_p,) post-softmax
    pooled: np.ndarray   # (h,)
    representation: np.ndarray  # (d_F,)


def init_params(d_f: int, num_classes: int, rng: np.random.Generator,
                hidden: int = 64, attn_dim: int = 32, d_repr: int = 32,
                init_sigma: float = 0.02) -> EncoderParams:
    """Small-variance Gaussian init for all matrices, zero biases."""

    def mat(*shape):
        return rng.normal(0.0, init_sigma, size=shape).astype(np.float32)

    return EncoderParams(
        w_proj=mat(d_f, hidden),
        b_proj=np.zeros(hidden, dtype=np.float32),
        v=mat(hidden, attn_dim),
        w_attn=mat(attn_dim),
        w_repr=mat(hidden, d_repr),
        b_repr=np.zeros(d_repr, dtype=np.float32),
        w_cls=mat(d_repr, num_classes),
        b_cls=np.zeros(num_classes, dtype=np.float32),
    )


def forward(params: EncoderParams, cube: FeatureCube | np.ndarray):
    """Encode one bag; returns (representation, logits, cache)."""
    x = cube.features if isinstance(cube, FeatureCube) else cube
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_f:
        raise ValueError(f"expected (n_p, {params.d_f}) features, got {x.shape}")
    w_proj = params.w_proj.astype(np.float64)
    v = params.v.astype(np.float64)
    h = np.tanh(x @ w_proj + params.b_proj.astype(np.float64))
    g = np.tanh(h @ v)
    scores = g @ params.w_attn.astype(np.float64)
    scores = scores - scores.max()
    exp = np.exp(scores)
    attn = exp / exp.sum()
    pooled = attn @ h
    representation = pooled @ params.w_repr.astype(np.float64) + params.b_repr.astype(np.float64)
    logits = representation @ params.w_cls.astype(np.float64) + params.b_cls.astype(np.float64)
    cache = ForwardCache(x=x, h=h, g=g, attn=attn, pooled=pooled, representation=representation)
    return representation, logits, cache


def backward(params: EncoderParams, cache: ForwardCache,
             grad_representation: np.ndarray, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of grad_repr . repr + grad_logits . logits w.r.t. params."""
    grad_representation = np.asarray(grad_representation, dtype=np.float64)
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_representation.shape != (params.d_repr,) or grad_logits.shape != (params.num_classes,):
        raise ValueError(
            f"upstream gradient shapes {grad_representation.shape}/{grad_logits.shape} do not match "
            f"encoder dims ({params.d_repr},)/({params.num_classes},)"
        )
    if cache.x.shape[1] != params.d_f or cache.h.shape[1] != params.w_proj.shape[1]:
        raise ValueError("cache does not match these parameters")

    w_cls = params.w_cls.astype(np.float64)
    w_repr = params.w_repr.astype(np.float64)
    v = params.v.astype(np.float64)
    w_attn = params.w_attn.astype(np.float64)

    d_w_cls = np.outer(cache.representation, grad_logits)
    d_b_cls = grad_logits
    d_repr = grad_representation + w_cls @ grad_logits

    d_w_repr = np.outer(cache.pooled, d_repr)
    d_b_repr = d_repr
    d_pooled = w_repr @ d_repr

    # pooled = attn @ h
    d_attn = cache.h @ d_pooled
    d_h = np.outer(cache.attn, d_pooled)

    # softmax backward
    d_scores = cache.attn * (d_attn - cache.attn @ d_attn)

    # scores = g @ w_attn
    d_w_attn = cache.g.T @ d_scores
    d_g = np.outer(d_scores, w_attn)

    # g = tanh(h @ v)
    d_g_pre = d_g * (1.0 - cache.g ** 2)
    d_v = cache.h.T @ d_g_pre
    d_h += d_g_pre @ v.T

    # h = tanh(x @ w_proj + b_proj)
    d_h_pre = d_h * (1.0 - cache.h ** 2)
    d_w_proj = cache.x.T @ d_h_pre
    d_b_proj = d_h_pre.sum(axis=0)

    return {
        "w_proj": d_w_proj,
        "b_proj": d_b_proj,
        "v": d_v,
        "w_attn": d_w_attn,
        "w_repr": d_w_repr,
        "b_repr": d_b_repr,
        "w_cls": d_w_cls,
        "b_cls": d_b_cls,
    }


def zero_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr, dtype=np.float64) for name, arr in params.arrays().items()}


def accumulate_grads(total: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    for name in total:
        total[name] += grads[name]


def expand_head(params: EncoderParams, new_total_classes: int, rng: np.random.Generator) -> EncoderParams:
    """Grow the classifier head; old class columns are untouched."""
    current = params.num_classes
    if new_total_classes <= current:
        raise ValueError(f"new_total_classes must exceed current {current}, got {new_total_classes}")
    extra = new_total_classes - current
    new_cols = rng.normal(0.0, 0.01, size=(params.d_repr, extra)).astype(np.float32)
    w_cls = np.concatenate([params.w_cls, new_cols], axis=1)
    b_cls = np.concatenate([params.b_cls, np.zeros(extra, dtype=np.float32)])
    return replace(params, w_cls=w_cls, b_cls=b_cls)


def snapshot(params: EncoderParams) -> EncoderParams:
    """Deep, read-only copy of the parameters."""
    frozen = {}
    for name, arr in params.arrays().items():
        copy = arr.copy()
        copy.setflags(write=False)
        frozen[name] = copy
    return EncoderParams(**frozen)


def params_equal(a: EncoderParams, b: EncoderParams) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a.arrays().values(), b.arrays().values()))


# ---------------------------------------------------------------------------
# Checkpoint files: <stem>.json lists tensor names/shapes, <stem>.bin holds
# one headered little-endian float32 block per tensor (same convention as the
# feature binaries; vectors are stored as 1-row matrices).


def save_params(params: EncoderParams, stem: Path) -> None:
    import struct

    stem = Path(stem)
    index = []
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name, arr in params.arrays().items():
            block = np.ascontiguousarray(arr if arr.ndim == 2 else arr.reshape(1, -1), dtype="<f4")
            fh.write(struct.pack("<II", *block.shape))
            fh.write(block.tobytes())
            index.append({"name": name, "shape": list(arr.shape)})
    stem.with_suffix(".json").write_text(json.dumps(index, indent=2) + "\n")


def load_params(stem: Path) -> EncoderParams:
    stem = Path(stem)
    index = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    arrays = {}
    offset = 0
    for entry in index:
        rows, cols = np.frombuffer(raw, dtype="<u4", count=2, offset=offset)
        offset += 8
        block = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += 4 * rows * cols
        arrays[entry["name"]] = block.reshape(entry["shape"]).astype(np.float32)
    return EncoderParams(**arrays)
