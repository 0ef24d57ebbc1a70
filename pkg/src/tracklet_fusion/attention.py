"""Per-frame attention weights and weighted temporal fusion.

Two sources of frame importance are combined: an intra-frame score from a
sigmoid regressor on the frame's own feature, and an inter-frame score
from the frame's relationships with the rest of the tracklet. The
inter-frame score comes either from plain euclidean feature distances or
from a learned relation network over concatenated feature pairs. Combined
weights are averaged, normalized to a convex combination, and used to
average the stage feature maps along the time axis.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    div,
    matmul,
    mul,
    pairwise_distances,
    relu,
    reshape,
    sigmoid,
    tmean,
    tsum,
)
from .nn import Linear, Module

ATTENTION_VARIANTS = (
    "avg_pool",
    "intra",
    "inter_euclid",
    "inter_rn",
    "intra_inter_euclid",
    "intra_inter_rn",
)


@dataclass
class AttentionWeights:
    """Numpy snapshot of one stage's attention state, for dumps and tests."""

    stage: int
    w: np.ndarray | None
    v: np.ndarray | None
    combined: np.ndarray | None
    normalized: np.ndarray
    matrix: np.ndarray | None = None


class IntraAttentionHead(Module):
    """Scores a frame from its own content: sigmoid of a linear map."""

    def __init__(self, d_f: int, rng: np.random.Generator):
        self.head = Linear(d_f, 1, rng, init_scale=np.sqrt(1.0 / d_f))

    def __call__(self, f: Tensor) -> Tensor:
        if f.ndim != 2:
            raise ValueError(f"expected frame features [L, d_f], got {f.shape}")
        scores = self.head(f)
        return reshape(sigmoid(scores), (f.shape[0],))


@functools.lru_cache(maxsize=64)
def _pair_selectors(length: int) -> tuple[np.ndarray, np.ndarray]:
    # Constant 0/1 matrices turning [L, d] rows into all ordered pairs:
    # left[p] = f[p // L], right[p] = f[p % L].
    left = np.zeros((length * length, length))
    right = np.zeros((length * length, length))
    for p in range(length * length):
        left[p, p // length] = 1.0
        right[p, p % length] = 1.0
    return left, right


class RelationNetwork(Module):
    """Pairwise relation embeddings plus a 1x1 relation-to-score head.

    The pair MLP runs on both orderings of every pair and the results are
    added, so the relation embedding (and hence the attention matrix) is
    symmetric by construction.
    """

    def __init__(self, d_f: int, hidden: int, d_r: int, rng: np.random.Generator):
        self.fc1 = Linear(2 * d_f, hidden, rng)
        self.fc2 = Linear(hidden, d_r, rng)
        self.theta = Tensor(rng.standard_normal((d_r, 1)) * np.sqrt(1.0 / d_r),
                            requires_grad=True)
        self._d_r = d_r

    def _pair_mlp(self, pairs: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(pairs)))

    def embed(self, f: Tensor) -> Tensor:
        """Relation embeddings for every ordered pair: [L, L, d_r]."""
        if f.ndim != 2:
            raise ValueError(f"expected frame features [L, d_f], got {f.shape}")
        length = f.shape[0]
        if length < 2:
            raise ValueError("relation embedding needs at least 2 frames")
        left_sel, right_sel = _pair_selectors(length)
        left = matmul(Tensor(left_sel), f)
        right = matmul(Tensor(right_sel), f)
        r = self._pair_mlp(concat(left, right, axis=1)) + \
            self._pair_mlp(concat(right, left, axis=1))
        return reshape(r, (length, length, self._d_r))

    def attention(self, f: Tensor) -> tuple[Tensor, Tensor]:
        """Inter-frame weights and the full attention matrix.

        The matrix holds the rectified relation scores for every pair;
        each frame's weight is the mean of its off-diagonal row.
        """
        length = f.shape[0]
        r = self.embed(f)
        flat = reshape(r, (length * length, self._d_r))
        scores = reshape(matmul(flat, self.theta), (length, length))
        matrix = relu(scores)
        off_diag = Tensor(1.0 - np.eye(length))
        v = tsum(mul(matrix, off_diag), axis=1) * (1.0 / (length - 1))
        return v, matrix


def inter_attention_euclidean(f: Tensor) -> Tensor:
    """Mean euclidean distance from each frame to every frame (self included)."""
    if f.ndim != 2:
        raise ValueError(f"expected frame features [L, d_f], got {f.shape}")
    if f.shape[0] < 2:
        raise ValueError("inter-frame attention needs at least 2 frames")
    return tmean(pairwise_distances(f), axis=1)


def combine_and_normalize(w: Tensor, v: Tensor) -> Tensor:
    """Average the two attention sources and normalize to sum 1.

    Falls back to uniform weights when everything is zero (possible only
    when both sources are degenerate, e.g. a zeroed relation head with no
    intra branch).
    """
    if w.shape != v.shape or w.ndim != 1:
        raise ValueError(f"attention length mismatch: {w.shape} vs {v.shape}")
    combined = (w + v) * 0.5
    total = tsum(combined)
    if total.item() <= 0.0:
        length = w.shape[0]
        return Tensor(np.full(length, 1.0 / length))
    return div(combined, total)


def uniform_weights(length: int) -> Tensor:
    return Tensor(np.full(length, 1.0 / length))


def temporal_fuse(maps: Tensor, weights: Tensor) -> Tensor:
    """Weighted average of per-frame maps: [L, C, H, W] x [L] -> [C, H, W]."""
    if maps.ndim != 4:
        raise ValueError(f"expected stage maps [L, C, H, W], got {maps.shape}")
    if weights.ndim != 1 or weights.shape[0] != maps.shape[0]:
        raise ValueError(
            f"{weights.shape[0] if weights.ndim == 1 else weights.shape} weights "
            f"for {maps.shape[0]} frames")
    expanded = reshape(weights, (maps.shape[0], 1, 1, 1))
    return tsum(mul(maps, expanded), axis=0)


def compute_attention(f: Tensor, variant: str, intra_head: IntraAttentionHead,
                      relation_net: RelationNetwork,
                      stage: int = 0) -> tuple[Tensor, AttentionWeights]:
    """Dispatch one attention variant over pooled frame features [L, d_f].

    Returns the normalized weights (still on the tape) and a numpy
    diagnostic snapshot.
    """
    if variant not in ATTENTION_VARIANTS:
        raise ValueError(f"unknown attention variant '{variant}', "
                         f"expected one of {ATTENTION_VARIANTS}")
    length = f.shape[0]
    if variant == "avg_pool":
        norm = uniform_weights(length)
        return norm, AttentionWeights(stage, None, None, None, norm.data.copy())

    zeros = Tensor(np.zeros(length))
    w = intra_head(f) if "intra" in variant else zeros
    matrix = None
    if variant in ("inter_euclid", "intra_inter_euclid"):
        v = inter_attention_euclidean(f)
    elif variant in ("inter_rn", "intra_inter_rn"):
        v, matrix_t = relation_net.attention(f)
        matrix = matrix_t.data.copy()
    else:
        v = zeros
    norm = combine_and_normalize(w, v)
    diag = AttentionWeights(
        stage,
        w.data.copy() if w is not zeros else None,
        v.data.copy() if v is not zeros else None,
        ((w.data + v.data) * 0.5).copy(),
        norm.data.copy(),
        matrix,
    )
    return norm, diag
