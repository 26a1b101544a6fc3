"""Trailer/movie co-attention supervision and ranking losses.

A single shared linear layer projects trailer shots into a memory and movie
shots into queries; a movie shot's attention score is the maximum inner
product between its query and the memory rows.  Score gaps between two shots
turn into soft pair labels: an exponential weight on the gap magnitude and a
sign giving the required ordering.  Weights and signs are treated as
constants by the gradient (sgn is non-differentiable and exponential feedback
on raw gaps destabilises early training); the projection still learns through
the confidence gates of the contrastive regularizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import EmptyClass, ShapeMismatch, TooFewShots


@dataclass
class CoAttentionParams:
    """One projection shared by the memory and the query sides."""

    w_shared: Parameter

    @property
    def d(self) -> int:
        return self.w_shared.value.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.w_shared]


def init_coattention(d_in: int, d: int, rng: np.random.Generator,
                     dtype=np.float32) -> CoAttentionParams:
    return CoAttentionParams(ad.init_linear_weight("coatt.w_shared", d, d_in, rng, dtype))


def build_memory(params: CoAttentionParams, trailer_features: Tensor) -> Tensor:
    """Project trailer shots into the memory matrix (N_t, d)."""
    return ad.linear(trailer_features, params.w_shared)


def _normalize_rows(x: Tensor) -> Tensor:
    sq = ad.mul(x, x)
    norm = ad.sqrt(ad.affine(ad.row_mean(sq), float(x.value.shape[1]), 1e-12))
    return ad.scale_rows(x, ad.reciprocal(norm))


def co_attention_scores(params: CoAttentionParams, movie_features: Tensor,
                        memory: Tensor, metric: str = "dot") -> Tensor:
    """Per-shot attention: max over memory rows of the query/memory match.

    metric "dot" is the raw inner product (a full-width 1-D convolution of two
    equal-length vectors has a single tap equal to their inner product);
    "cosine" matches on normalized vectors.  Gradient flows only through the
    argmax memory row of each shot.
    """
    if movie_features.value.shape[1] != params.w_shared.value.shape[1]:
        raise ShapeMismatch(
            f"movie features have {movie_features.value.shape[1]} cols, "
            f"projection expects {params.w_shared.value.shape[1]}")
    queries = ad.linear(movie_features, params.w_shared)
    if metric == "cosine":
        queries = _normalize_rows(queries)
        memory = _normalize_rows(memory)
    elif metric != "dot":
        raise ValueError(f"unknown attention metric {metric!r}")
    matches = ad.linear(queries, memory)   # (n, N_t) inner products
    return ad.row_max(matches)             # (n, 1)


# ---------------------------------------------------------------------------
# soft pair labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SoftLabelPair:
    i: int
    j: int
    w: float
    sigma: int


def pair_weights(att_i: float, att_j: float, lam: float) -> tuple[float, int]:
    """Weight and ordering sign for one shot pair.

    w = lam * (exp(|att_i - att_j|) - 1), sigma = sgn(att_i - att_j).
    Both are constants with respect to gradients.
    """
    gap = float(att_i) - float(att_j)
    w = lam * (math.exp(abs(gap)) - 1.0)
    sigma = 0 if gap == 0 else (1 if gap > 0 else -1)
    return w, sigma


def sample_pairs(n_shots: int, att: np.ndarray, n_pairs: int, lam: float,
                 rng: np.random.Generator, offset: int = 0) -> list[SoftLabelPair]:
    """Uniform within-movie index pairs (no self-pairs) with soft labels.

    ``offset`` shifts the stored indices so they address rows of a batch-wide
    score vector rather than the movie-local one.
    """
    if n_shots < 2:
        raise TooFewShots(f"need at least 2 shots to form pairs, got {n_shots}")
    att = np.asarray(att).reshape(-1)
    first = rng.integers(0, n_shots, size=n_pairs)
    second = rng.integers(0, n_shots - 1, size=n_pairs)
    second = np.where(second >= first, second + 1, second)  # skip self-pairs
    pairs = []
    for i, j in zip(first, second):
        w, sigma = pair_weights(att[i], att[j], lam)
        pairs.append(SoftLabelPair(int(i) + offset, int(j) + offset, w, sigma))
    return pairs


# ---------------------------------------------------------------------------
# ranking losses
# ---------------------------------------------------------------------------

def coattention_rank_loss(scores: Tensor, pairs: list[SoftLabelPair]) -> Tensor:
    """Soft-label weighted hinge: sum of w * max(0, 1 - sigma * (S_i - S_j))."""
    dt = scores.value.dtype
    idx_i = [p.i for p in pairs]
    idx_j = [p.j for p in pairs]
    sigma = ad.constant(np.array([[p.sigma] for p in pairs], dtype=dt).reshape(-1, 1))
    weight = ad.constant(np.array([[p.w] for p in pairs], dtype=dt).reshape(-1, 1))
    s_i = ad.gather_rows(scores, idx_i)
    s_j = ad.gather_rows(scores, idx_j)
    margin = ad.affine(ad.scale_rows(ad.sub(s_i, s_j), sigma), -1.0, 1.0)
    return ad.sum_all(ad.scale_rows(ad.relu(margin), weight))


def supervised_rank_loss(scores: Tensor, pos, neg,
                         negatives_per_positive: int = 20,
                         rng: np.random.Generator | None = None) -> Tensor:
    """Hinge ranking loss over labeled pairs: sum of max(0, 1 - S_i + S_j).

    Each positive is paired with ``negatives_per_positive`` sampled negatives;
    when the negative pool is no larger than that, pairing is exhaustive (and
    no rng is needed).
    """
    pos = list(pos)
    neg = list(neg)
    if not pos or not neg:
        raise EmptyClass(f"need both classes, got {len(pos)} pos / {len(neg)} neg")
    if set(pos) & set(neg):
        raise EmptyClass("positive and negative index sets overlap")
    idx_i: list[int] = []
    idx_j: list[int] = []
    for i in pos:
        if len(neg) <= negatives_per_positive:
            chosen = neg
        else:
            if rng is None:
                raise ValueError("rng required to sample negatives")
            chosen = [neg[k] for k in rng.choice(len(neg), size=negatives_per_positive,
                                                 replace=False)]
        idx_i.extend([i] * len(chosen))
        idx_j.extend(chosen)
    s_i = ad.gather_rows(scores, idx_i)
    s_j = ad.gather_rows(scores, idx_j)
    margin = ad.affine(ad.sub(s_i, s_j), -1.0, 1.0)  # 1 - (S_i - S_j)
    return ad.sum_all(ad.relu(margin))
