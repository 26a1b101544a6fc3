"""Contrastive attention: auxiliary sets, feature augmentation, regularizer.

Each target shot attends over an auxiliary set made of key-candidate shots
from *other* movies in the batch plus non-key shots surrounding the target in
its *own* movie.  The attention context is concatenated onto the raw feature,
and a gated contrastive loss pulls confident key shots together while pushing
them away from their surrounding non-key shots.

Confidence gates come from a steep sigmoid of the co-attention score around a
per-movie threshold, so they are close to 0 or 1 almost everywhere yet remain
differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DegenerateDenominator, EmptyAuxiliary, ShapeMismatch


@dataclass
class ContrastiveAttentionParams:
    w_q: Parameter   # (d, d_in) query projection
    w_k: Parameter   # (d, d_in) key projection
    w_v: Parameter   # (d, d_in) value projection
    w_o: Parameter   # (d, d) output projection applied after the ReLU

    @property
    def d(self) -> int:
        return self.w_q.value.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]


def init_contrastive(d_in: int, d: int, rng: np.random.Generator,
                     dtype=np.float32) -> ContrastiveAttentionParams:
    return ContrastiveAttentionParams(
        w_q=ad.init_linear_weight("ca.w_q", d, d_in, rng, dtype),
        w_k=ad.init_linear_weight("ca.w_k", d, d_in, rng, dtype),
        w_v=ad.init_linear_weight("ca.w_v", d, d_in, rng, dtype),
        w_o=ad.init_linear_weight("ca.w_o", d, d, rng, dtype),
    )


# ---------------------------------------------------------------------------
# confidence gates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfidenceParams:
    """Sharp sigmoid gate mapping attention scores to approximately 0/1.

    The steepness/threshold assignment is gamma=100 with the threshold at
    epsilon_ratio * max(att) per movie; ``swap_gamma_epsilon`` selects the
    alternative reading (steepness 0.65 * max(att), threshold 100).
    """

    gamma: float = 100.0
    epsilon_ratio: float = 0.65
    swap_gamma_epsilon: bool = False

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.epsilon_ratio < 1:
            raise ValueError("epsilon_ratio must be in (0, 1)")

    def resolve(self, max_att: float) -> tuple[float, float]:
        """(gamma, epsilon) for one movie given its max attention score."""
        if self.swap_gamma_epsilon:
            return self.epsilon_ratio * max_att, self.gamma
        return self.gamma, self.epsilon_ratio * max_att


def confidence_weight(att: float, max_att: float, cfg: ConfidenceParams) -> float:
    """Scalar gate value in (0, 1); max_att is a constant, not differentiated."""
    gamma, epsilon = cfg.resolve(max_att)
    z = min(max(gamma * (att - epsilon), -ad.GATE_CLAMP), ad.GATE_CLAMP)
    return 1.0 / (1.0 + math.exp(-z))


def confidence_weights(att: Tensor, max_att: float, cfg: ConfidenceParams) -> Tensor:
    """Differentiable gate column for one movie's attention column."""
    gamma, epsilon = cfg.resolve(max_att)
    return ad.sigmoid(ad.affine(att, gamma, -gamma * epsilon))


# ---------------------------------------------------------------------------
# auxiliary sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuxiliarySet:
    """Support set for one target: cross-video positives, same-video negatives."""

    target_index: int
    pos_indices: tuple[int, ...]
    neg_indices: tuple[int, ...]

    @property
    def members(self) -> tuple[int, ...]:
        return self.pos_indices + self.neg_indices

    @property
    def size(self) -> int:
        return len(self.pos_indices) + len(self.neg_indices)


def build_auxiliary_set(movie_of: np.ndarray, position: np.ndarray,
                        theta: np.ndarray, target: int, window: int,
                        labels: np.ndarray | None = None) -> AuxiliarySet:
    """Auxiliary set for one target shot within a batch.

    ``movie_of``/``position`` give each batch shot's movie and its temporal
    position inside that movie.  Membership comes from ``labels`` when given
    (1 = key, 0 = non-key, -1 = unlabeled) and from thresholding ``theta`` at
    0.5 otherwise.  Positives are key candidates from other movies; negatives
    are non-key shots within ``window`` positions of the target in its own
    movie.  Raises EmptyAuxiliary when both sides are empty.
    """
    n = len(movie_of)
    if labels is not None:
        is_pos = labels == 1
        is_neg = labels == 0
    else:
        is_pos = theta >= 0.5
        is_neg = ~is_pos
    same_movie = movie_of == movie_of[target]
    pos_mask = is_pos & ~same_movie
    near = np.abs(position - position[target]) <= window
    neg_mask = is_neg & same_movie & near
    neg_mask[target] = False
    pos = tuple(int(i) for i in np.flatnonzero(pos_mask))
    neg = tuple(int(i) for i in np.flatnonzero(neg_mask))
    if not pos and not neg:
        raise EmptyAuxiliary(f"target {target}: no auxiliary shots in batch of {n}")
    return AuxiliarySet(target_index=target, pos_indices=pos, neg_indices=neg)


# ---------------------------------------------------------------------------
# attention over an auxiliary set (single-target reference ops)
# ---------------------------------------------------------------------------

def attention_weights(params: ContrastiveAttentionParams, x_row: Tensor,
                      aux_features: Tensor) -> Tensor:
    """softmax(o_i . K / sqrt(d)) over the auxiliary rows, shape (1, N~)."""
    if aux_features.value.shape[0] < 1:
        raise ShapeMismatch("auxiliary set must contain at least one shot")
    o = ad.linear(x_row, params.w_q)               # (1, d)
    k = ad.linear(aux_features, params.w_k)        # (N~, d)
    logits = ad.linear(o, k)                       # (1, N~)
    return ad.softmax_row(ad.affine(logits, 1.0 / math.sqrt(params.d)))


def augment_feature(params: ContrastiveAttentionParams, x_row: Tensor,
                    aux_features: Tensor) -> Tensor:
    """Concat the raw feature with its attention context: (1, d_in + d)."""
    weights = attention_weights(params, x_row, aux_features)
    v = ad.linear(aux_features, params.w_v)        # (N~, d)
    context = ad.linear(ad.relu(ad.matmul(weights, v)), params.w_o)
    return ad.concat_cols(x_row, context)


# ---------------------------------------------------------------------------
# fused per-target primitives (used on whole batches)
# ---------------------------------------------------------------------------

def _attention_context(logits: Tensor, values: Tensor, row: int,
                       cols: np.ndarray, scale: float) -> Tensor:
    """softmax(logits[row, cols] * scale) @ values[cols] as one taped op."""
    lv = logits.value[row, cols] * scale
    lv = lv - lv.max()
    e = np.exp(lv)
    a = e / e.sum()
    ctx = (a @ values.value[cols])[None, :]

    def backward(out: Tensor):
        if out.grad is None:
            return
        g = out.grad[0]
        vj = values.value[cols]
        da = vj @ g
        dl = a * (da - float(da @ a)) * scale
        if logits.needs_grad:
            np.add.at(ad.ensure_grad(logits)[row], cols, dl)
        if values.needs_grad:
            np.add.at(ad.ensure_grad(values), cols, np.outer(a, g))

    return ad._emit(np.ascontiguousarray(ctx), logits.needs_grad or values.needs_grad,
                    backward)


def _contrast_term(logits: Tensor, theta: Tensor, row: int,
                   pos: np.ndarray, neg: np.ndarray) -> Tensor | None:
    """One gated contrastive term, or None when its denominator degenerates.

    term = theta_row * (log den - log num) with
    num = sum_pos theta_j * exp(l_j - m),
    den = num + sum_neg (1 - theta_j) * exp(l_j - m),
    m the max logit over the union (a constant shift the ratio ignores).
    """
    lp = logits.value[row, pos]
    ln = logits.value[row, neg]
    m = max(lp.max(), ln.max()) if len(neg) else lp.max()
    ep = np.exp(lp - m)
    en = np.exp(ln - m) if len(neg) else np.zeros(0, dtype=lp.dtype)
    tp = theta.value[pos, 0]
    tn = theta.value[neg, 0] if len(neg) else np.zeros(0, dtype=lp.dtype)
    ti = float(theta.value[row, 0])
    num = float(tp @ ep)
    den = num + float((1.0 - tn) @ en)
    if num <= 0.0 or den <= 0.0:
        return None
    val = np.array([[ti * (math.log(den) - math.log(num))]], dtype=logits.value.dtype)

    def backward(out: Tensor):
        if out.grad is None:
            return
        g = float(out.grad[0, 0])
        if logits.needs_grad:
            gl = ad.ensure_grad(logits)[row]
            np.add.at(gl, pos, g * ti * (tp * ep / den - tp * ep / num))
            if len(neg):
                np.add.at(gl, neg, g * ti * ((1.0 - tn) * en / den))
        if theta.needs_grad:
            gt = ad.ensure_grad(theta)
            np.add.at(gt[:, 0], pos, g * ti * (ep / den - ep / num))
            if len(neg):
                np.add.at(gt[:, 0], neg, g * ti * (-en / den))
            gt[row, 0] += g * (math.log(den) - math.log(num))

    return ad._emit(val, logits.needs_grad or theta.needs_grad, backward)


# ---------------------------------------------------------------------------
# batch-level entry points
# ---------------------------------------------------------------------------

@dataclass
class AttentionProjection:
    """Shared projections of one batch: queries, keys, values, raw logits."""

    keys: Tensor      # (n, d)
    values: Tensor    # (n, d)
    logits: Tensor    # (n, n) raw inner products o_i . k_j (no sqrt(d) scaling)


def project(params: ContrastiveAttentionParams, features: Tensor) -> AttentionProjection:
    o = ad.linear(features, params.w_q)
    k = ad.linear(features, params.w_k)
    v = ad.linear(features, params.w_v)
    return AttentionProjection(keys=k, values=v, logits=ad.linear(o, k))


def augment_all(params: ContrastiveAttentionParams, features: Tensor,
                proj: AttentionProjection,
                aux_sets: list[AuxiliarySet | None]) -> Tensor:
    """Augmented features for every batch shot, (n, d_in + d).

    Shots whose auxiliary set is None (empty) get a zero context.
    """
    n = features.value.shape[0]
    if len(aux_sets) != n:
        raise ShapeMismatch(f"{len(aux_sets)} auxiliary sets for {n} shots")
    d = params.d
    scale = 1.0 / math.sqrt(d)
    zero_ctx = ad.constant(np.zeros((1, d), dtype=features.value.dtype))
    rows = []
    for i, aux in enumerate(aux_sets):
        if aux is None:
            rows.append(zero_ctx)
            continue
        cols = np.asarray(aux.members, dtype=np.intp)
        rows.append(_attention_context(proj.logits, proj.values, i, cols, scale))
    pooled = ad.vstack(rows)
    context = ad.linear(ad.relu(pooled), params.w_o)
    return ad.concat_cols(features, context)


@dataclass
class ContrastiveLossResult:
    loss: Tensor
    n_terms: int
    degenerate: list[DegenerateDenominator]


def contrastive_loss(proj: AttentionProjection, theta: Tensor,
                     aux_sets: list[AuxiliarySet | None],
                     skip_zero_gate: bool = False) -> ContrastiveLossResult:
    """Gated contrastive regularizer summed over targets (ascending index).

    Targets without positives contribute nothing; targets with positives but
    no negatives have ratio exactly 1 and also contribute nothing (skipped
    without creating a node, which is exact since the gradient vanishes too).
    Underflowed denominators are reported and skipped.
    """
    dt = proj.logits.value.dtype
    terms: list[Tensor] = []
    degenerate: list[DegenerateDenominator] = []
    for i, aux in enumerate(aux_sets):
        if aux is None or not aux.pos_indices:
            continue
        if not aux.neg_indices:
            continue  # ratio == 1 identically, zero term and zero gradient
        if skip_zero_gate and theta.value[i, 0] == 0.0:
            continue
        pos = np.asarray(aux.pos_indices, dtype=np.intp)
        neg = np.asarray(aux.neg_indices, dtype=np.intp)
        term = _contrast_term(proj.logits, theta, i, pos, neg)
        if term is None:
            degenerate.append(DegenerateDenominator(
                f"target {i}: weighted sums underflowed to zero"))
            continue
        terms.append(term)
    if terms:
        loss = ad.sum_all(ad.vstack(terms))
    else:
        loss = ad.constant(np.zeros((1, 1), dtype=dt))
    return ContrastiveLossResult(loss=loss, n_terms=len(terms), degenerate=degenerate)
