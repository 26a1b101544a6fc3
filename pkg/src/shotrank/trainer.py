"""Training orchestration: modes, batching, loss assembly, checkpoints.

Six training modes are supported:

    sup     hinge ranking on annotated key moments
    sup_ca  sup plus contrastive-attention feature augmentation
    pl      hinge ranking on offline pseudo labels (trailer similarity)
    pl_ca   pl plus augmentation
    coa     weighted hinge ranking driven by trailer co-attention scores
    ccanet  coa plus augmentation plus the gated contrastive regularizer

Batches are whole movies drawn until the target shot count is reached, so
same-movie neighborhoods and per-movie attention maxima stay well defined.
All randomness is derived from the config seed through labeled streams, which
makes runs bit-reproducible and lets training resume from a checkpoint on an
epoch boundary with an identical trajectory.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import coattention as coatt
from . import contrastive as ca
from . import rng as rngmod
from .autodiff import AdamState, Parameter, Tape, Tensor
from .data import MovieRecord, TrailerRecord, check_feature_matrix
from .errors import DegenerateSplit, MagicMismatch, NonFiniteLoss, TruncatedFile

MODES = ("sup", "sup_ca", "pl", "pl_ca", "coa", "ccanet")
AUGMENTED_MODES = ("sup_ca", "pl_ca", "ccanet")
TRAILER_MODES = ("pl", "pl_ca", "coa", "ccanet")
LABELED_MODES = ("sup", "sup_ca")

CHECKPOINT_MAGIC = b"CCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "ccanet"
    lam: float = 1.5               # pair-weight scale (JSON key "lambda")
    gamma: float = 100.0           # confidence gate steepness
    epsilon_ratio: float = 0.65    # gate threshold as a fraction of max att
    window: int = 10               # neighborhood half-width, in shots
    d: int = 512                   # projection width
    hidden: int = 256              # scoring head hidden width
    lr: float = 0.001
    epochs: int = 50
    batch_shots: int = 2048
    negatives_per_positive: int = 20
    pairs_per_shot: int = 4        # sampled pairs per movie = this x movie shots
    pl_pos_frac: float = 0.05
    pl_neg_frac: float = 0.50
    seed: int = 0
    precision: str = "f32"
    attention_metric: str = "dot"
    swap_gamma_epsilon: bool = False
    contrastive_loss_enabled: bool = True
    train_coattention_proj: bool = False
    weight_decay: float = 0.0
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.precision not in ad.DTYPES:
            raise ValueError(f"precision must be one of {tuple(ad.DTYPES)}")
        for name in ("pl_pos_frac", "pl_neg_frac"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must be in (0, 1), got {v}")
        if self.batch_shots < 2:
            raise ValueError("batch_shots must be >= 2")

    @property
    def augmented(self) -> bool:
        return self.mode in AUGMENTED_MODES

    @property
    def uses_trailer(self) -> bool:
        return self.mode in TRAILER_MODES

    def confidence(self) -> ca.ConfidenceParams:
        return ca.ConfidenceParams(gamma=self.gamma, epsilon_ratio=self.epsilon_ratio,
                                   swap_gamma_epsilon=self.swap_gamma_epsilon)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            out[key] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            name = "lam" if key == "lambda" else key
            if name not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[name] = value
        return cls(**kwargs)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ScoringHead:
    """Two-layer perceptron producing one score per shot."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    def score(self, features: Tensor) -> Tensor:
        h = ad.relu(ad.linear(features, self.w1, self.b1))
        return ad.linear(h, self.w2, self.b2)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


def init_head(d_f: int, hidden: int, rng: np.random.Generator, dtype) -> ScoringHead:
    return ScoringHead(
        w1=ad.init_linear_weight("head.w1", hidden, d_f, rng, dtype),
        b1=ad.init_zero_bias("head.b1", hidden, dtype),
        w2=ad.init_linear_weight("head.w2", 1, hidden, rng, dtype),
        b2=ad.init_zero_bias("head.b2", 1, dtype),
    )


@dataclass
class ModelParams:
    d_in: int
    head: ScoringHead
    coatt: coatt.CoAttentionParams | None = None
    ca: ca.ContrastiveAttentionParams | None = None

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        if self.coatt is not None:
            out.extend(self.coatt.parameters())
        if self.ca is not None:
            out.extend(self.ca.parameters())
        out.extend(self.head.parameters())
        return out


def init_model(cfg: TrainConfig, d_in: int) -> ModelParams:
    dtype = ad.DTYPES[cfg.precision]
    rng = rngmod.stream(cfg.seed, "init")
    co = (coatt.init_coattention(d_in, cfg.d, rng, dtype)
          if cfg.mode in ("coa", "ccanet") else None)
    attn = ca.init_contrastive(d_in, cfg.d, rng, dtype) if cfg.augmented else None
    d_f = d_in + (cfg.d if cfg.augmented else 0)
    head = init_head(d_f, cfg.hidden, rng, dtype)
    return ModelParams(d_in=d_in, head=head, coatt=co, ca=attn)


# ---------------------------------------------------------------------------
# pseudo labels
# ---------------------------------------------------------------------------

def pseudo_label(movie: MovieRecord, trailer: TrailerRecord,
                 pos_frac: float, neg_frac: float) -> tuple[list[int], list[int]]:
    """Offline similarity split: per shot, max cosine to any trailer shot.

    The top ``pos_frac`` of shots become positives and the bottom ``neg_frac``
    negatives; ties resolve by ascending index.  Computed once before
    training and never updated.
    """
    m = movie.shots.astype(np.float64)
    t = trailer.shots.astype(np.float64)
    mn = np.linalg.norm(m, axis=1, keepdims=True)
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    m = np.divide(m, mn, out=np.zeros_like(m), where=mn > 0)
    t = np.divide(t, tn, out=np.zeros_like(t), where=tn > 0)
    best = (m @ t.T).max(axis=1)
    n = movie.n_shots
    n_pos = round(pos_frac * n)
    n_neg = round(neg_frac * n)
    if n_pos < 1 or n_neg < 1:
        raise DegenerateSplit(f"movie {movie.movie_id}: {n} shots round to "
                              f"{n_pos} positives / {n_neg} negatives")
    if n_pos + n_neg > n:
        raise DegenerateSplit(f"movie {movie.movie_id}: positive and negative "
                              f"sets overlap ({n_pos} + {n_neg} > {n})")
    order = np.lexsort((np.arange(n), -best))
    return [int(i) for i in order[:n_pos]], [int(i) for i in order[-n_neg:]]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def make_batches(shot_counts: list[int], batch_shots: int,
                 seed: int, epoch: int) -> list[list[int]]:
    """Whole-movie batches: shuffle movies, accumulate until batch_shots.

    Every movie appears in exactly one batch per epoch.  Within a batch,
    movies are sorted ascending so loss accumulation order is canonical.
    """
    order = rngmod.stream(seed, "batches", epoch).permutation(len(shot_counts))
    batches: list[list[int]] = []
    current: list[int] = []
    count = 0
    for idx in order:
        current.append(int(idx))
        count += shot_counts[idx]
        if count >= batch_shots:
            batches.append(sorted(current))
            current, count = [], 0
    if current:
        batches.append(sorted(current))
    return batches


@dataclass
class _BatchData:
    movie_ids: list[int]       # dataset indices, ascending
    feats: np.ndarray          # (n, d_in) stacked shot features
    movie_of: np.ndarray       # (n,) local movie ordinal per shot
    position: np.ndarray       # (n,) temporal position within the movie
    offsets: list[int]         # row offset of each movie (plus final n)


def _stack_batch(dataset, movie_ids: list[int], dtype) -> _BatchData:
    feats = []
    movie_of = []
    position = []
    offsets = [0]
    for local, ds_idx in enumerate(movie_ids):
        shots = dataset[ds_idx][0].shots
        feats.append(shots.astype(dtype))
        movie_of.append(np.full(shots.shape[0], local))
        position.append(np.arange(shots.shape[0]))
        offsets.append(offsets[-1] + shots.shape[0])
    return _BatchData(
        movie_ids=movie_ids,
        feats=np.concatenate(feats, axis=0),
        movie_of=np.concatenate(movie_of),
        position=np.concatenate(position),
        offsets=offsets,
    )


# ---------------------------------------------------------------------------
# batch loss
# ---------------------------------------------------------------------------

@dataclass
class _FrozenBatch:
    """Stop-gradient structure fixed at the first forward pass of a batch.

    Pair weights/signs, gate thresholds, auxiliary membership, and sampled
    pair indices are constants of the optimization step; freezing them makes
    the loss a smooth function of the parameters, which is also what the
    finite-difference checker differentiates.
    """

    rank_pairs: list[list[coatt.SoftLabelPair]] | None = None   # coa/ccanet
    sup_pairs: list[tuple[list[int], list[int]]] | None = None  # sup/pl modes
    max_att: list[float] | None = None                          # per movie
    labels: np.ndarray | None = None                            # +CA label modes
    aux_sets: list[ca.AuxiliarySet | None] | None = None
    n_empty_aux: int = 0


@dataclass
class _BatchLoss:
    total: Tensor
    l_rank: Tensor
    l_c: Tensor | None
    frozen: _FrozenBatch
    n_degenerate: int = 0


def _hinge_pair_loss(scores: Tensor, idx_i: list[int], idx_j: list[int]) -> Tensor:
    s_i = ad.gather_rows(scores, idx_i)
    s_j = ad.gather_rows(scores, idx_j)
    return ad.sum_all(ad.relu(ad.affine(ad.sub(s_i, s_j), -1.0, 1.0)))


def _gated_rank_loss(scores: Tensor, pairs: list[coatt.SoftLabelPair],
                     theta: Tensor) -> Tensor:
    """Soft-label hinge additionally scaled by the mean pair gate (coa flag)."""
    dt = scores.value.dtype
    idx_i = [p.i for p in pairs]
    idx_j = [p.j for p in pairs]
    sigma = ad.constant(np.array([p.sigma for p in pairs], dtype=dt)[:, None])
    weight = ad.constant(np.array([p.w for p in pairs], dtype=dt)[:, None])
    margin = ad.affine(ad.scale_rows(ad.sub(ad.gather_rows(scores, idx_i),
                                            ad.gather_rows(scores, idx_j)), sigma),
                       -1.0, 1.0)
    gate = ad.affine(ad.add(ad.gather_rows(theta, idx_i),
                            ad.gather_rows(theta, idx_j)), 0.5)
    return ad.sum_all(ad.scale_rows(ad.scale_rows(ad.relu(margin), weight), gate))


def _build_batch_loss(cfg: TrainConfig, model: ModelParams, dataset,
                      batch: _BatchData, epoch: int,
                      pseudo: list[tuple[list[int], list[int]]] | None,
                      frozen: _FrozenBatch | None = None) -> _BatchLoss:
    dt = ad.DTYPES[cfg.precision]
    first_pass = frozen is None
    if first_pass:
        frozen = _FrozenBatch()
    features = ad.constant(batch.feats)
    n = features.value.shape[0]
    conf = cfg.confidence()

    # --- co-attention scores and confidence gates ---
    att_cols: list[Tensor] = []
    theta: Tensor | None = None
    if cfg.mode in ("coa", "ccanet"):
        if first_pass:
            frozen.max_att = []
        for local, ds_idx in enumerate(batch.movie_ids):
            trailer = dataset[ds_idx][1]
            t_feats = ad.constant(trailer.shots.astype(dt))
            movie_feats = ad.slice_rows(features, batch.offsets[local],
                                        batch.offsets[local + 1])
            memory = coatt.build_memory(model.coatt, t_feats)
            att_cols.append(coatt.co_attention_scores(
                model.coatt, movie_feats, memory, cfg.attention_metric))
            if first_pass:
                frozen.max_att.append(float(att_cols[-1].value.max()))
        need_theta = cfg.mode == "ccanet" or cfg.train_coattention_proj
        if need_theta:
            theta = ad.vstack([
                ca.confidence_weights(att_m, frozen.max_att[local], conf)
                for local, att_m in enumerate(att_cols)
            ])

    # --- label-derived gates for the +CA baselines ---
    if cfg.mode in ("sup_ca", "pl_ca"):
        if first_pass:
            labels = np.full(n, -1, dtype=np.int8)
            for local, ds_idx in enumerate(batch.movie_ids):
                off = batch.offsets[local]
                count = batch.offsets[local + 1] - off
                if cfg.mode == "sup_ca":
                    gt = dataset[ds_idx][0].ground_truth
                    labels[off:off + count] = 0
                    for i in gt:
                        labels[off + i] = 1
                else:
                    pos, neg = pseudo[ds_idx]
                    for i in pos:
                        labels[off + i] = 1
                    for i in neg:
                        labels[off + i] = 0
            frozen.labels = labels
        theta = ad.constant((frozen.labels == 1).astype(dt)[:, None])

    # --- augmentation ---
    if cfg.augmented:
        if first_pass:
            theta_np = theta.value[:, 0]
            aux_sets: list[ca.AuxiliarySet | None] = []
            n_empty = 0
            for i in range(n):
                try:
                    aux_sets.append(ca.build_auxiliary_set(
                        batch.movie_of, batch.position, theta_np, i,
                        cfg.window, labels=frozen.labels))
                except ca.EmptyAuxiliary:
                    aux_sets.append(None)
                    n_empty += 1
            frozen.aux_sets = aux_sets
            frozen.n_empty_aux = n_empty
        proj = ca.project(model.ca, features)
        scored_features = ca.augment_all(model.ca, features, proj, frozen.aux_sets)
    else:
        proj = None
        scored_features = features

    scores = model.head.score(scored_features)

    # --- ranking loss ---
    rank_terms: list[Tensor] = []
    if cfg.mode in ("coa", "ccanet"):
        if first_pass:
            frozen.rank_pairs = []
            for local, ds_idx in enumerate(batch.movie_ids):
                off = batch.offsets[local]
                n_m = batch.offsets[local + 1] - off
                pair_rng = rngmod.stream(cfg.seed, "pairs", epoch, ds_idx)
                frozen.rank_pairs.append(coatt.sample_pairs(
                    n_m, att_cols[local].value, cfg.pairs_per_shot * n_m,
                    cfg.lam, pair_rng, offset=off))
        for pairs in frozen.rank_pairs:
            if cfg.mode == "coa" and cfg.train_coattention_proj:
                rank_terms.append(_gated_rank_loss(scores, pairs, theta))
            else:
                rank_terms.append(coatt.coattention_rank_loss(scores, pairs))
    else:
        if first_pass:
            frozen.sup_pairs = []
            for local, ds_idx in enumerate(batch.movie_ids):
                off = batch.offsets[local]
                n_m = batch.offsets[local + 1] - off
                if cfg.mode in ("sup", "sup_ca"):
                    gt = dataset[ds_idx][0].ground_truth
                    pos = sorted(gt)
                    neg = [i for i in range(n_m) if i not in gt]
                else:
                    pos, neg = pseudo[ds_idx]
                pair_rng = rngmod.stream(cfg.seed, "negpairs", epoch, ds_idx)
                idx_i: list[int] = []
                idx_j: list[int] = []
                for i in pos:
                    if len(neg) <= cfg.negatives_per_positive:
                        chosen = list(neg)
                    else:
                        chosen = [neg[k] for k in pair_rng.choice(
                            len(neg), size=cfg.negatives_per_positive, replace=False)]
                    idx_i.extend(off + i for _ in chosen)
                    idx_j.extend(off + j for j in chosen)
                frozen.sup_pairs.append((idx_i, idx_j))
        for idx_i, idx_j in frozen.sup_pairs:
            rank_terms.append(_hinge_pair_loss(scores, idx_i, idx_j))

    l_rank = rank_terms[0] if len(rank_terms) == 1 else ad.sum_all(ad.vstack(rank_terms))

    # --- contrastive regularizer ---
    l_c = None
    n_degenerate = 0
    if cfg.augmented and cfg.contrastive_loss_enabled:
        result = ca.contrastive_loss(proj, theta, frozen.aux_sets,
                                     skip_zero_gate=cfg.mode in ("sup_ca", "pl_ca"))
        l_c = result.loss
        n_degenerate = len(result.degenerate)
        total = ad.add(l_rank, l_c)
    else:
        total = l_rank
    return _BatchLoss(total=total, l_rank=l_rank, l_c=l_c, frozen=frozen,
                      n_degenerate=n_degenerate)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: ModelParams
    adam: AdamState
    config: TrainConfig
    epoch: int

    @property
    def seed(self) -> int:
        return self.config.seed


def _validate_dataset(cfg: TrainConfig, dataset) -> int:
    if not dataset:
        raise ValueError("empty dataset")
    d_in = dataset[0][0].shots.shape[1]
    for movie, trailer in dataset:
        check_feature_matrix(movie.shots, f"movie {movie.movie_id}")
        if movie.shots.shape[1] != d_in:
            raise ValueError(f"movie {movie.movie_id}: feature dim "
                             f"{movie.shots.shape[1]} != {d_in}")
        if cfg.mode in LABELED_MODES and not movie.ground_truth:
            raise ValueError(f"mode {cfg.mode} needs ground truth, movie "
                             f"{movie.movie_id} has none")
        if cfg.uses_trailer:
            if trailer is None:
                raise ValueError(f"mode {cfg.mode} needs a trailer for movie "
                                 f"{movie.movie_id}")
            if trailer.shots.shape[1] != d_in:
                raise ValueError(f"trailer {trailer.trailer_id}: feature dim "
                                 f"{trailer.shots.shape[1]} != {d_in}")
    return d_in


def train(cfg: TrainConfig, dataset: list[tuple[MovieRecord, TrailerRecord | None]],
          resume: Checkpoint | None = None,
          on_epoch=None) -> tuple[Checkpoint, list[dict]]:
    """Run the configured mode over the dataset; returns checkpoint and logs.

    ``dataset`` is a list of (movie, trailer) pairs; trailers may be None for
    modes that never read them.  ``resume`` continues from a checkpoint saved
    at an epoch boundary, reproducing the uninterrupted trajectory exactly.
    """
    d_in = _validate_dataset(cfg, dataset)
    if resume is not None:
        ours = {k: v for k, v in cfg.to_dict().items() if k != "epochs"}
        theirs = {k: v for k, v in resume.config.to_dict().items() if k != "epochs"}
        if ours != theirs:
            raise ValueError("resume checkpoint was trained with a different config")
        model, adam, start_epoch = resume.model, resume.adam, resume.epoch
    else:
        model = init_model(cfg, d_in)
        adam = AdamState(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        start_epoch = 0

    pseudo = None
    if cfg.mode in ("pl", "pl_ca"):
        pseudo = [pseudo_label(m, t, cfg.pl_pos_frac, cfg.pl_neg_frac)
                  for m, t in dataset]

    params = model.parameters()
    shot_counts = [m.n_shots for m, _ in dataset]
    dtype = ad.DTYPES[cfg.precision]
    logs: list[dict] = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        e_rank = e_c = 0.0
        for movie_ids in make_batches(shot_counts, cfg.batch_shots, cfg.seed, epoch):
            batch = _stack_batch(dataset, movie_ids, dtype)
            with Tape() as tape:
                built = _build_batch_loss(cfg, model, dataset, batch, epoch, pseudo)
                total = float(built.total.value[0, 0])
                if not np.isfinite(total):
                    raise NonFiniteLoss(
                        f"epoch {epoch}, movies {movie_ids}: loss={total}, "
                        f"l_rank={float(built.l_rank.value[0, 0])}, "
                        f"l_c={float(built.l_c.value[0, 0]) if built.l_c is not None else 0.0}")
                tape.backward(built.total)
            if cfg.grad_clip > 0:
                ad.clip_grad_norm(params, cfg.grad_clip)
            adam.step(params)
            e_rank += float(built.l_rank.value[0, 0])
            e_c += float(built.l_c.value[0, 0]) if built.l_c is not None else 0.0
        entry = {"epoch": epoch, "l_rank": e_rank, "l_c": e_c,
                 "total": e_rank + e_c,
                 "wall_ms": (time.perf_counter() - t0) * 1000.0}
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return Checkpoint(model=model, adam=adam, config=cfg, epoch=cfg.epochs), logs


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _inference_aux_sets(n: int, window: int, theta: np.ndarray | None = None,
                        labels: np.ndarray | None = None
                        ) -> list[ca.AuxiliarySet | None]:
    """Auxiliary sets over a single movie's own shots.

    With a confidence signal (gates or labels): positives are the movie's own
    key-candidate shots, negatives its non-key temporal neighbors.  Without
    one: temporal neighbors only.
    """
    positions = np.arange(n)
    if labels is not None:
        is_pos, is_neg = labels == 1, labels == 0
    elif theta is not None:
        is_pos = theta >= 0.5
        is_neg = ~is_pos
    else:
        is_pos = is_neg = None
    out: list[ca.AuxiliarySet | None] = []
    for i in range(n):
        near = (np.abs(positions - i) <= window) & (positions != i)
        if is_pos is None:
            pos: tuple[int, ...] = ()
            neg = tuple(int(j) for j in np.flatnonzero(near))
        else:
            pos = tuple(int(j) for j in np.flatnonzero(is_pos & (positions != i)))
            neg = tuple(int(j) for j in np.flatnonzero(near & is_neg))
        if not pos and not neg:
            out.append(None)
        else:
            out.append(ca.AuxiliarySet(target_index=i, pos_indices=pos, neg_indices=neg))
    return out


def _augment_inference(cfg: TrainConfig, model: ModelParams, feats: Tensor,
                       movie: MovieRecord, trailer: TrailerRecord | None) -> Tensor:
    """Inference-time augmented features, mirroring the training construction."""
    n = movie.n_shots
    theta_np = None
    labels = None
    if cfg.mode == "ccanet" and trailer is not None:
        memory = coatt.build_memory(model.coatt, ad.constant(
            trailer.shots.astype(feats.value.dtype)))
        att = coatt.co_attention_scores(model.coatt, feats, memory,
                                        cfg.attention_metric).value[:, 0]
        conf = cfg.confidence()
        max_att = float(att.max())
        theta_np = np.array([ca.confidence_weight(float(a), max_att, conf) for a in att])
    elif cfg.mode == "pl_ca" and trailer is not None:
        pos, neg = pseudo_label(movie, trailer, cfg.pl_pos_frac, cfg.pl_neg_frac)
        labels = np.full(n, -1, dtype=np.int8)
        labels[pos] = 1
        labels[neg] = 0
    aux_sets = _inference_aux_sets(n, cfg.window, theta=theta_np, labels=labels)
    proj = ca.project(model.ca, feats)
    return ca.augment_all(model.ca, feats, proj, aux_sets)


def score_movie(checkpoint: Checkpoint, movie: MovieRecord,
                trailer: TrailerRecord | None = None) -> np.ndarray:
    """Deterministic per-shot scores for one movie.

    Augmented modes rebuild the auxiliary sets from the movie's own shots,
    with confidence from the paired trailer when the mode defines one, else
    temporal neighbors only.
    """
    cfg = checkpoint.config
    model = checkpoint.model
    feats = ad.constant(movie.shots.astype(ad.DTYPES[cfg.precision]))
    if not cfg.augmented:
        return model.head.score(feats).value[:, 0].copy()
    augmented = _augment_inference(cfg, model, feats, movie, trailer)
    return model.head.score(augmented).value[:, 0].copy()


def export_embeddings(checkpoint: Checkpoint, movie: MovieRecord,
                      trailer: TrailerRecord | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """(pre, post) augmentation features for one movie; augmented modes only."""
    cfg = checkpoint.config
    if not cfg.augmented:
        raise ValueError(f"mode {cfg.mode} does not augment features")
    feats = ad.constant(movie.shots.astype(ad.DTYPES[cfg.precision]))
    augmented = _augment_inference(cfg, checkpoint.model, feats, movie, trailer)
    return movie.shots.copy(), augmented.value.copy()


# ---------------------------------------------------------------------------
# checkpoint serialization ("CCKP" format)
# ---------------------------------------------------------------------------

def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    blob = name.encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
    fh.write(arr.astype("<f4", copy=False).tobytes())


def _read_entry(blob: bytes, off: int) -> tuple[str, np.ndarray, int]:
    (name_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    name = blob[off:off + name_len].decode("utf-8")
    off += name_len
    rows, cols = struct.unpack_from("<II", blob, off)
    off += 8
    count = rows * cols
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(rows, cols)
    off += 4 * count
    return name, arr, off


def save_checkpoint(path: str | Path, checkpoint: Checkpoint,
                    provenance: dict | None = None) -> None:
    model = checkpoint.model
    adam = checkpoint.adam
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            _write_entry(fh, p.name, p.value)
        fh.write(struct.pack("<I", 2 * len(params)))
        for p in params:
            _write_entry(fh, "m:" + p.name, adam.m[p.name])
            _write_entry(fh, "v:" + p.name, adam.v[p.name])
        fh.write(struct.pack("<Q", adam.t))
        tail = {"config": checkpoint.config.to_dict(), "epoch": checkpoint.epoch,
                "d_in": model.d_in}
        if provenance is not None:
            tail["provenance"] = provenance
        blob = json.dumps(tail, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise MagicMismatch(f"{path}: bad checkpoint magic {blob[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise MagicMismatch(f"{path}: unsupported checkpoint version {version}")
    off = 8
    try:
        (n_params,) = struct.unpack_from("<I", blob, off)
        off += 4
        values: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            name, arr, off = _read_entry(blob, off)
            values[name] = arr
        (n_adam,) = struct.unpack_from("<I", blob, off)
        off += 4
        moments: dict[str, np.ndarray] = {}
        for _ in range(n_adam):
            name, arr, off = _read_entry(blob, off)
            moments[name] = arr
        (t,) = struct.unpack_from("<Q", blob, off)
        off += 8
        (tail_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        tail = json.loads(blob[off:off + tail_len].decode("utf-8"))
    except struct.error as exc:
        raise TruncatedFile(f"{path}: checkpoint ends early near offset {off}") from exc

    cfg = TrainConfig.from_dict(tail["config"])
    dtype = ad.DTYPES[cfg.precision]
    model = init_model(cfg, int(tail["d_in"]))
    params = model.parameters()
    for p in params:
        if p.name not in values:
            raise TruncatedFile(f"{path}: missing parameter entry {p.name!r}")
        if values[p.name].shape != p.value.shape:
            raise TruncatedFile(f"{path}: parameter {p.name!r} has shape "
                                f"{values[p.name].shape}, expected {p.value.shape}")
        p.value = values[p.name].astype(dtype)
        p.grad = np.zeros_like(p.value)
    adam = AdamState(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    adam.t = int(t)
    for p in params:
        adam.m[p.name] = moments["m:" + p.name].astype(dtype)
        adam.v[p.name] = moments["v:" + p.name].astype(dtype)
    return Checkpoint(model=model, adam=adam, config=cfg, epoch=int(tail["epoch"]))
