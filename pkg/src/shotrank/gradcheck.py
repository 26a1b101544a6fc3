"""Finite-difference verification of every loss term on a toy batch.

Each named check freezes the discrete structure of the loss (pair weights
and signs, gate thresholds, auxiliary membership) exactly as the optimizer
does, then compares analytic gradients against central differences in
float64.  This is both a library entry point and the backing of the CLI
``grad-check`` command.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import coattention as coatt
from . import contrastive as cattn
from . import data as datamod
from . import rng as rngmod
from . import trainer as trainmod
from .autodiff import FiniteDiffReport, finite_diff_check


def toy_dataset(seed: int = 0, n_movies: int = 4, shots_per_movie: int = 8,
                d_in: int = 16):
    spec = datamod.SyntheticSpec(
        n_movies=n_movies, shots_per_movie=shots_per_movie, feature_dim=d_in,
        key_rate=0.25, noise_sigma=0.5, trailer_fraction_of_keys=1.0, seed=seed)
    movies, trailers = datamod.generate_synthetic(spec)
    return list(zip(movies, trailers))


def _toy_config(mode: str, seed: int, d_in: int) -> trainmod.TrainConfig:
    # hidden width kept small so full-stencil checks stay fast
    return trainmod.TrainConfig(mode=mode, seed=seed, d=d_in, hidden=8,
                                precision="f64", epochs=1)


def _batch_loss_fn(cfg, model, dataset, part: str):
    """Loss closure reusing the frozen batch structure across evaluations."""
    batch = trainmod._stack_batch(dataset, list(range(len(dataset))),
                                  ad.DTYPES[cfg.precision])
    pseudo = None
    if cfg.mode in ("pl", "pl_ca"):
        pseudo = [trainmod.pseudo_label(m, t, cfg.pl_pos_frac, cfg.pl_neg_frac)
                  for m, t in dataset]
    holder: dict = {}

    def fn():
        built = trainmod._build_batch_loss(cfg, model, dataset, batch, 0, pseudo,
                                           holder.get("frozen"))
        holder["frozen"] = built.frozen
        return getattr(built, part)

    return fn


def run_gradient_checks(seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                        d_in: int = 16, n_movies: int = 4,
                        shots_per_movie: int = 8) -> dict[str, FiniteDiffReport]:
    """FD-check the ranking losses, attention, augmentation, gates, regularizer,
    and the combined objective; returns one report per check."""
    dataset = toy_dataset(seed, n_movies, shots_per_movie, d_in)
    results: dict[str, FiniteDiffReport] = {}

    # plain hinge ranking on annotations
    cfg = _toy_config("sup", seed, d_in)
    model = trainmod.init_model(cfg, d_in)
    fn = _batch_loss_fn(cfg, model, dataset, "total")
    results["rank_hinge"] = finite_diff_check(fn, model.parameters(), h, tol)

    # soft-label weighted hinge (co-attention pairs, weights/signs frozen)
    cfg = _toy_config("coa", seed, d_in)
    model = trainmod.init_model(cfg, d_in)
    fn = _batch_loss_fn(cfg, model, dataset, "total")
    results["rank_soft_label"] = finite_diff_check(fn, model.parameters(), h, tol)

    # attention weights: random linear functional of the softmax rows
    cfg = _toy_config("ccanet", seed, d_in)
    model = trainmod.init_model(cfg, d_in)
    feats = np.concatenate([m.shots for m, _ in dataset]).astype(np.float64)
    crng = rngmod.stream(seed, "gradcheck", "coeffs")
    targets = [i for i in range(0, feats.shape[0], 3)][:6]
    aux = trainmod._inference_aux_sets(feats.shape[0], window=4,
                                       theta=crng.uniform(size=feats.shape[0]))
    target_sets = [(i, aux[i]) for i in targets if aux[i] is not None]
    coeffs = {i: crng.standard_normal((1, len(s.members))) for i, s in target_sets}

    def attention_fn():
        parts = []
        for i, s in target_sets:
            x_row = ad.constant(feats[i][None, :])
            aux_feats = ad.constant(feats[np.asarray(s.members)])
            weights = cattn.attention_weights(model.ca, x_row, aux_feats)
            parts.append(ad.sum_all(ad.mul(weights, ad.constant(coeffs[i]))))
        return ad.sum_all(ad.vstack(parts))

    results["attention_weights"] = finite_diff_check(
        attention_fn, [model.ca.w_q, model.ca.w_k], h, tol)

    # feature augmentation: random linear functional of the augmented batch
    aug_sets = [aux[i] for i in range(feats.shape[0])]
    f_coeffs = crng.standard_normal((feats.shape[0], d_in + cfg.d))

    def augment_fn():
        features = ad.constant(feats)
        proj = cattn.project(model.ca, features)
        augmented = cattn.augment_all(model.ca, features, proj, aug_sets)
        return ad.sum_all(ad.mul(augmented, ad.constant(f_coeffs)))

    results["feature_augmentation"] = finite_diff_check(
        augment_fn, model.ca.parameters(), h, tol)

    # confidence gates: sum of the gate column, thresholds frozen
    conf = cfg.confidence()
    max_att_holder: dict = {}

    def gates_fn():
        cols = []
        for movie, trailer in dataset:
            t = ad.constant(trailer.shots.astype(np.float64))
            x = ad.constant(movie.shots.astype(np.float64))
            att = coatt.co_attention_scores(
                model.coatt, x, coatt.build_memory(model.coatt, t))
            key = movie.movie_id
            if key not in max_att_holder:
                max_att_holder[key] = float(att.value.max())
            cols.append(cattn.confidence_weights(att, max_att_holder[key], conf))
        return ad.sum_all(ad.vstack(cols))

    results["confidence_gate"] = finite_diff_check(
        gates_fn, [model.coatt.w_shared], h, tol)

    # contrastive regularizer in isolation (gates recomputed, membership frozen)
    cfg6 = _toy_config("ccanet", seed, d_in)
    model6 = trainmod.init_model(cfg6, d_in)
    fn = _batch_loss_fn(cfg6, model6, dataset, "l_c")
    results["contrastive_regularizer"] = finite_diff_check(
        fn, [model6.coatt.w_shared, model6.ca.w_q, model6.ca.w_k], h, tol)

    # the combined objective, every parameter
    cfg8 = _toy_config("ccanet", seed, d_in)
    model8 = trainmod.init_model(cfg8, d_in)
    fn = _batch_loss_fn(cfg8, model8, dataset, "total")
    results["combined_objective"] = finite_diff_check(fn, model8.parameters(), h, tol)

    return results
