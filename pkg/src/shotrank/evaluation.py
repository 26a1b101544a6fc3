"""Ranking metrics: AP, windowed AP (rank@N), top-k mAP, report aggregation.

All orderings are by descending score with ties broken by ascending index,
so every metric is deterministic.  rank@N partitions a movie's shots in
temporal order into consecutive windows of N, computes AP inside each window
that contains a positive, and averages; with N at least the movie length it
coincides with plain AP over the whole movie (rank@global).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ListTooShort, NoPositives, NoPositiveWindows


def _ranked_order(scores: np.ndarray) -> np.ndarray:
    # lexsort: last key dominates, so sort by -score then index
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def _check_lists(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape[0] != labels.shape[0]:
        raise ValueError(f"{scores.shape[0]} scores vs {labels.shape[0]} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    return scores, labels


def average_precision(scores, labels) -> float:
    """AP = (1/P) * sum over positive ranks k of precision@k."""
    scores, labels = _check_lists(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    ranked = labels[_ranked_order(scores)]
    hits = np.flatnonzero(ranked == 1)
    precision_at_hit = (np.arange(1, n_pos + 1)) / (hits + 1.0)
    return float(precision_at_hit.sum() / n_pos)


def rank_at_n(scores, labels, n: int, sliding: bool = False) -> float:
    """Mean AP over windows of n consecutive shots (temporal order).

    Windows without a positive are skipped; raises NoPositiveWindows when
    nothing is scoreable.  ``sliding`` switches from disjoint partitions to
    stride-1 windows (off by default).
    """
    if n < 2:
        raise ValueError(f"window size must be >= 2, got {n}")
    scores, labels = _check_lists(scores, labels)
    length = scores.shape[0]
    if sliding:
        starts = range(0, max(length - n, 0) + 1)
    else:
        starts = range(0, length, n)
    values = []
    for lo in starts:
        hi = min(lo + n, length)
        if labels[lo:hi].sum() > 0:
            values.append(average_precision(scores[lo:hi], labels[lo:hi]))
    if not values:
        raise NoPositiveWindows("no window contains a positive label")
    return float(np.mean(values))


def top5_map(ranked_lists, k: int = 5, topk_denominator: str = "all_positives") -> float:
    """Mean over videos of AP restricted to the top-k ranked items.

    With the default convention, positives ranked below k still count in the
    denominator; ``topk_denominator="capped"`` divides by min(P, k) instead.
    """
    if topk_denominator not in ("all_positives", "capped"):
        raise ValueError(f"topk_denominator: {topk_denominator!r}")
    ap_values = []
    for scores, labels in ranked_lists:
        scores, labels = _check_lists(scores, labels)
        if scores.shape[0] < k:
            raise ListTooShort(f"list of {scores.shape[0]} items, need >= {k}")
        n_pos = int(labels.sum())
        if n_pos == 0:
            raise NoPositives("top-k AP needs at least one positive")
        denom = n_pos if topk_denominator == "all_positives" else min(n_pos, k)
        ranked = labels[_ranked_order(scores)][:k]
        hits = np.flatnonzero(ranked == 1)
        ap = float((np.arange(1, hits.shape[0] + 1) / (hits + 1.0)).sum() / denom)
        ap_values.append(ap)
    return float(np.mean(ap_values))


def tvsum_ground_truth(frame_scores) -> np.ndarray:
    """Binary shot labels from frame-level scores.

    Shot score = mean of its frame scores; the top floor(n/2) shots are
    positive, ties resolved by ascending shot index.
    """
    shot_scores = []
    for i, frames in enumerate(frame_scores):
        frames = np.asarray(frames, dtype=np.float64).reshape(-1)
        if frames.shape[0] < 1:
            raise ValueError(f"shot {i} has no frame scores")
        shot_scores.append(frames.mean())
    shot_scores = np.asarray(shot_scores)
    n = shot_scores.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    labels[_ranked_order(shot_scores)[: n // 2]] = 1
    return labels


# ---------------------------------------------------------------------------
# dataset-level evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    config_hash: str
    seed: int
    metrics: tuple[str, ...]
    per_movie: dict[str, dict[str, float]] = field(default_factory=dict)
    averages: dict[str, float] = field(default_factory=dict)
    provenance: dict | None = None

    def to_dict(self) -> dict:
        doc = {"mode": self.mode, "config_hash": self.config_hash, "seed": self.seed,
               "metrics": list(self.metrics), "per_movie": self.per_movie,
               "averages": self.averages}
        if self.provenance is not None:
            doc["provenance"] = self.provenance
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(mode=doc["mode"], config_hash=doc["config_hash"],
                   seed=int(doc["seed"]), metrics=tuple(doc["metrics"]),
                   per_movie=doc["per_movie"], averages=doc["averages"],
                   provenance=doc.get("provenance"))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["movie_id", "metric", "value"])
            for movie_id, row in self.per_movie.items():
                for metric, value in row.items():
                    writer.writerow([movie_id, metric, repr(value)])


def _metric_value(name: str, scores: np.ndarray, labels: np.ndarray,
                  sliding: bool) -> float:
    if name in ("ap", "rank@global"):
        return average_precision(scores, labels)
    if name.startswith("rank@"):
        return rank_at_n(scores, labels, int(name.split("@", 1)[1]), sliding=sliding)
    raise ValueError(f"unknown metric {name!r}")


def evaluate(checkpoint, dataset,
             metrics: tuple[str, ...] = ("rank@10", "rank@20", "rank@global"),
             sliding: bool = False, provenance: dict | None = None) -> EvalReport:
    """Score every test movie and compute the requested metrics.

    ``dataset`` is a list of (movie, trailer) pairs; every movie needs ground
    truth.  Averages are plain means over movies.
    """
    from .trainer import score_movie  # local import to keep layering one-way

    report = EvalReport(mode=checkpoint.config.mode,
                        config_hash=checkpoint.config.config_hash(),
                        seed=checkpoint.config.seed, metrics=tuple(metrics),
                        provenance=provenance)
    for movie, trailer in dataset:
        if not movie.ground_truth:
            raise NoPositives(f"movie {movie.movie_id} has no ground truth")
        labels = np.zeros(movie.n_shots, dtype=np.int64)
        labels[sorted(movie.ground_truth)] = 1
        scores = score_movie(checkpoint, movie, trailer)
        report.per_movie[movie.movie_id] = {
            m: _metric_value(m, scores, labels, sliding) for m in metrics}
    for m in metrics:
        report.averages[m] = float(np.mean([row[m] for row in report.per_movie.values()]))
    return report


def merge_reports(reports: list[EvalReport]) -> dict:
    """Average report metrics per mode (for multi-split summaries)."""
    by_mode: dict[str, list[EvalReport]] = {}
    for r in reports:
        by_mode.setdefault(r.mode, []).append(r)
    table: dict[str, dict] = {}
    for mode, group in sorted(by_mode.items()):
        metrics = group[0].metrics
        table[mode] = {
            "n_reports": len(group),
            "averages": {m: float(np.mean([g.averages[m] for g in group]))
                         for m in metrics},
        }
    return {"modes": table}
