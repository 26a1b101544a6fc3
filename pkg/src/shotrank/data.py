"""Datasets: feature files, manifests, snippet aggregation, synthetic data.

Feature file format (all integers little-endian):

    bytes 0..3   magic  b"CCAF"
    bytes 4..7   u32 version (currently 1)
    bytes 8..11  u32 rows
    bytes 12..15 u32 cols
    bytes 16..   rows*cols IEEE-754 float32 values, row-major, no padding,
                 nothing after the payload

A dataset manifest is a JSON object::

    {"feature_dim": int,
     "pairs": [{"movie_id": str, "movie": path, "trailer": path,
                "ground_truth": path-or-null}]}

where paths are resolved relative to the manifest's directory and the
ground-truth file is a JSON array of key-moment shot indices.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import (
    DegenerateSpec,
    EmptyShot,
    MagicMismatch,
    NonFiniteValue,
    TruncatedFile,
)

FEATURE_MAGIC = b"CCAF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def check_feature_matrix(arr: np.ndarray, what: str = "feature matrix") -> np.ndarray:
    """Validate the (rows >= 1, cols >= 1, finite) invariants; returns arr."""
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{what}: expected a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise NonFiniteValue(f"{what}: non-finite value at flat index {bad}")
    return arr


def write_feature_file(path: str | Path, matrix: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(matrix, dtype=np.float32))
    check_feature_matrix(arr)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4", copy=False).tobytes())


def load_feature_file(path: str | Path) -> np.ndarray:
    """Read a feature file into a float32 matrix, verifying every header field."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedFile(f"{path}: file ends at offset {len(blob)}, header needs {_HEADER.size}")
    magic, version, rows, cols = _HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise MagicMismatch(f"{path}: bad magic {magic!r} at offset 0")
    if version != FEATURE_VERSION:
        raise MagicMismatch(f"{path}: unsupported version {version} at offset 4")
    if rows < 1 or cols < 1:
        raise MagicMismatch(f"{path}: header declares empty matrix {rows}x{cols} at offset 8")
    expected = _HEADER.size + 4 * rows * cols
    if len(blob) < expected:
        raise TruncatedFile(f"{path}: payload ends at offset {len(blob)}, expected {expected}")
    if len(blob) > expected:
        raise TruncatedFile(f"{path}: {len(blob) - expected} trailing bytes at offset {expected}")
    arr = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=_HEADER.size)
    arr = arr.astype(np.float32).reshape(rows, cols)
    finite = np.isfinite(arr)
    if not finite.all():
        bad = int(np.flatnonzero(~finite.ravel())[0])
        raise NonFiniteValue(f"{path}: non-finite value at byte offset {_HEADER.size + 4 * bad}")
    return arr


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ShotSpan:
    """Temporal extent of one shot; end_frame is exclusive."""

    shot_index: int
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if self.start_frame >= self.end_frame:
            raise ValueError(f"shot {self.shot_index}: empty span "
                             f"[{self.start_frame}, {self.end_frame})")

    @property
    def frames(self) -> int:
        return self.end_frame - self.start_frame


def check_spans(spans: list[ShotSpan], what: str = "spans") -> None:
    """Spans must be sorted by start_frame and non-overlapping."""
    for prev, cur in zip(spans, spans[1:]):
        if cur.start_frame < prev.end_frame:
            raise ValueError(f"{what}: span {cur.shot_index} overlaps span {prev.shot_index}")


@dataclass(frozen=True, eq=False)
class MovieRecord:
    movie_id: str
    shots: np.ndarray
    spans: tuple[ShotSpan, ...] | None = None
    ground_truth: frozenset[int] | None = None

    def __post_init__(self):
        check_feature_matrix(self.shots, f"movie {self.movie_id}")
        self.shots.flags.writeable = False
        if self.ground_truth is not None:
            for i in self.ground_truth:
                if not 0 <= i < self.shots.shape[0]:
                    raise ValueError(f"movie {self.movie_id}: ground-truth index {i} "
                                     f"out of range for {self.shots.shape[0]} shots")
        if self.spans is not None:
            if len(self.spans) != self.shots.shape[0]:
                raise ValueError(f"movie {self.movie_id}: {len(self.spans)} spans for "
                                 f"{self.shots.shape[0]} shots")
            check_spans(list(self.spans), f"movie {self.movie_id}")

    @property
    def n_shots(self) -> int:
        return self.shots.shape[0]


@dataclass(frozen=True, eq=False)
class TrailerRecord:
    trailer_id: str
    shots: np.ndarray

    def __post_init__(self):
        check_feature_matrix(self.shots, f"trailer {self.trailer_id}")
        self.shots.flags.writeable = False

    @property
    def n_shots(self) -> int:
        return self.shots.shape[0]


@dataclass(frozen=True)
class ManifestEntry:
    movie_id: str
    movie: Path
    trailer: Path
    ground_truth: Path | None


@dataclass(frozen=True)
class DatasetManifest:
    feature_dim: int
    pairs: tuple[ManifestEntry, ...]


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent
    entries = []
    for item in doc["pairs"]:
        gt = item.get("ground_truth")
        entries.append(ManifestEntry(
            movie_id=item["movie_id"],
            movie=base / item["movie"],
            trailer=base / item["trailer"],
            ground_truth=(base / gt) if gt else None,
        ))
    return DatasetManifest(feature_dim=int(doc["feature_dim"]), pairs=tuple(entries))


def load_pair(entry: ManifestEntry) -> tuple[MovieRecord, TrailerRecord]:
    movie_feats = load_feature_file(entry.movie)
    trailer_feats = load_feature_file(entry.trailer)
    gt = None
    if entry.ground_truth is not None:
        gt = frozenset(int(i) for i in json.loads(Path(entry.ground_truth).read_text()))
    movie = MovieRecord(movie_id=entry.movie_id, shots=movie_feats, ground_truth=gt)
    trailer = TrailerRecord(trailer_id=entry.movie_id, shots=trailer_feats)
    return movie, trailer


def load_dataset(manifest: DatasetManifest) -> list[tuple[MovieRecord, TrailerRecord]]:
    return [load_pair(e) for e in manifest.pairs]


def load_spans_file(path: str | Path) -> list[ShotSpan]:
    """Read a JSON spans file: [{"shot_index", "start_frame", "end_frame"}, ...]."""
    doc = json.loads(Path(path).read_text())
    spans = [ShotSpan(int(d["shot_index"]), int(d["start_frame"]), int(d["end_frame"]))
             for d in doc]
    check_spans(spans, str(path))
    return spans


# ---------------------------------------------------------------------------
# manifest validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    file: str
    row: int | None
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, file: str, row: int | None, message: str) -> None:
        self.violations.append(Violation(file, row, message))


def validate_manifest(manifest: DatasetManifest) -> ValidationReport:
    """Check every referenced file; violations are report entries, not errors."""
    report = ValidationReport()
    for entry in manifest.pairs:
        movie = trailer = None
        try:
            movie = load_feature_file(entry.movie)
        except Exception as exc:
            report.add(str(entry.movie), None, str(exc))
        try:
            trailer = load_feature_file(entry.trailer)
        except Exception as exc:
            report.add(str(entry.trailer), None, str(exc))
        if movie is not None and movie.shape[1] != manifest.feature_dim:
            report.add(str(entry.movie), None,
                       f"feature_dim {movie.shape[1]} != manifest {manifest.feature_dim}")
        if trailer is not None and trailer.shape[1] != manifest.feature_dim:
            report.add(str(entry.trailer), None,
                       f"feature_dim {trailer.shape[1]} != manifest {manifest.feature_dim}")
        if (movie is not None and trailer is not None
                and movie.shape[1] != trailer.shape[1]):
            report.add(str(entry.trailer), None,
                       f"trailer cols {trailer.shape[1]} != movie cols {movie.shape[1]}")
        if entry.ground_truth is not None:
            try:
                indices = json.loads(Path(entry.ground_truth).read_text())
            except Exception as exc:
                report.add(str(entry.ground_truth), None, str(exc))
                continue
            if movie is not None:
                for pos, i in enumerate(indices):
                    if not isinstance(i, int) or not 0 <= i < movie.shape[0]:
                        report.add(str(entry.ground_truth), pos,
                                   f"index {i} out of range for {movie.shape[0]} shots")
    return report


# ---------------------------------------------------------------------------
# snippet -> shot aggregation
# ---------------------------------------------------------------------------

@dataclass
class AggregationResult:
    features: np.ndarray          # one row per kept shot
    shot_indices: list[int]       # original indices of kept shots
    empty_shots: list[int]        # shots that received no snippet
    assignments: list[list[int]]  # snippet indices per kept shot


def aggregate_snippets_to_shots(snippets: np.ndarray,
                                snippet_spans: list[ShotSpan],
                                shot_spans: list[ShotSpan],
                                on_empty: str = "drop") -> AggregationResult:
    """Average snippet features into shot features.

    A snippet belongs to a shot iff strictly more than 70% of its frames lie
    inside the shot; the comparison is exact on frame counts
    (covered * 10 > total * 7), so a 70.0% overlap is NOT assigned.

    on_empty: "drop" removes shots without snippets (recorded in the result),
    "zero" keeps them as zero rows, "error" raises EmptyShot.
    """
    if on_empty not in ("drop", "zero", "error"):
        raise ValueError(f"on_empty: {on_empty!r}")
    snippets = np.asarray(snippets)
    if len(snippet_spans) != snippets.shape[0]:
        raise ValueError(f"{len(snippet_spans)} snippet spans for {snippets.shape[0]} rows")
    check_spans(shot_spans, "shot spans")

    assigned: list[list[int]] = [[] for _ in shot_spans]
    for si, span in enumerate(snippet_spans):
        if span.frames < 1:
            raise ValueError(f"snippet {si}: covers no frames")
        for shot_pos, shot in enumerate(shot_spans):
            covered = min(span.end_frame, shot.end_frame) - max(span.start_frame, shot.start_frame)
            if covered > 0 and covered * 10 > span.frames * 7:
                assigned[shot_pos].append(si)
                break

    rows: list[np.ndarray] = []
    kept: list[int] = []
    empty: list[int] = []
    kept_assignments: list[list[int]] = []
    for shot_pos, (shot, members) in enumerate(zip(shot_spans, assigned)):
        if not members:
            empty.append(shot.shot_index)
            if on_empty == "error":
                raise EmptyShot(f"shot {shot.shot_index} received no snippets")
            if on_empty == "zero":
                rows.append(np.zeros(snippets.shape[1], dtype=snippets.dtype))
                kept.append(shot.shot_index)
                kept_assignments.append([])
            continue
        rows.append(snippets[members].mean(axis=0))
        kept.append(shot.shot_index)
        kept_assignments.append(members)

    features = (np.stack(rows) if rows
                else np.zeros((0, snippets.shape[1]), dtype=snippets.dtype))
    return AggregationResult(features=features, shot_indices=kept,
                             empty_shots=empty, assignments=kept_assignments)


# ---------------------------------------------------------------------------
# synthetic data with planted key moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_movies: int
    shots_per_movie: int
    feature_dim: int
    key_rate: float = 0.06
    noise_sigma: float = 1.0
    trailer_fraction_of_keys: float = 0.5
    seed: int = 0
    n_distractors: int = 3

    def __post_init__(self):
        if not 0 < self.key_rate < 1:
            raise ValueError(f"key_rate must be in (0, 1), got {self.key_rate}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 < self.trailer_fraction_of_keys <= 1:
            raise ValueError("trailer_fraction_of_keys must be in (0, 1]")
        if self.n_distractors < 2:
            raise ValueError("need at least 2 distractor centroids")


def _unit_sphere(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[MovieRecord], list[TrailerRecord]]:
    """Plant a shared key centroid per domain and per-movie key shots around it.

    Key shots of every movie are noisy copies of one domain-level centroid, the
    remaining shots sit around ``n_distractors`` domain-level distractor
    centroids, and each trailer re-noises a sampled fraction of its movie's key
    shots.  Centroids live on the unit sphere and ``noise_sigma`` is the
    expected noise norm relative to them (per-component std is
    noise_sigma / sqrt(feature_dim)), so the cluster geometry does not depend
    on the feature dimension.  Fully deterministic in ``spec.seed``.
    """
    n_keys = round(spec.key_rate * spec.shots_per_movie)
    if n_keys == 0:
        raise DegenerateSpec(
            f"key_rate {spec.key_rate} x {spec.shots_per_movie} shots rounds to 0 keys")
    n_trailer = max(1, round(spec.trailer_fraction_of_keys * n_keys))
    sigma = spec.noise_sigma / np.sqrt(spec.feature_dim)

    domain_rng = rngmod.stream(spec.seed, "synthetic", "domain")
    key_centroid = _unit_sphere(domain_rng, 1, spec.feature_dim)[0]
    distractors = _unit_sphere(domain_rng, spec.n_distractors, spec.feature_dim)

    movies: list[MovieRecord] = []
    trailers: list[TrailerRecord] = []
    for mi in range(spec.n_movies):
        mrng = rngmod.stream(spec.seed, "synthetic", "movie", mi)
        key_idx = np.sort(mrng.choice(spec.shots_per_movie, size=n_keys, replace=False))
        which = mrng.integers(0, spec.n_distractors, size=spec.shots_per_movie)
        feats = distractors[which].copy()
        feats[key_idx] = key_centroid
        feats += sigma * mrng.standard_normal(feats.shape)

        # every key shot's clean value is the shared centroid, so "re-noising a
        # fraction of the key shots" is the centroid plus fresh noise
        trng = rngmod.stream(spec.seed, "synthetic", "trailer", mi)
        trailer_feats = np.tile(key_centroid, (n_trailer, 1))
        trailer_feats = trailer_feats + sigma * trng.standard_normal(trailer_feats.shape)

        movies.append(MovieRecord(
            movie_id=f"movie_{mi:03d}",
            shots=feats.astype(np.float32),
            ground_truth=frozenset(int(i) for i in key_idx),
        ))
        trailers.append(TrailerRecord(
            trailer_id=f"movie_{mi:03d}",
            shots=trailer_feats.astype(np.float32),
        ))
    return movies, trailers


# ---------------------------------------------------------------------------
# writing datasets to disk
# ---------------------------------------------------------------------------

def write_dataset(out_dir: str | Path,
                  movies: list[MovieRecord],
                  trailers: list[TrailerRecord],
                  feature_dim: int,
                  manifest_name: str = "manifest.json",
                  provenance: dict | None = None,
                  include_ground_truth: bool = True) -> Path:
    """Write feature files plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for movie, trailer in zip(movies, trailers):
        movie_file = f"{movie.movie_id}.movie.ccaf"
        trailer_file = f"{movie.movie_id}.trailer.ccaf"
        write_feature_file(out / movie_file, movie.shots)
        write_feature_file(out / trailer_file, trailer.shots)
        gt_file = None
        if include_ground_truth and movie.ground_truth is not None:
            gt_file = f"{movie.movie_id}.gt.json"
            (out / gt_file).write_text(json.dumps(sorted(movie.ground_truth)))
        pairs.append({"movie_id": movie.movie_id, "movie": movie_file,
                      "trailer": trailer_file, "ground_truth": gt_file})
    doc: dict = {"feature_dim": feature_dim, "pairs": pairs}
    if provenance is not None:
        doc["provenance"] = provenance
    manifest_path = out / manifest_name
    manifest_path.write_text(json.dumps(doc, indent=2))
    return manifest_path
