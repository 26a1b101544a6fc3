"""shotrank: weakly-supervised shot ranking from trailer/movie co-attention.

A numpy library that scores movie shots by how trailer-like they are.  The
supervision signal is the co-attention between a movie's shots and its
trailer's shots; features are augmented by contrastive attention over
cross-video key candidates and same-video neighbors.  Includes a tiny
reverse-mode autodiff engine, Adam, ranking metrics (AP / rank@N / top-k
mAP), a planted-signal synthetic data generator, and a CLI.
"""

__version__ = "0.1.0"

from .autodiff import (
    AdamState,
    FiniteDiffReport,
    Parameter,
    Tape,
    Tensor,
    finite_diff_check,
)
from .coattention import (
    CoAttentionParams,
    SoftLabelPair,
    build_memory,
    co_attention_scores,
    coattention_rank_loss,
    pair_weights,
    sample_pairs,
    supervised_rank_loss,
)
from .contrastive import (
    AuxiliarySet,
    ConfidenceParams,
    ContrastiveAttentionParams,
    attention_weights,
    augment_feature,
    build_auxiliary_set,
    confidence_weight,
    contrastive_loss,
)
from .data import (
    DatasetManifest,
    MovieRecord,
    ShotSpan,
    SyntheticSpec,
    TrailerRecord,
    aggregate_snippets_to_shots,
    generate_synthetic,
    load_dataset,
    load_feature_file,
    load_manifest,
    validate_manifest,
    write_dataset,
    write_feature_file,
)
from .evaluation import (
    EvalReport,
    average_precision,
    evaluate,
    merge_reports,
    rank_at_n,
    top5_map,
    tvsum_ground_truth,
)
from .gradcheck import run_gradient_checks
from .trainer import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    make_batches,
    pseudo_label,
    save_checkpoint,
    score_movie,
    train,
)
