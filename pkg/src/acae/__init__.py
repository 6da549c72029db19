"""Context-aware person retrieval over per-image feature sets.

The package pairs an attention embedding head (intra-image, inter-image and
feed-forward stages over detection feature sets) with score fusion and
per-gallery-image rescaling for retrieval, an instance-matching loss plus a
per-image feature bank for training, a hand-written reverse-mode gradient
engine with a finite-difference validator, a synthetic co-traveler scenario
generator, and an evaluation harness (mAP / top-k, weight and subset
sweeps, k-reciprocal baseline, overhead microbenchmark).
"""

from .evalharness import (
    BenchReport,
    EvalProtocol,
    EvalReport,
    average_precision,
    bench_overhead,
    build_score_table,
    evaluate,
    metrics_from_table,
    rerank_search,
    sweep_lambda,
    sweep_subsets,
)
from .grad import (
    GradInstance,
    SupervisionConfig,
    grad_check,
    make_grad_instance,
    pair_loss,
    pair_loss_backward,
    sgd_step,
)
from .head import (
    UNLABELED,
    AcaeParams,
    AttentionTrace,
    ContextualEmbeddings,
    FeatureSet,
    acae_forward,
    final_transform,
    inter_attention,
    intra_attention,
)
from .linalg import LayerNormParams, LinearMap, layer_norm, matmul, softmax_rows
from .oim import ImageMemoryBank, OimState, appoint_pairs, init_oim_state, oim_loss
from .rerank import k_reciprocal_rerank
from .similarity import (
    FusionConfig,
    ScoredGallery,
    contextual_similarity,
    fuse,
    rescale_gallery,
    score_query,
)
from .synthdata import (
    ScenarioConfig,
    SyntheticDataset,
    export_dataset,
    generate,
    import_dataset,
)
from .train import TrainSchedule, load_checkpoint, save_checkpoint, train, training_step

__version__ = "0.1.0"
