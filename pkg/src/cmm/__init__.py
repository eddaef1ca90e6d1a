"""Cross-modal mapping for few-shot classification over cached embeddings.

Trains a residual linear map and text prototypes with cross-entropy plus a
hardest-negative triplet loss, fuses with frozen zero-shot scores, and
quantifies the image/text distribution gap with Gaussian KL and
Wasserstein-2 diagnostics.
"""

from . import errors
from .evaluator import (
    EvalReport,
    clip_scores,
    evaluate,
    flip_analysis,
    fuse_logits,
    grid_search_alpha,
    top1,
)
from .gap import (
    GaussianStats,
    compute_gap_report,
    gaussian_mle,
    kl_gaussian,
    similarity_stats,
    wasserstein2_gaussian,
)
from .losses import (
    LossConfig,
    cmm_scores,
    contrastive_diagnostic,
    cross_entropy,
    softmax_probs,
    total_loss,
    triplet_loss,
)
from .mapper import MapperParams, init_mapper, map_backward, map_forward
from .numerics import EigResult, eigh_sym, l2_normalize, pca_project, psd_sqrt
from .optim import OptimState, Schedule, adamw_step, lr_at
from .prototypes import TextPrototypes, build_text_prototypes
from .rng import SplitMix64
from .store import (
    EmbeddingCache,
    FewShotTask,
    SplitData,
    SynthConfig,
    load_cache,
    sample_fewshot,
    synth_generate,
    write_cache,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
