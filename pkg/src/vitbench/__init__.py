"""Deterministic mini-ViT screening experiments on small image corpora.

The package is organized bottom-up: a reverse-mode tape (`autodiff`),
the transformer model and its checkpoint format (`vit`), image decoding
plus grouped stratified folds and augmentation (`data`), the training
loop with grids and replications (`training`), confusion metrics and
Welch tests (`stats`), class-activation maps (`gradcam`), the JSON
config schema (`config`), CSV/JSON emission (`reports`), and the
``vitbench`` CLI (`cli`).
"""

from .autodiff import Tape, Tensor, backward, grad_check
from .config import (
    DEFAULT_GRID,
    DEFAULT_WEIGHT_CASES,
    ExperimentConfig,
    config_json_bytes,
    dump_config,
    load_config,
    parse_config,
)
from .data import (
    AugmentPolicy,
    DatasetManifest,
    FoldPlan,
    Sample,
    augment_sample,
    bilinear_resize,
    build_manifest,
    decode_and_resize,
    decode_image,
    denormalize_image,
    make_folds,
    normalize_image,
    summarize_counts,
)
from .errors import (
    CheckpointConfigError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ClassMapError,
    ConfigError,
    ContractError,
    DatasetError,
    DecodeError,
    EmptyDatasetError,
    ImageFormatError,
    InsufficientDataError,
    InvalidCountsError,
    NumericError,
    ShapeError,
    StratificationError,
    VitbenchError,
)
from .gradcam import (
    FocusScores,
    Heatmap,
    RegionMask,
    cam_sidecar,
    focus_score,
    grad_cam_map,
    heat_color,
    mask_from_png,
    normalize_heatmap,
    rect_mask,
    render_overlay,
    upsample,
)
from .seeding import derive_seed, fnv1a64, mix64
from .stats import (
    ConfusionMatrix,
    MetricSet,
    SummaryCI,
    TTestReport,
    confusion,
    mean_ci,
    metrics,
    pairwise_table,
    summary_ci,
    t_cdf,
    t_critical,
    welch_test,
)
from .training import (
    AdamWState,
    ClassWeights,
    RunResult,
    TrainConfig,
    adamw_step,
    class_weights,
    load_images,
    lr_at_step,
    resubstitution_eval,
    run_grid,
    run_replications,
    train_one_run,
    weighted_ce_loss,
)
from .vit import (
    VitConfig,
    VitParams,
    init_params,
    load_params,
    param_count,
    patchify,
    predict,
    save_params,
    vit_forward,
    vit_forward_features,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
