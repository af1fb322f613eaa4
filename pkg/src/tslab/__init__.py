"""tslab: a desk-scale ablation laboratory for "LLM for time series" claims.

Backbone variants (pretrained/random transformer, linear, single attention,
single encoder layer, identity), four task pipelines (forecast, imputation,
anomaly detection, classification), reprogramming mechanisms (LayerNorm-only
finetuning, LoRA, text prototypes, additive decomposition, Mixer fusion), and
statistical diagnostics (Durbin-Watson, residual ACF, Wasserstein-1 bounds,
pseudo-alignment metrics).
"""

from .backbones import (
    Backbone,
    FreezePolicy,
    LoRALinear,
    MechanismSpec,
    Mixer,
    MixerSpec,
    PrototypeBank,
    SelfAttention,
    TrainableMask,
    VariantSpec,
    apply_freeze_policy,
    build_variant,
    forward,
    lora_wrap,
    mixer_fuse,
    select_prototypes,
)
from .checkpoints import (
    checkpoint_meta,
    load_checkpoint,
    load_into_backbone,
    pretrain_tiny,
    save_checkpoint,
)
from .data import (
    DecompositionTriple,
    ImputationMask,
    LinearEmbed,
    PatchTokens,
    SeriesTensor,
    WindowSet,
    decompose_additive,
    denormalize,
    instance_normalize,
    load_anomaly_labels,
    load_classification_manifest,
    load_dataset,
    make_imputation_mask,
    make_windows,
    patch_count,
    patch_features,
    patchify,
    split_bounds,
    standardize,
)
from .diagnostics import (
    AlignmentReport,
    BoundCheck,
    LinearChain,
    ResidualDiagnostics,
    aggregate_dw,
    alignment_report,
    check_reprogram_bound,
    durbin_watson,
    export_embeddings,
    knn_jaccard,
    lipschitz_upper,
    pooled_residual_acf,
    read_embeddings,
    residual_acf,
    sliced_wasserstein,
    spectral_norm,
    wasserstein1_1d,
    wasserstein1_exact,
)
from .errors import CheckpointError, ConfigurationError, IngestionError, UndefinedStatisticError
from .harness import (
    ExperimentConfig,
    PipelineModel,
    RunResult,
    compare_variants,
    run_experiment,
    tally_results_dir,
    tally_wins,
)
from .heads import (
    ClassifyHead,
    ForecastHead,
    MetricRecord,
    ReconstructHead,
    TaskConfig,
    anomaly_threshold,
    evaluate,
    masked_mse,
    point_adjust_flags,
    precision_recall_f1,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentReport", "Backbone", "BoundCheck", "CheckpointError", "ClassifyHead",
    "ConfigurationError", "DecompositionTriple", "ExperimentConfig", "ForecastHead",
    "FreezePolicy", "ImputationMask", "IngestionError", "LinearChain", "LinearEmbed",
    "LoRALinear", "MechanismSpec", "MetricRecord", "Mixer", "MixerSpec", "PatchTokens",
    "PipelineModel", "PrototypeBank", "ReconstructHead", "ResidualDiagnostics",
    "RunResult", "SelfAttention", "SeriesTensor", "TaskConfig", "TrainableMask",
    "UndefinedStatisticError", "VariantSpec", "WindowSet", "aggregate_dw",
    "alignment_report", "anomaly_threshold", "apply_freeze_policy", "build_variant",
    "checkpoint_meta", "check_reprogram_bound", "compare_variants",
    "decompose_additive", "denormalize", "durbin_watson", "evaluate", "export_embeddings",
    "forward", "instance_normalize", "knn_jaccard", "lipschitz_upper", "load_anomaly_labels",
    "load_checkpoint", "load_classification_manifest", "load_dataset", "load_into_backbone",
    "lora_wrap", "make_imputation_mask", "make_windows", "masked_mse", "mixer_fuse",
    "patch_count", "patch_features", "patchify", "point_adjust_flags", "pooled_residual_acf",
    "precision_recall_f1", "pretrain_tiny", "read_embeddings", "residual_acf",
    "run_experiment", "save_checkpoint", "select_prototypes", "sliced_wasserstein",
    "spectral_norm", "split_bounds", "standardize", "tally_results_dir", "tally_wins",
    "wasserstein1_1d", "wasserstein1_exact",
]
