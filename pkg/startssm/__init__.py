__version__ = '0.1'

from .ssm_keys import (
    SAMPLE_DIM,
    TOKEN_DIM,
    CHANNEL_DIM,
    STATE_DIM,
    DISCRETIZATION_ZOH,
    DISCRETIZATION_EULER,
    SCAN_SEQUENTIAL,
    SCAN_PARALLEL,
    VARIANT_START_M,
    VARIANT_START_X,
    VARIANT_START_MX,
    VARIANT_RANDOM_TOKEN,
    VARIANT_FULL_SEQUENCE,
    VARIANT_NONE,
    GAMMA_MEDIAN,
)

from .ssm_core import (
    SelectiveLayerParams,
    DiscretizedOperators,
    ScanCache,
    AlphaMatrix,
    project_params,
    discretize,
    scan_sequential,
    scan_parallel,
    materialize_alpha,
    s6_forward,
    s6_backward,
    save_params,
    load_params,
)

from .start_augment import (
    StyleStats,
    SaliencyMask,
    AugmentPolicy,
    AugmentRecord,
    style_stats,
    mix_styles,
    mix_styles_backward,
    saliency_m,
    saliency_x,
    top_p_mask,
    plan_start,
    apply_plan,
    apply_start,
)

from .domain_gap import (
    DomainGapReport,
    AccumulationTrace,
    gaussian_kernel,
    mmd2,
    make_feature_bank,
    to_mmd,
    matrix_domain_gaps,
    estimate_kappa_s,
    accumulation_trace,
)

from .synthetic import (
    SynthDGConfig,
    synth_dataset,
)

from .model import (
    ModelConfig,
    SelectiveClassifier,
    init_model,
    model_forward,
    model_backward,
    cross_entropy,
    save_model,
    load_model,
)

from .optim import (
    adamw_step,
    cosine_lr,
)

from .harness import (
    TrainConfig,
    run_lodo,
    run_ablation,
)

from .config import (
    ExperimentConfig,
    load_config,
)
