"""Preview multitask-finetuning outcomes by merging per-task posteriors.

Train a posterior per task once, then estimate what joint finetuning with
any task weighting would give by merging the posteriors in closed form (or
by a short EM run for mixtures) -- sweeping the whole weight simplex costs
seconds instead of one training run per grid point.
"""

from .exceptions import (
    ChecksumError,
    ContractViolationError,
    DegenerateWeightsError,
    DivergenceError,
    GridMismatchError,
    InvalidPosteriorError,
    MissingArtifactError,
    NoInteriorModeError,
    PrecisionRepairError,
    StoreError,
    VersionMismatchError,
)
from .posteriors import (
    BetaNaturals,
    BetaPosterior,
    GaussianPosterior,
    MixturePosterior,
    NaturalParams,
    as_param_vector,
    beta_map,
    beta_update,
    from_natural,
    gaussian_surrogate,
    mixture_surrogate,
    to_natural,
)
from .merging import (
    EmConfig,
    MergeResult,
    SimplexWeights,
    em_objective,
    expfam_merge,
    hessian_weighted,
    hessian_weighted_ta,
    mog_em_merge,
    simple_average,
    task_arithmetic,
)
from .training import (
    PosteriorArtifact,
    Provenance,
    TrainerConfig,
    gd_train,
    multi_run_mixture,
    sq_grad_laplace,
    vi_diag_train,
    von_full_train,
)
from .tasks import (
    BALANCED_SPLIT,
    IMBALANCED_SPLIT,
    ClassSplitDataset,
    LseTask,
    SoftmaxSplitTask,
    WeightedTask,
    check_gradient,
    check_hessian,
    macro_accuracy_evaluator,
    make_class_split_tasks,
    make_lse_tasks,
    make_synthetic_digits,
    union_accuracy_evaluator,
    weighted_loss_evaluator,
)
from .idx import IdxFormatError, load_idx, load_mnist_dir, read_idx, write_idx
from .preview import (
    PreviewSurface,
    SimplexGrid,
    SweepReport,
    aligned_mse,
    best_alpha,
    build_report,
    joint_oracle_sweep,
    metric_histogram,
    preview_mse,
    preview_sweep,
    simplex_grid,
)
from .strategies import (
    STRATEGIES,
    HessianWeightedMerge,
    HessianWeightedTaMerge,
    MixtureEmMerge,
    SimpleAverageMerge,
    TaskArithmeticMerge,
    make_strategy,
)
from .store import ArtifactStore, JointCache, load_surface_csv, save_surface_csv
from .experiment import (
    ExperimentConfig,
    build_suite,
    default_config,
    load_config,
    run_compare,
    run_joint,
    run_report,
    run_sweep,
    run_train,
    save_config,
)

__version__ = "0.1.0"
