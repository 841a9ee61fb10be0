"""Online estimation of nonnegative functions in a reproducing kernel Hilbert
space: sparse pseudo-mirror descent with destructive matching-pursuit
compression, an online quasi-Newton mirror step over a fixed subspace, and a
hybrid of the two, with Poisson-process intensity estimation as the flagship
model."""

from .data import (
    PointStream,
    load_points_csv,
    make_multiclass_blobs,
    sample_inhomogeneous_ppp,
    sample_toy_stream,
    save_points_csv,
    toy_ground_truth_density,
)
from .harness import (
    ExperimentConfig,
    MetricsRecord,
    compute_rmse,
    compute_test_loss,
    config_from_dict,
    load_config,
    load_metrics_csv,
    run_experiment,
    write_metrics_csv,
)
from .kernels import (
    Dictionary,
    Kernel,
    eval_kernel,
    gram_matrix,
    kernel_matrix,
    kernel_vector,
    silverman_bandwidth,
)
from .komp import (
    AdaptiveBudget,
    BudgetPolicy,
    ConstantBudget,
    adaptive_budget_update,
    komp_prune,
    komp_prune_detailed,
    komp_prune_joint,
    removal_residual,
)
from .models import (
    KLRModel,
    PoissonModel,
    PseudoGradient,
    klr_gradient,
    klr_loss,
    klr_predict,
    make_klr_model,
    make_poisson_model,
    poisson_loss,
    poisson_pseudo_gradient_functional,
    poisson_pseudo_gradient_weights,
    verify_pseudo_gradient_property,
    weight_space_gradient,
)
from .optimizers import (
    DualAveragingState,
    EtaSchedule,
    HessianState,
    HybridConfig,
    HybridResult,
    KlrState,
    NumericalBreakdown,
    PmdState,
    QuasiNewtonState,
    SpppotState,
    dual_averaging_step,
    hybrid_run,
    init_dual_averaging_state,
    init_hessian_state,
    init_pmd_state,
    init_polk_state,
    init_quasi_newton_state,
    init_spppot_state,
    klr_spppot_step,
    pmd_step,
    polk_step,
    quasi_newton_dual_function,
    quasi_newton_step,
    sherman_morrison_update,
    spppot_step,
    state_from_json,
    state_to_json,
)
from .rkhs import (
    KL,
    SQUARED_NORM,
    DualFunction,
    MirrorMap,
    bregman_divergence,
    dual_function_from_json,
    dual_function_to_json,
    evaluate_dual,
    evaluate_dual_many,
    evaluate_primal,
    evaluate_primal_many,
    reset_saturation_events,
    rkhs_norm,
    rkhs_norm_diff,
    saturation_events,
    zero_dual_function,
)

__version__ = "0.1.0"
