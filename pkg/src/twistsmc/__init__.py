"""Trust-region twisted SMC for finite Feynman-Kac models.

The library pairs a particle sampler (twisted kernels, residual weighting,
multinomial resampling) with exact enumeration/recursion oracles, a KL
trust-region dual solver with escort-path diagnostics, and a weighted
maximum-likelihood twist fitter, plus built-in toy models and a CLI.
"""

from .errors import (
    CapacityError,
    ConfigError,
    DegenerateWeightsError,
    DivergenceError,
    InvalidTrajectoryError,
    TwistSmcError,
)
from .fk import (
    DEFAULT_PATH_CAP,
    ExactOracle,
    FkModel,
    Trajectory,
    base_path_log_prob,
    enumerate_target,
    exact_log_Z,
    from_terminal_reward,
    potential_path_log,
    terminal_reward,
)
from .harness import (
    ExperimentConfig,
    IterationMetrics,
    TriTsmcResult,
    builtin_chain,
    builtin_masked_toy,
    compare_methods,
    exact_conditional_mean_rewards,
    tri_tsmc,
)
from .learn import (
    FitConfig,
    FitResult,
    TwistParams,
    fit_twist,
    loss_gradient,
    projection_error_bound_check,
    weighted_mle_loss,
)
from .optimal import (
    OptimalTwistResult,
    backward_recursion,
    soft_bellman_residual,
    zero_variance_check,
)
from .smc import (
    SmcOutput,
    best_of_n,
    ess,
    multinomial_resample,
    potential_smc_baseline,
    run_twisted_smc,
    sample_base_paths,
    sample_twisted_paths,
)
from .trust_region import (
    EscortDiagnostics,
    TrustRegionResult,
    annealing_beta_sequence,
    chi2_variance_identity_check,
    dual_objective,
    escort_diagnostics,
    escort_log_probs,
    exact_twisted_divergences,
    solve_dual,
    tempered_weights,
)
from .twist import (
    TwistFunction,
    TwistedModel,
    build_twisted,
    incremental_log_weights,
    one_hot_features,
    residual_log_weight,
    twisted_path_log_prob,
)

__version__ = "0.1.0"
