"""Two-arm survival curve estimation under a single-crossing constraint.

Fits both treatment arms' survival (or discrete-hazard) curves by constrained
nonparametric maximum likelihood with a profile search over the crossing
parameters, computes delayed-effect estimands, and provides bootstrap and
permutation inference plus a piecewise-exponential simulation harness.
"""

__version__ = "0.1.0"

from .constraints import (
    ConstraintSystem,
    CrossingParams,
    build_constraints,
    check_single_crossing,
    v_index,
)
from .data import (
    CAP,
    Cohort,
    EventGrid,
    StepSurvival,
    Subject,
    bin_followup,
    build_event_grid,
    kaplan_meier,
    read_cohort_csv,
)
from .estimands import (
    EstimandReport,
    avg_hazard_ratios,
    build_report,
    conditional_survival,
    milestone_diff,
    rmst,
    rrml,
    surv_at_crossing,
)
from .hazards import (
    DiscreteHazards,
    SmoothedHazards,
    build_hazard_constraints,
    scc_hazard_fit,
    smooth_hazards,
)
from .inference import (
    BootstrapResult,
    JointTestResult,
    joint_test_surv,
    joint_test_theta,
    permutation_test,
    stratified_bootstrap,
)
from .mle import (
    FitResult,
    SolverOptions,
    fit_conditional,
    fit_system,
    init_from_km,
    loglik,
)
from .profile import ProfileRow, SccFit, curves_from_fit, profile_loglik, scc_fit
from .simulation import (
    MseTable,
    PiecewiseExp,
    ScenarioSpec,
    StudyConfig,
    crossing_times,
    load_study_config,
    pwexp_survival,
    run_mse_study,
    sample,
    true_estimands,
)

__all__ = [name for name in dir() if not name.startswith("_")]
