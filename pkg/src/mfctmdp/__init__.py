"""Mean-field control of continuous-time Markov decision processes.

N-agent simulation, exact finite-N dynamic programming, the deterministic
mean-field limit and its optimization, plus scripted studies.
"""
from ._backend import USE_NUMBA, backend_name
from .errors import *  # noqa: F401,F403
from .exact import (
    SimplexLattice,
    ValueTable,
    bellman_operator,
    enumerate_lattice,
    finite_horizon_solve,
    policy_evaluation,
    stationary_policy_value,
    value_iteration,
)
from .limit import (
    LimitTrajectory,
    OptimizeResult,
    adjoint_integrate,
    integrate_limit,
    integrate_limit_feedback,
    objective_F,
    optimize_direct,
    optimize_switching,
    pontryagin_residual,
)
from .model import (
    ActionGrid,
    EmpiricalMeasure,
    ModelSpec,
    RelaxedControlPath,
    StateSpace,
    ValidationReport,
    lift_policy,
    measure_transition,
    round_measure,
    validate_assumptions,
)
from .models import MODEL_NAMES, initial_measure, registry_get
from .simulate import (
    Feedback,
    JointPolicy,
    JumpAdapted,
    MCResult,
    OpenLoop,
    Trajectory,
    discounted_reward,
    martingale_residual,
    monte_carlo_value,
    simulate,
    simulate_joint,
    system_rates,
)

__version__ = "0.1.0"
