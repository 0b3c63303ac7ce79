"""Multi-period exploratory mean-variance asset-liability management in a
two-regime switching market: simulation, filtering, closed-form policies,
policy improvement, actor-critic learning, and evaluation."""

from .closed_form import (
    GaussianPolicy,
    ProblemSpec,
    bellman_residual,
    f_terms,
    optimal_policy,
    suboptimal_policy,
    value_function,
)
from .filtering import (
    MomentSchedule,
    MomentSet,
    expected_regime_signal,
    expectation_schedule,
    filter_path,
    filtered_moments,
    filtered_schedule,
    regime_schedule,
    update_filter,
)
from .improvement import (
    InitialPolicyFamily,
    IteratedPolicy,
    gaussian_entropy_min,
    improve_once,
    iterate_to_convergence,
)
from .market import (
    Episode,
    MarketModel,
    RegimeChain,
    ReturnSpec,
    sample_returns,
    sample_skewed_t,
    simulate_episode,
    step_regime,
    step_surplus,
    stream,
)
from .rl import (
    ActorParams,
    CriticParams,
    Hyperparams,
    TrainState,
    actor_sample,
    critic_value,
    martingale_loss,
    ml_gradients,
    policy_entropy,
    policy_gradient,
    train,
    update_lagrange,
)
from .evaluate import EvalReport, compare_table, out_of_sample

__all__ = [name for name in dir() if not name.startswith("_")]
