"""Actor-critic learners for the exploratory mean-variance problem.

The critic is a quadratic form in (wealth, liability) whose scalar weights are
exp/minus-exp/linear expansions of polynomial grids in (signal, time-to-go);
the actor is the Gaussian family implied by the shape of the optimal control,
with its own grids.  Policy evaluation fits the critic by stochastic gradient
steps on the martingale loss of single sampled episodes; the actor follows the
episode-based policy gradient; the constraint multiplier self-corrects every
few iterations from the recent terminal surpluses.

Three signal flavors share all code paths: the true regime label (complete
information), the regime-1 probability path (partial information with
filtering), and the expected-state signal (partial information without regime
learning).  Each learner trains and is deployed in the matching dynamics: the
real market for the complete-information learner, the filtered or
expectation-weighted observable dynamics otherwise.

Time-to-go inside the polynomial grids is measured in years
((horizon - t) * dt); with period counting the stated learning rates blow the
exponential expansions up immediately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .closed_form import GaussianPolicy, ProblemSpec
from .market import (
    Episode,
    MarketModel,
    deterministic_rates,
    regime_path,
    sample_return_paths,
    stream,
)

ALGO_FLAVORS = {
    "coemv": ("real", "regime"),
    "poemv1": ("filtered", "filtered_prob"),
    "poemv2": ("expectation", "expected_state"),
}

_CRITIC_GRIDS = ("theta1", "theta2", "theta3", "vartheta1", "vartheta2", "psi")
_ACTOR_GRIDS = ("phi1", "phi2", "phi3")


class DivergenceError(RuntimeError):
    """Raised when a training run produces non-finite parameters or states."""


@dataclass(frozen=True)
class CriticParams:
    """Coefficient grids of the parameterized objective, each (m+1, m)."""

    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray
    vartheta1: np.ndarray
    vartheta2: np.ndarray
    psi: np.ndarray
    m: int = 2

    @classmethod
    def zeros(cls, m: int = 2) -> "CriticParams":
        shape = (m + 1, m)
        return cls(*(np.zeros(shape) for _ in _CRITIC_GRIDS), m=m)

    def grids(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _CRITIC_GRIDS}


@dataclass(frozen=True)
class ActorParams:
    """Policy coefficient grids, each (m+1, m)."""

    phi1: np.ndarray
    phi2: np.ndarray
    phi3: np.ndarray
    m: int = 2

    @classmethod
    def zeros(cls, m: int = 2) -> "ActorParams":
        shape = (m + 1, m)
        return cls(*(np.zeros(shape) for _ in _ACTOR_GRIDS), m=m)

    def grids(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _ACTOR_GRIDS}


@dataclass(frozen=True)
class CriticGrads:
    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray
    vartheta1: np.ndarray
    vartheta2: np.ndarray
    psi: np.ndarray


@dataclass(frozen=True)
class ActorGrads:
    phi1: np.ndarray
    phi2: np.ndarray
    phi3: np.ndarray


@dataclass(frozen=True)
class Hyperparams:
    """Learning configuration; defaults mirror the reference experiments."""

    eta_theta: float = 1e-12
    eta_vartheta: float = 1e-12
    eta_psi: float = 1e-9
    eta_phi: float = 1e-9
    alpha: float = 1e-2
    n_avg: int = 10
    n_iter: int = 10_000
    dt: float = 1.0 / 252.0
    seed: int = 0
    m: int = 2
    batch_size: int = 1
    grad_clip: float | None = 1e6
    w0: float | None = None  # None: start at the target payoff
    expectation_signal: str = "expected_state"

    def __post_init__(self) -> None:
        for name in ("eta_theta", "eta_vartheta", "eta_psi", "eta_phi", "alpha", "dt"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.n_avg < 1 or self.n_iter < 0 or self.batch_size < 1 or self.m < 1:
            raise ValueError("n_avg/batch_size/m must be >= 1 and n_iter >= 0")


def features(signals, taus, m: int) -> np.ndarray:
    """Polynomial features signal^i * tau^j for i = 0..m, j = 1..m."""
    s = np.atleast_1d(np.asarray(signals, dtype=float))
    tau = np.atleast_1d(np.asarray(taus, dtype=float))
    s_pow = s[:, None] ** np.arange(m + 1)[None, :]
    t_pow = tau[:, None] ** np.arange(1, m + 1)[None, :]
    return s_pow[:, :, None] * t_pow[:, None, :]


def _expand_exp(grid: np.ndarray, feats: np.ndarray, name: str) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.exp(np.einsum("tij,ij->t", feats, grid))
    if not np.all(np.isfinite(out)):
        raise OverflowError(f"exponential expansion of grid {name} overflowed")
    return out


def _expand_linear(grid: np.ndarray, feats: np.ndarray) -> np.ndarray:
    return np.einsum("tij,ij->t", feats, grid)


@dataclass(frozen=True)
class _CriticExpansion:
    """Scalar critic weights along one feature path."""

    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray
    vartheta1: np.ndarray
    vartheta2: np.ndarray
    psi: np.ndarray

    def values(self, x, l, w: float) -> np.ndarray:
        wl = w + self.theta2 * l
        return (
            self.theta1 * x * x
            + self.vartheta1 * wl * x
            + wl * wl * self.vartheta2
            + self.theta2 * w * l
            + self.theta3 * l * l
            + self.psi
        )


def _expand_critic(feats: np.ndarray, critic: CriticParams) -> _CriticExpansion:
    return _CriticExpansion(
        theta1=_expand_exp(critic.theta1, feats, "theta1"),
        theta2=_expand_exp(critic.theta2, feats, "theta2"),
        theta3=_expand_exp(critic.theta3, feats, "theta3"),
        vartheta1=-_expand_exp(critic.vartheta1, feats, "vartheta1"),
        vartheta2=-_expand_exp(critic.vartheta2, feats, "vartheta2"),
        psi=_expand_linear(critic.psi, feats),
    )


def _expand_actor(feats: np.ndarray, actor: ActorParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ph1 = _expand_linear(actor.phi1, feats)
    ph2 = _expand_linear(actor.phi2, feats)
    ph3 = _expand_linear(actor.phi3, feats)
    if not (np.all(np.isfinite(ph2)) and np.all(np.isfinite(ph3))):
        raise OverflowError("actor grid expansion is not finite")
    return ph1, ph2, ph3


def _tau_grid(horizon: int, dt: float) -> np.ndarray:
    return (horizon - np.arange(horizon + 1)) * dt


def critic_value(
    t: int,
    x: float,
    l: float,
    signal: float,
    critic: CriticParams,
    w: float,
    horizon: int,
    dt: float,
) -> float:
    """Parameterized objective value at one state."""
    if not 0 <= t <= horizon:
        raise ValueError(f"t must lie in [0, {horizon}], got {t}")
    feats = features([signal], [(horizon - t) * dt], critic.m)
    return float(_expand_critic(feats, critic).values(np.array([x]), np.array([l]), w)[0])


def actor_mean_var(
    t: int,
    x: float,
    l: float,
    signal: float,
    critic: CriticParams,
    actor: ActorParams,
    w: float,
    horizon: int,
    dt: float,
) -> tuple[float, float]:
    feats = features([signal], [(horizon - t) * dt], actor.m)
    ce = _expand_critic(feats, critic)
    ph1, ph2, ph3 = _expand_actor(feats, actor)
    mean = ph1[0] * x - (ce.vartheta1[0] / ce.theta1[0]) * math.exp(ph2[0]) * (
        w + ce.theta2[0] * l
    )
    variance = math.exp(ph3[0]) / (2.0 * ce.theta1[0])
    return float(mean), float(variance)


def actor_sample(
    t: int,
    x: float,
    l: float,
    signal: float,
    critic: CriticParams,
    actor: ActorParams,
    w: float,
    horizon: int,
    dt: float,
    rng: np.random.Generator,
) -> float:
    mean, variance = actor_mean_var(t, x, l, signal, critic, actor, w, horizon, dt)
    return mean + math.sqrt(variance) * rng.standard_normal()


def policy_entropy(theta1: float, phi3: float) -> float:
    """Differential entropy of the parameterized Gaussian action law."""
    if theta1 <= 0.0:
        raise ValueError("theta1 must be positive")
    return -0.5 * math.log(theta1 / math.pi) + 0.5 * (phi3 + 1.0)


def episode_signal(episode: Episode, kind: str) -> np.ndarray:
    """Signal path the learners condition on, derived from the episode record."""
    if kind == "regime":
        return episode.regime.astype(float)
    if kind == "filtered_prob":
        return episode.p_hat
    if kind == "expected_state":
        return 2.0 - episode.p_hat
    raise ValueError(f"unknown signal kind {kind!r}")


def terminal_objective(x: float, l: float, w: float, d: float) -> float:
    return (x - l - w) ** 2 - (w - d) ** 2


@dataclass(frozen=True)
class _EpisodeArrays:
    """Everything the loss/gradient formulas need, in vector form (t = 0..T)."""

    x: np.ndarray
    l: np.ndarray
    action: np.ndarray
    feats: np.ndarray  # (T+1, m+1, m)


def _episode_arrays(episode: Episode, signal_kind: str, m: int, dt: float) -> _EpisodeArrays:
    sig = episode_signal(episode, signal_kind)
    taus = _tau_grid(episode.n_periods, dt)
    return _EpisodeArrays(
        x=episode.x, l=episode.l, action=episode.action, feats=features(sig, taus, m)
    )


def _entropy_path(ce: _CriticExpansion, ph3: np.ndarray) -> np.ndarray:
    return -0.5 * np.log(ce.theta1 / math.pi) + 0.5 * (ph3 + 1.0)


def _ml_deltas(
    ep: _EpisodeArrays,
    ce: _CriticExpansion,
    w: float,
    d: float,
    lam: float,
    dt: float,
    entropies: np.ndarray,
) -> np.ndarray:
    """J_T - J_t^(params) - lam * sum_{k>=t} H_k dt for t = 0..T-1."""
    values = ce.values(ep.x, ep.l, w)
    jt_true = terminal_objective(float(ep.x[-1]), float(ep.l[-1]), w, d)
    tail = np.cumsum((entropies * dt)[::-1])[::-1]
    return jt_true - values[:-1] - lam * tail


def _critic_coefficient_arrays(
    ep: _EpisodeArrays, ce: _CriticExpansion, w: float
) -> dict[str, np.ndarray]:
    """Per-entry partial derivatives of the critic value, sans the feature factor."""
    x, l = ep.x[:-1], ep.l[:-1]
    th1, th2, th3 = ce.theta1[:-1], ce.theta2[:-1], ce.theta3[:-1]
    v1, v2 = ce.vartheta1[:-1], ce.vartheta2[:-1]
    wl = w + th2 * l
    return {
        "theta1": x * x * th1,
        "theta2": (v1 * l * x + 2.0 * wl * v2 * l + w * l) * th2,
        "theta3": l * l * th3,
        "vartheta1": wl * x * v1,
        "vartheta2": wl * wl * v2,
        "psi": np.ones_like(x),
    }


def _ml_gradients_arrays(
    ep: _EpisodeArrays,
    critic: CriticParams,
    actor: ActorParams,
    w: float,
    d: float,
    lam: float,
    dt: float,
    entropies: np.ndarray | None,
) -> CriticGrads:
    ce = _expand_critic(ep.feats, critic)
    if entropies is None:
        _, _, ph3 = _expand_actor(ep.feats, actor)
        entropies = _entropy_path(ce, ph3)[:-1]
    deltas = _ml_deltas(ep, ce, w, d, lam, dt, np.asarray(entropies))
    coeffs = _critic_coefficient_arrays(ep, ce, w)
    feats = ep.feats[:-1]
    grads = {
        name: -dt * np.einsum("t,tij->ij", deltas * coeff, feats)
        for name, coeff in coeffs.items()
    }
    return CriticGrads(**grads)


def _policy_gradient_arrays(
    ep: _EpisodeArrays,
    critic: CriticParams,
    actor: ActorParams,
    w: float,
    lam: float,
    dt: float,
) -> ActorGrads:
    ce = _expand_critic(ep.feats, critic)
    ph1, ph2, ph3 = _expand_actor(ep.feats, actor)
    entropies = _entropy_path(ce, ph3)[:-1]
    td = np.diff(ce.values(ep.x, ep.l, w)) - lam * entropies * dt

    x, l, u = ep.x[:-1], ep.l[:-1], ep.action
    th1 = ce.theta1[:-1]
    gain = 2.0 * th1 * np.exp(-ph3[:-1])
    offset = -(ce.vartheta1[:-1] / th1) * np.exp(ph2[:-1]) * (w + ce.theta2[:-1] * l)
    resid = u - (ph1[:-1] * x + offset)
    feats = ep.feats[:-1]
    s1 = gain * resid * x
    s2 = gain * resid * offset
    s3 = 0.5 * gain * resid * resid - 0.5
    return ActorGrads(
        phi1=np.einsum("t,tij->ij", s1 * td, feats),
        phi2=np.einsum("t,tij->ij", s2 * td, feats),
        phi3=np.einsum("t,tij->ij", s3 * td - lam * 0.5 * dt, feats),
    )


def martingale_loss(
    episode: Episode,
    critic: CriticParams,
    actor: ActorParams,
    w: float,
    spec: ProblemSpec,
    dt: float,
    signal_kind: str = "filtered_prob",
    lam: float | None = None,
    entropies: np.ndarray | None = None,
) -> float:
    """Single-episode martingale loss of the critic under the given policy.

    ``entropies`` may supply the per-period policy entropies as recorded data
    (they are part of the sampled episode as far as the loss is concerned); by
    default they are recomputed from the current parameters.
    """
    lam = spec.explore_weight if lam is None else lam
    ep = _episode_arrays(episode, signal_kind, critic.m, dt)
    ce = _expand_critic(ep.feats, critic)
    if entropies is None:
        _, _, ph3 = _expand_actor(ep.feats, actor)
        entropies = _entropy_path(ce, ph3)[:-1]
    deltas = _ml_deltas(ep, ce, w, spec.target, lam, dt, np.asarray(entropies))
    return float(0.5 * np.sum(deltas**2) * dt)


def ml_gradients(
    episode: Episode,
    critic: CriticParams,
    actor: ActorParams,
    w: float,
    spec: ProblemSpec,
    dt: float,
    signal_kind: str = "filtered_prob",
    lam: float | None = None,
    entropies: np.ndarray | None = None,
) -> CriticGrads:
    """Martingale-loss gradients w.r.t. every critic grid (single episode).

    Assembled from the per-entry partial derivatives of the parameterized
    objective; descending the loss means stepping *against* these values.
    """
    lam = spec.explore_weight if lam is None else lam
    ep = _episode_arrays(episode, signal_kind, critic.m, dt)
    return _ml_gradients_arrays(ep, critic, actor, w, spec.target, lam, dt, entropies)


def policy_gradient(
    episode: Episode,
    critic: CriticParams,
    actor: ActorParams,
    w: float,
    spec: ProblemSpec,
    dt: float,
    signal_kind: str = "filtered_prob",
    lam: float | None = None,
) -> ActorGrads:
    """Episode estimate of the objective gradient w.r.t. the actor grids."""
    lam = spec.explore_weight if lam is None else lam
    ep = _episode_arrays(episode, signal_kind, critic.m, dt)
    return _policy_gradient_arrays(ep, critic, actor, w, lam, dt)


def update_lagrange(w: float, recent_terminals, d: float, alpha: float) -> float:
    """Self-correcting multiplier step from a window of terminal surpluses."""
    window = np.asarray(recent_terminals, dtype=float)
    if window.size == 0:
        raise ValueError("the terminal-surplus window is empty")
    return w - alpha * (float(np.mean(window)) - d)


@dataclass
class TrainState:
    """Everything a training run produces, sufficient to resume it exactly."""

    algo: str
    critic: CriticParams
    actor: ActorParams
    w: float
    iteration: int
    terminals: list[float]
    ws: list[float]
    recent_terminals: list[float]
    hyper: Hyperparams
    spec: ProblemSpec

    def history_rows(self, block: int = 10) -> list[dict]:
        rows = []
        terms = np.asarray(self.terminals)
        ws = np.asarray(self.ws)
        for start in range(0, len(terms), block):
            chunk = terms[start : start + block]
            rows.append(
                {
                    "iter": min(start + block, len(terms)),
                    "avg_terminal_net_wealth": float(np.mean(chunk)),
                    "var_terminal_net_wealth": (
                        float(np.var(chunk, ddof=1)) if len(chunk) > 1 else 0.0
                    ),
                    "w": float(np.mean(ws[start : start + block])),
                }
            )
        return rows

    def to_dict(self) -> dict:
        return {
            "algo": self.algo,
            "w": self.w,
            "iteration": self.iteration,
            "critic": {k: v.tolist() for k, v in self.critic.grids().items()},
            "actor": {k: v.tolist() for k, v in self.actor.grids().items()},
            "terminals": list(map(float, self.terminals)),
            "ws": list(map(float, self.ws)),
            "recent_terminals": list(map(float, self.recent_terminals)),
            "hyper": {
                "eta_theta": self.hyper.eta_theta,
                "eta_vartheta": self.hyper.eta_vartheta,
                "eta_psi": self.hyper.eta_psi,
                "eta_phi": self.hyper.eta_phi,
                "alpha": self.hyper.alpha,
                "n_avg": self.hyper.n_avg,
                "n_iter": self.hyper.n_iter,
                "dt": self.hyper.dt,
                "seed": self.hyper.seed,
                "m": self.hyper.m,
                "batch_size": self.hyper.batch_size,
                "grad_clip": self.hyper.grad_clip,
                "w0": self.hyper.w0,
                "expectation_signal": self.hyper.expectation_signal,
            },
            "spec": {
                "horizon": self.spec.horizon,
                "target": self.spec.target,
                "multiplier": self.spec.multiplier,
                "explore_weight": self.spec.explore_weight,
                "x0": self.spec.x0,
                "l0": self.spec.l0,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        m = int(d["hyper"]["m"])
        critic = CriticParams(**{k: np.asarray(v) for k, v in d["critic"].items()}, m=m)
        actor = ActorParams(**{k: np.asarray(v) for k, v in d["actor"].items()}, m=m)
        return cls(
            algo=d["algo"],
            critic=critic,
            actor=actor,
            w=d["w"],
            iteration=d["iteration"],
            terminals=list(d["terminals"]),
            ws=list(d["ws"]),
            recent_terminals=list(d["recent_terminals"]),
            hyper=Hyperparams(**d["hyper"]),
            spec=ProblemSpec(**d["spec"]),
        )


@dataclass(frozen=True)
class _TrainEnv:
    dynamics: str
    signal_kind: str
    model: MarketModel
    horizon: int
    dt: float
    m: int
    # deterministic-dynamics paths (None for the real market)
    e0_bar: np.ndarray | None = None
    ex_bar: np.ndarray | None = None
    q_bar: np.ndarray | None = None
    l_path: np.ndarray | None = None
    feats: np.ndarray | None = None
    # real-market feature tables for the two regime labels
    feats_by_regime: np.ndarray | None = None


def _build_env(algo: str, model: MarketModel, hyper: Hyperparams, spec: ProblemSpec) -> _TrainEnv:
    if algo not in ALGO_FLAVORS:
        raise ValueError(f"algo must be one of {sorted(ALGO_FLAVORS)}, got {algo!r}")
    dynamics, _signal_kind = ALGO_FLAVORS[algo]
    horizon = spec.horizon
    taus = _tau_grid(horizon, hyper.dt)
    if dynamics == "real":
        feats_by_regime = np.stack(
            [
                features(np.full(horizon + 1, 1.0), taus, hyper.m),
                features(np.full(horizon + 1, 2.0), taus, hyper.m),
            ]
        )
        return _TrainEnv(
            dynamics=dynamics,
            signal_kind=_signal_kind,
            model=model,
            horizon=horizon,
            dt=hyper.dt,
            m=hyper.m,
            feats_by_regime=feats_by_regime,
        )
    e0_bar, ex_bar, q_bar, signal = deterministic_rates(
        model, horizon, dynamics, hyper.expectation_signal
    )
    l_path = spec.l0 * np.concatenate(([1.0], np.cumprod(q_bar)))
    return _TrainEnv(
        dynamics=dynamics,
        signal_kind=_signal_kind,
        model=model,
        horizon=horizon,
        dt=hyper.dt,
        m=hyper.m,
        e0_bar=e0_bar,
        ex_bar=ex_bar,
        q_bar=q_bar,
        l_path=l_path,
        feats=features(signal, taus, hyper.m),
    )


def _linear_rollout(alpha: np.ndarray, beta: np.ndarray, x0: float) -> np.ndarray:
    """x_{t+1} = alpha_t x_t + beta_t, vectorized with a sequential fallback."""
    cum = np.concatenate(([1.0], np.cumprod(alpha)))
    if np.all(np.isfinite(cum)) and np.all(np.abs(cum) > 1e-250):
        x = cum * (x0 + np.concatenate(([0.0], np.cumsum(beta / cum[1:]))))
        if np.all(np.isfinite(x)):
            return x
    x = np.empty(len(alpha) + 1)
    x[0] = x0
    for t in range(len(alpha)):
        x[t + 1] = alpha[t] * x[t] + beta[t]
    return x


def _sample_training_episode(
    env: _TrainEnv,
    critic: CriticParams,
    actor: ActorParams,
    w: float,
    spec: ProblemSpec,
    rng: np.random.Generator,
) -> _EpisodeArrays:
    horizon = env.horizon
    if env.dynamics == "real":
        regimes = regime_path(env.model.chain, horizon, rng)
        rec = sample_return_paths(regimes[:-1], env.model, rng)
        e0_arr, ex_arr, q_arr = rec.e0, rec.e1 - rec.e0, rec.q
        l_path = spec.l0 * np.concatenate(([1.0], np.cumprod(q_arr)))
        feats = env.feats_by_regime[regimes - 1, np.arange(horizon + 1)]
    else:
        e0_arr, ex_arr = env.e0_bar, env.ex_bar
        l_path, feats = env.l_path, env.feats

    ce = _expand_critic(feats, critic)
    ph1, ph2, ph3 = _expand_actor(feats, actor)
    offset = -(ce.vartheta1 / ce.theta1) * np.exp(ph2) * (w + ce.theta2 * l_path)
    var = np.exp(ph3) / (2.0 * ce.theta1)
    noise = rng.standard_normal(horizon)
    shock = offset[:-1] + np.sqrt(var[:-1]) * noise
    alpha = e0_arr + ex_arr * ph1[:-1]
    beta = ex_arr * shock
    x = _linear_rollout(alpha, beta, spec.x0)
    if not np.all(np.isfinite(x)):
        raise DivergenceError("episode wealth path became non-finite")
    action = ph1[:-1] * x[:-1] + shock
    return _EpisodeArrays(x=x, l=l_path, action=action, feats=feats)


def _clip(grad: np.ndarray, limit: float | None) -> np.ndarray:
    if limit is None:
        return grad
    return np.clip(grad, -limit, limit)


def _check_finite(params, iteration: int, kind: str) -> None:
    for name, grid in params.grids().items():
        if not np.all(np.isfinite(grid)):
            raise DivergenceError(f"{kind} grid {name} became non-finite at iteration {iteration}")


def train(
    algo: str,
    model: MarketModel,
    hyper: Hyperparams,
    spec: ProblemSpec,
    state: TrainState | None = None,
) -> TrainState:
    """Run (or resume) one actor-critic training loop.

    Per iteration: sample one episode (or a small batch) in the flavor's
    dynamics, take a single descent step on the martingale loss for the
    critic, then a single policy-gradient step for the actor using the just
    updated critic, and every ``n_avg`` iterations move the multiplier against
    the windowed terminal-surplus error.  Iteration k draws from the
    independent stream (seed, k), so a resumed run reproduces an uninterrupted
    one bit for bit.
    """
    env = _build_env(algo, model, hyper, spec)
    if state is None:
        critic = CriticParams.zeros(hyper.m)
        actor = ActorParams.zeros(hyper.m)
        w = spec.target if hyper.w0 is None else hyper.w0
        start = 0
        terminals: list[float] = []
        ws: list[float] = []
        ring: list[float] = []
    else:
        if state.algo != algo:
            raise ValueError(f"checkpoint is for algo {state.algo!r}, not {algo!r}")
        critic, actor, w = state.critic, state.actor, state.w
        start = state.iteration
        terminals = list(state.terminals)
        ws = list(state.ws)
        ring = list(state.recent_terminals)

    eta = {
        "theta1": hyper.eta_theta,
        "theta2": hyper.eta_theta,
        "theta3": hyper.eta_theta,
        "vartheta1": hyper.eta_vartheta,
        "vartheta2": hyper.eta_vartheta,
        "psi": hyper.eta_psi,
    }
    lam, d = spec.explore_weight, spec.target
    for k in range(start, hyper.n_iter):
        rng = stream(hyper.seed, k)
        try:
            episodes = [
                _sample_training_episode(env, critic, actor, w, spec, rng)
                for _ in range(hyper.batch_size)
            ]
            cgrads = [
                _ml_gradients_arrays(ep, critic, actor, w, d, lam, hyper.dt, None)
                for ep in episodes
            ]
            new_grids = {}
            for name, grid in critic.grids().items():
                g = np.mean([getattr(cg, name) for cg in cgrads], axis=0)
                new_grids[name] = grid - eta[name] * _clip(g, hyper.grad_clip)
            critic = CriticParams(**new_grids, m=hyper.m)
            _check_finite(critic, k, "critic")

            agrads = [
                _policy_gradient_arrays(ep, critic, actor, w, lam, hyper.dt) for ep in episodes
            ]
            new_actor = {}
            for name, grid in actor.grids().items():
                g = np.mean([getattr(ag, name) for ag in agrads], axis=0)
                new_actor[name] = grid - hyper.eta_phi * _clip(g, hyper.grad_clip)
            actor = ActorParams(**new_actor, m=hyper.m)
            _check_finite(actor, k, "actor")
        except OverflowError as exc:
            raise DivergenceError(f"{exc} at iteration {k}") from exc

        terminal = float(np.mean([ep.x[-1] - ep.l[-1] for ep in episodes]))
        ring.append(terminal)
        if len(ring) > hyper.n_avg:
            ring = ring[-hyper.n_avg :]
        if (k + 1) % hyper.n_avg == 0:
            w = update_lagrange(w, ring, d, hyper.alpha)
            if not math.isfinite(w):
                raise DivergenceError(f"multiplier became non-finite at iteration {k}")
        terminals.append(terminal)
        ws.append(w)

    return TrainState(
        algo=algo,
        critic=critic,
        actor=actor,
        w=w,
        iteration=hyper.n_iter,
        terminals=terminals,
        ws=ws,
        recent_terminals=ring,
        hyper=hyper,
        spec=spec,
    )


def policy_from_state(state: TrainState) -> GaussianPolicy:
    """Frozen learned policy; the runtime signal selects the grid features."""
    critic, actor, w = state.critic, state.actor, state.w
    horizon, dt, m = state.spec.horizon, state.hyper.dt, state.hyper.m

    def affine(t: int, signal: float) -> tuple[float, float, float, float]:
        feats = features([signal], [(horizon - t) * dt], m)
        ce = _expand_critic(feats, critic)
        ph1, ph2, ph3 = _expand_actor(feats, actor)
        scale = -(ce.vartheta1[0] / ce.theta1[0]) * math.exp(ph2[0])
        variance = math.exp(ph3[0]) / (2.0 * ce.theta1[0])
        return float(ph1[0]), float(scale * ce.theta2[0]), float(scale * w), float(variance)

    return GaussianPolicy.from_affine(affine, kind="learned")
