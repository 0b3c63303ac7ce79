"""Out-of-sample evaluation and comparison reporting.

``out_of_sample`` freezes a policy, rolls it over many independently seeded
paths of the chosen dynamics flavor, and reports mean/variance of terminal net
wealth plus the horizon Sharpe ratio (mean minus initial wealth over the
terminal standard deviation).  ``empirical_study`` drives the block-resampling
pipeline: per training iteration a historical window is sampled, regimes are
labeled and parameters re-estimated with exponential averaging, and the block's
actual risky returns form the episode the learners update on.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import data_ingest, rl
from .closed_form import GaussianPolicy, ProblemSpec
from .filtering import filter_states
from .market import MarketModel, deterministic_rates, regime_path, sample_return_paths, stream


@dataclass(frozen=True)
class EvalReport:
    """Sample statistics of terminal net wealth over the evaluation paths."""

    mean: float
    variance: float
    sharpe: float
    n_paths: int
    policy_kind: str
    config_digest: str = ""
    algo: str = ""
    seed: int = 0
    n_excluded: int = 0

    def row(self) -> dict:
        return {
            "algo": self.algo or self.policy_kind,
            "mean": self.mean,
            "variance": self.variance,
            "sharpe": self.sharpe,
            "n_paths": self.n_paths,
            "seed": self.seed,
        }


def sharpe_ratio(mean: float, variance: float, x0: float = 1.0) -> float:
    """(mean - initial wealth) / terminal standard deviation; 0 when flat."""
    if variance < 0.0:
        raise ValueError("variance must be >= 0")
    if variance == 0.0:
        return 0.0 if mean == x0 else math.copysign(math.inf, mean - x0)
    return (mean - x0) / math.sqrt(variance)


def _affine_tables(policy: GaussianPolicy, horizon: int, signals: np.ndarray) -> np.ndarray:
    """(cx, cl, c0, sd) per period for a deterministic signal path."""
    out = np.empty((horizon, 4))
    for t in range(horizon):
        cx, cl, c0, var = policy.affine_fn(t, float(signals[t]))
        out[t] = (cx, cl, c0, math.sqrt(var))
    return out


def _regime_affine_tables(policy: GaussianPolicy, horizon: int) -> np.ndarray:
    """(2, horizon, 4) tables for the two possible regime signals."""
    return np.stack(
        [
            _affine_tables(policy, horizon, np.full(horizon, 1.0)),
            _affine_tables(policy, horizon, np.full(horizon, 2.0)),
        ]
    )


def out_of_sample(
    policy: GaussianPolicy,
    model: MarketModel,
    n_paths: int,
    spec: ProblemSpec,
    seed: int,
    dynamics: str = "real",
    signal: str | None = None,
    explore: bool = True,
    expectation_signal: str = "expected_state",
) -> EvalReport:
    """Evaluate a frozen policy on independent paths of one dynamics flavor.

    ``explore=False`` applies the policy mean instead of sampling the Gaussian
    action.  Non-finite terminals are excluded and counted; more than 1%
    exclusions aborts the evaluation.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    if policy.affine_fn is None:
        raise ValueError("evaluation requires a policy exposing affine coefficients")
    horizon = spec.horizon
    chain = model.chain
    rng = stream(seed, 0)

    if dynamics == "real":
        sig_kind = signal or "regime"
        regimes = np.stack([regime_path(chain, horizon, stream(seed, 1 + i)) for i in range(n_paths)])
        recs = [
            sample_return_paths(regimes[i, :-1], model, stream(seed, 1 + n_paths + i))
            for i in range(n_paths)
        ]
        e0 = np.stack([r.e0 for r in recs])
        ex = np.stack([r.e1 - r.e0 for r in recs])
        qq = np.stack([r.q for r in recs])
    elif dynamics in ("filtered", "expectation"):
        sig_kind = signal or ("filtered_prob" if dynamics == "filtered" else "expected_state")
        e0_bar, ex_bar, q_bar, _ = deterministic_rates(model, horizon, dynamics, expectation_signal)
        e0 = np.broadcast_to(e0_bar, (n_paths, horizon))
        ex = np.broadcast_to(ex_bar, (n_paths, horizon))
        qq = np.broadcast_to(q_bar, (n_paths, horizon))
        regimes = None
    else:
        raise ValueError(f"unknown dynamics flavor {dynamics!r}")

    p_hat = filter_states(chain.p0, chain.matrix(), horizon)
    if sig_kind == "regime":
        if regimes is None:
            raise ValueError("regime signal requires real dynamics")
        tables = _regime_affine_tables(policy, horizon)
        path_tables = tables[regimes[:, :-1] - 1, np.arange(horizon)[None, :]]
    else:
        sig = p_hat if sig_kind == "filtered_prob" else 2.0 - p_hat
        per_t = _affine_tables(policy, horizon, sig[:-1])
        path_tables = np.broadcast_to(per_t, (n_paths, horizon, 4))

    noise = rng.standard_normal((n_paths, horizon)) if explore else np.zeros((n_paths, horizon))
    x = np.full(n_paths, spec.x0)
    l = np.full(n_paths, spec.l0)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(horizon):
            coef = path_tables[:, t, :]
            u = coef[:, 0] * x + coef[:, 1] * l + coef[:, 2] + coef[:, 3] * noise[:, t]
            x = e0[:, t] * x + ex[:, t] * u
            l = qq[:, t] * l
    terminal = x - l
    finite = np.isfinite(terminal)
    n_excluded = int(np.sum(~finite))
    if n_excluded > 0.01 * n_paths:
        raise RuntimeError(f"{n_excluded} of {n_paths} paths produced non-finite terminals")
    vals = terminal[finite]
    mean = float(np.mean(vals))
    variance = float(np.var(vals, ddof=1))
    return EvalReport(
        mean=mean,
        variance=variance,
        sharpe=sharpe_ratio(mean, variance, spec.x0),
        n_paths=int(vals.size),
        policy_kind=policy.kind,
        seed=seed,
        n_excluded=n_excluded,
        config_digest=_digest(
            {
                "dynamics": dynamics,
                "signal": sig_kind,
                "n_paths": n_paths,
                "seed": seed,
                "explore": explore,
                "horizon": horizon,
            }
        ),
    )


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def compare_table(reports: list[EvalReport]) -> tuple[str, list[dict]]:
    """Aligned text table plus CSV-ready rows for a list of reports."""
    rows = [r.row() for r in reports]
    header = ("algo", "mean", "variance", "sharpe", "n_paths", "seed")
    if not rows:
        return ",".join(header) + "\n(empty)\n", rows
    widths = {h: max(len(h), *(len(_fmt(r[h])) for r in rows)) for h in header}
    lines = ["  ".join(h.ljust(widths[h]) for h in header)]
    for r in rows:
        lines.append("  ".join(_fmt(r[h]).ljust(widths[h]) for h in header))
    return "\n".join(lines) + "\n", rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# ---------------------------------------------------------------------------
# Block-resampling empirical pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockSource:
    """Historical windows drawn uniformly from a set of price series."""

    series_set: tuple[data_ingest.PriceSeries, ...]
    horizon_years: float
    dt: float

    def count(self) -> int:
        return data_ingest.block_count(self.series_set, self.horizon_years, self.dt)

    def horizon_periods(self) -> int:
        return data_ingest.periods_in_horizon(self.horizon_years, self.dt)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Closing prices of one sampled block (horizon + 1 values)."""
        horizon = self.horizon_periods()
        counts = [len(s.closes) - 1 - horizon + 1 for s in self.series_set]
        if any(c < 1 for c in counts):
            raise ValueError("every series must span at least one full horizon")
        total = sum(counts)
        pick = int(rng.integers(total))
        for s, c in zip(self.series_set, counts):
            if pick < c:
                return s.closes[pick : pick + horizon + 1]
            pick -= c
        raise AssertionError("unreachable")


@dataclass
class _RunningEstimate:
    mean1: float
    var1: float
    mean2: float
    var2: float
    p12: float
    p21: float

    def update(self, est: data_ingest.EstimatedParams, n_smooth: int) -> None:
        upd = data_ingest.exp_average_update
        self.mean1 = upd(self.mean1, est.regime1_mean, n_smooth)
        self.var1 = upd(self.var1, est.regime1_var, n_smooth)
        self.mean2 = upd(self.mean2, est.regime2_mean, n_smooth)
        self.var2 = upd(self.var2, est.regime2_var, n_smooth)
        self.p12 = upd(self.p12, est.p12, n_smooth)
        self.p21 = upd(self.p21, est.p21, n_smooth)


def _baseline_rate(model: MarketModel, p12: float, p21: float) -> float:
    """Sojourn-weighted mix of the per-regime baseline rates (annual, net)."""
    w1 = p21 / (p12 + p21)
    r1 = model.e0[0].annual_net()
    r2 = model.e0[1].annual_net()
    return w1 * r1 + (1.0 - w1) * r2


def empirical_train(
    algo: str,
    blocks: BlockSource,
    model: MarketModel,
    hyper: rl.Hyperparams,
    spec: ProblemSpec,
    n_smooth: int = 6,
) -> rl.TrainState:
    """Train a learner on resampled historical blocks.

    Each iteration samples a block, labels its bull/bear phases, re-estimates
    regime parameters with exponential averaging (single-regime blocks keep
    the previous estimate), and runs one episode whose risky returns are the
    block's own while the baseline and liability legs follow the filtered
    expectations implied by the current transition estimates.  ``algo`` is
    ``"poemv1"`` (filter signal) or ``"emv"`` (regime-blind baseline: constant
    sojourn-weighted baseline rate, no liability in its world, unit signal).
    """
    if algo not in ("poemv1", "emv"):
        raise ValueError(f"empirical training supports poemv1 or emv, got {algo!r}")
    horizon = spec.horizon
    if horizon != blocks.horizon_periods():
        raise ValueError("problem horizon and block horizon disagree")
    critic = rl.CriticParams.zeros(hyper.m)
    actor = rl.ActorParams.zeros(hyper.m)
    w = spec.target if hyper.w0 is None else hyper.w0
    running: _RunningEstimate | None = None
    taus = (horizon - np.arange(horizon + 1)) * hyper.dt
    terminals: list[float] = []
    ws: list[float] = []
    ring: list[float] = []
    m1, m2 = model.moment_pair()
    lam, d = spec.explore_weight, spec.target
    eta = {
        "theta1": hyper.eta_theta,
        "theta2": hyper.eta_theta,
        "theta3": hyper.eta_theta,
        "vartheta1": hyper.eta_vartheta,
        "vartheta2": hyper.eta_vartheta,
        "psi": hyper.eta_psi,
    }

    for k in range(hyper.n_iter):
        rng = stream(hyper.seed, k)
        closes = blocks.sample(rng)
        series = data_ingest.PriceSeries.from_closes(closes, frequency=blocks_frequency(blocks.dt))
        try:
            labels = data_ingest.label_regimes(series)
            est = data_ingest.estimate_params(series, labels, blocks.dt)
        except ValueError:
            est = None  # single-regime block: keep the previous estimate
        if est is not None:
            if running is None:
                running = _RunningEstimate(
                    mean1=est.regime1_mean,
                    var1=est.regime1_var,
                    mean2=est.regime2_mean,
                    var2=est.regime2_var,
                    p12=est.p12,
                    p21=est.p21,
                )
            else:
                running.update(est, n_smooth)
        if running is None:
            continue

        gross = closes[1:] / closes[:-1]
        if algo == "poemv1":
            mat = np.array(
                [[1.0 - running.p12, running.p12], [running.p21, 1.0 - running.p21]]
            )
            probs = filter_states(model.chain.p0, mat, horizon)
            e0_bar = m2.a0 + probs[:-1] * (m1.a0 - m2.a0)
            q_bar = m2.a2 + probs[:-1] * (m1.a2 - m2.a2)
            sig = probs
            l_path = spec.l0 * np.concatenate(([1.0], np.cumprod(q_bar)))
        else:
            rate = _baseline_rate(model, running.p12, running.p21)
            e0_bar = np.full(horizon, 1.0 + rate * hyper.dt)
            sig = np.ones(horizon + 1)
            l_path = np.zeros(horizon + 1)
        ex_arr = gross - e0_bar
        feats = rl.features(sig, taus, hyper.m)

        ce = rl._expand_critic(feats, critic)
        ph1, ph2, ph3 = rl._expand_actor(feats, actor)
        offsets = -(ce.vartheta1 / ce.theta1) * np.exp(ph2) * (w + ce.theta2 * l_path)
        var = np.exp(ph3) / (2.0 * ce.theta1)
        noise = rng.standard_normal(horizon)
        shock = offsets[:-1] + np.sqrt(var[:-1]) * noise
        x = rl._linear_rollout(e0_bar + ex_arr * ph1[:-1], ex_arr * shock, spec.x0)
        if not np.all(np.isfinite(x)):
            raise rl.DivergenceError(f"episode wealth path became non-finite at iteration {k}")
        ep = rl._EpisodeArrays(x=x, l=l_path, action=ph1[:-1] * x[:-1] + shock, feats=feats)

        cg = rl._ml_gradients_arrays(ep, critic, actor, w, d, lam, hyper.dt, None)
        critic = rl.CriticParams(
            **{
                name: grid - eta[name] * rl._clip(getattr(cg, name), hyper.grad_clip)
                for name, grid in critic.grids().items()
            },
            m=hyper.m,
        )
        rl._check_finite(critic, k, "critic")
        ag = rl._policy_gradient_arrays(ep, critic, actor, w, lam, hyper.dt)
        actor = rl.ActorParams(
            **{
                name: grid - hyper.eta_phi * rl._clip(getattr(ag, name), hyper.grad_clip)
                for name, grid in actor.grids().items()
            },
            m=hyper.m,
        )
        rl._check_finite(actor, k, "actor")

        terminal = float(x[-1] - l_path[-1])
        ring.append(terminal)
        if len(ring) > hyper.n_avg:
            ring = ring[-hyper.n_avg :]
        if (k + 1) % hyper.n_avg == 0:
            w = rl.update_lagrange(w, ring, d, hyper.alpha)
        terminals.append(terminal)
        ws.append(w)

    return rl.TrainState(
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


def blocks_frequency(dt: float) -> str:
    return "monthly" if abs(dt - 1.0 / 12.0) < 1e-9 else "daily"


def evaluate_on_market_paths(
    state: rl.TrainState,
    model: MarketModel,
    n_paths: int,
    spec: ProblemSpec,
    seed: int,
    explore: bool = False,
) -> EvalReport:
    """Apply an empirically trained policy to fresh paths of the true market.

    Test paths use the real risky-return draws while the baseline and
    liability legs follow the filtered expectations of the true model, the
    same construction as the training episodes.  The regime-blind baseline
    sees a unit signal and no liability inside its own decision rule, but is
    scored on the common terminal net wealth.
    """
    horizon = spec.horizon
    m1, m2 = model.moment_pair()
    probs = filter_states(model.chain.p0, model.chain.matrix(), horizon)
    e0_bar = m2.a0 + probs[:-1] * (m1.a0 - m2.a0)
    q_bar = m2.a2 + probs[:-1] * (m1.a2 - m2.a2)
    l_path = spec.l0 * np.concatenate(([1.0], np.cumprod(q_bar)))

    critic, actor, w = state.critic, state.actor, state.w
    taus = (horizon - np.arange(horizon + 1)) * state.hyper.dt
    if state.algo == "poemv1":
        sig = probs
        l_for_policy = l_path
    else:
        sig = np.ones(horizon + 1)
        l_for_policy = np.zeros(horizon + 1)
    feats = rl.features(sig, taus, state.hyper.m)
    ce = rl._expand_critic(feats, critic)
    ph1, ph2, ph3 = rl._expand_actor(feats, actor)
    offset = -(ce.vartheta1 / ce.theta1) * np.exp(ph2) * (w + ce.theta2 * l_for_policy)
    sd = np.sqrt(np.exp(ph3) / (2.0 * ce.theta1))

    terminals = np.empty(n_paths)
    for i in range(n_paths):
        rng = stream(seed, i)
        regimes = regime_path(model.chain, horizon, rng)
        rec = sample_return_paths(regimes[:-1], model, rng)
        noise = rng.standard_normal(horizon) if explore else np.zeros(horizon)
        ex_arr = rec.e1 - e0_bar
        shock = offset[:-1] + sd[:-1] * noise
        x = rl._linear_rollout(e0_bar + ex_arr * ph1[:-1], ex_arr * shock, spec.x0)
        terminals[i] = x[-1] - l_path[-1]
    finite = np.isfinite(terminals)
    vals = terminals[finite]
    mean = float(np.mean(vals))
    variance = float(np.var(vals, ddof=1))
    return EvalReport(
        mean=mean,
        variance=variance,
        sharpe=sharpe_ratio(mean, variance, spec.x0),
        n_paths=int(vals.size),
        policy_kind="learned",
        algo=state.algo,
        seed=seed,
        n_excluded=int(np.sum(~finite)),
    )
