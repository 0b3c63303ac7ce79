"""Two-regime market simulation: regimes, returns, surplus, full episodes.

The simulation ground truth is a hidden two-state Markov chain driving the
per-period return distributions of a baseline asset, a risky asset and an
uncontrollable liability.  Annual figures in a model description are converted
to per-period moments linearly in the period length: a net annual rate r
becomes a per-period gross mean 1 + r*dt and an annual variance v becomes
v*dt.  Besides the real dynamics, episodes can be generated from the
"filtered" dynamics (returns replaced by their signal-weighted expectations,
so the only randomness left is the action noise) and from the "expectation"
dynamics (same, weighted by the expected-state signal).

All randomness flows through counter-based Philox streams; `stream(seed, k)`
gives the k-th independent stream, so episodes are reproducible and safely
parallel.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .closed_form import GaussianPolicy
from .filtering import MomentSet, filter_states

_ROW_SUM_TOL = 1e-12

DYNAMICS = ("real", "filtered", "expectation")
SIGNALS = ("regime", "filtered_prob", "expected_state")


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent counter-based RNG stream for (seed, key...)."""
    words = [np.uint64(seed & 0xFFFFFFFFFFFFFFFF)]
    for k in key:
        words.append(np.uint64(k & 0xFFFFFFFFFFFFFFFF))
    while len(words) < 2:
        words.append(np.uint64(0))
    return np.random.Generator(np.random.Philox(key=np.array(words[:2], dtype=np.uint64)))


@dataclass(frozen=True)
class RegimeChain:
    """Row-stochastic 2x2 transition matrix plus the initial regime-1 probability."""

    p: tuple[tuple[float, float], tuple[float, float]]
    p0: float

    def __post_init__(self) -> None:
        mat = self.matrix()
        if np.any(mat < 0.0) or np.any(mat > 1.0):
            raise ValueError("transition probabilities must lie in [0, 1]")
        sums = mat.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > _ROW_SUM_TOL):
            raise ValueError(f"transition matrix rows must sum to 1, got sums {sums}")
        if not 0.0 < self.p0 < 1.0:
            raise ValueError(f"initial regime-1 probability must lie in (0, 1), got {self.p0}")

    def matrix(self) -> np.ndarray:
        return np.asarray(self.p, dtype=float)

    @classmethod
    def from_probs(cls, p11: float, p12: float, p21: float, p22: float, p0: float) -> "RegimeChain":
        return cls(p=((p11, p12), (p21, p22)), p0=p0)


@dataclass(frozen=True)
class ReturnSpec:
    """Distribution of one per-period return, described in annual terms.

    ``annual_mean`` is a gross annual return when ``mean_is_gross`` (e.g. 1.2
    for +20%) and a net annual rate otherwise (e.g. 0.05).  ``annual_vol`` is
    an annual standard deviation unless ``vol_is_variance``.  ``kind`` selects
    the sampling law: ``constant``, ``normal`` or ``skewed_t`` (Hansen family,
    standardized then rescaled to the per-period mean/deviation).
    """

    kind: str
    annual_mean: float
    annual_vol: float = 0.0
    dof: float | None = None
    skew: float | None = None
    mean_is_gross: bool = True
    vol_is_variance: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "normal", "skewed_t"):
            raise ValueError(f"unknown return kind {self.kind!r}")
        if self.annual_vol < 0.0:
            raise ValueError("annual_vol must be >= 0")
        if self.kind == "constant" and self.annual_vol != 0.0:
            raise ValueError("constant returns must have zero volatility")
        if self.kind == "skewed_t":
            if self.dof is None or self.dof <= 2.0:
                raise ValueError("skewed_t returns need dof > 2 so the variance exists")
            if self.skew is None or not -1.0 < self.skew < 1.0:
                raise ValueError("skewed_t returns need skew in (-1, 1)")

    def annual_net(self) -> float:
        return self.annual_mean - 1.0 if self.mean_is_gross else self.annual_mean

    def period_mean(self, dt: float) -> float:
        return 1.0 + self.annual_net() * dt

    def period_var(self, dt: float) -> float:
        annual_var = self.annual_vol if self.vol_is_variance else self.annual_vol**2
        return annual_var * dt

    def period_sd(self, dt: float) -> float:
        return math.sqrt(self.period_var(dt))

    def sample(self, dt: float, rng: np.random.Generator, size: int | None = None):
        mean, sd = self.period_mean(dt), self.period_sd(dt)
        if self.kind == "constant":
            return mean if size is None else np.full(size, mean)
        if self.kind == "normal":
            return rng.normal(mean, sd, size=size)
        return sample_skewed_t(mean, sd, self.dof, self.skew, rng, size=size)


def _hansen_constants(dof: float, skew: float) -> tuple[float, float]:
    c = math.gamma((dof + 1.0) / 2.0) / (
        math.sqrt(math.pi * (dof - 2.0)) * math.gamma(dof / 2.0)
    )
    a = 4.0 * skew * c * (dof - 2.0) / (dof - 1.0)
    b = math.sqrt(1.0 + 3.0 * skew * skew - a * a)
    return a, b


def sample_skewed_t(
    mean: float,
    vol: float,
    dof: float,
    skew: float,
    rng: np.random.Generator,
    size: int | None = None,
):
    """Draw mean + vol * Z with Z a standardized (zero-mean, unit-variance)
    skewed Student-t in Hansen's parameterization.

    Sampling uses the two-piece construction: the distribution puts mass
    (1 -/+ skew)/2 on each side of its mode, where it is a rescaled half
    Student-t, so a half-t magnitude plus a biased sign draw suffices.
    """
    if dof is None or dof <= 2.0:
        raise ValueError("dof must exceed 2 for the variance to exist")
    if not -1.0 < skew < 1.0:
        raise ValueError("skew must lie in (-1, 1)")
    if vol < 0.0:
        raise ValueError("vol must be >= 0")
    u = rng.random(size=size if size is not None else 1)
    tdraw = rng.standard_t(dof, size=size if size is not None else 1)
    if vol == 0.0:
        out = np.full(u.shape, float(mean))
        return out if size is not None else float(out[0])
    a, b = _hansen_constants(dof, skew)
    scale = math.sqrt((dof - 2.0) / dof)  # standardizes the embedded t variate
    right = u >= (1.0 - skew) / 2.0
    halves = np.where(right, np.abs(tdraw), -np.abs(tdraw))
    piece = np.where(right, 1.0 + skew, 1.0 - skew)
    z = (piece * scale * halves - a) / b
    out = mean + vol * z
    return out if size is not None else float(out[0])


@dataclass(frozen=True)
class MarketModel:
    """Per-regime return specs, the regime chain, and the period length."""

    chain: RegimeChain
    e0: tuple[ReturnSpec, ReturnSpec]
    e1: tuple[ReturnSpec, ReturnSpec]
    q: tuple[ReturnSpec, ReturnSpec]
    dt: float

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        for regime in (1, 2):
            m = self.regime_moment_set(regime)
            # E[e e'] for (baseline, risky) is PD iff b0 > 0 and the 2x2 determinant
            # b0 * E[risky^2] - (a0 * E[risky])^2 is positive
            risky_sq = m.risky_sq()
            det = m.b0 * risky_sq - (m.a0 * m.risky_mean()) ** 2
            if m.b0 <= 0.0 or det <= 0.0:
                raise ValueError(
                    f"second-moment matrix of regime {regime} returns is not positive definite"
                )

    def regime_moment_set(self, regime: int) -> MomentSet:
        i = regime - 1
        a0 = self.e0[i].period_mean(self.dt)
        b0 = a0 * a0 + self.e0[i].period_var(self.dt)
        risky_mean = self.e1[i].period_mean(self.dt)
        a1 = risky_mean - a0
        # baseline and risky draws are independent within a regime
        b1 = self.e1[i].period_var(self.dt) + self.e0[i].period_var(self.dt) + a1 * a1
        a2 = self.q[i].period_mean(self.dt)
        b2 = a2 * a2 + self.q[i].period_var(self.dt)
        return MomentSet(a0=a0, b0=b0, a1=a1, b1=b1, a2=a2, b2=b2)

    def moment_pair(self) -> tuple[MomentSet, MomentSet]:
        return self.regime_moment_set(1), self.regime_moment_set(2)


@dataclass(frozen=True)
class ReturnsRecord:
    """Per-period return draws of one episode, for diagnostics and invariants."""

    e0: np.ndarray
    e1: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class Episode:
    """One trajectory: states at t = 0..T plus the T actions taken."""

    x: np.ndarray
    l: np.ndarray
    regime: np.ndarray
    p_hat: np.ndarray
    action: np.ndarray
    returns: ReturnsRecord | None = None

    def __post_init__(self) -> None:
        n = len(self.x)
        if not (len(self.l) == len(self.regime) == len(self.p_hat) == n == len(self.action) + 1):
            raise ValueError("episode arrays have inconsistent lengths")

    @property
    def n_periods(self) -> int:
        return len(self.action)

    def terminal_net_wealth(self) -> float:
        return float(self.x[-1] - self.l[-1])

    def validate(self) -> None:
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.l))):
            raise ValueError("episode contains non-finite wealth or liability")
        if np.any(self.p_hat <= 0.0) or np.any(self.p_hat >= 1.0):
            raise ValueError("filter path left the open interval (0, 1)")
        if not np.all(np.isin(self.regime, (1, 2))):
            raise ValueError("regime path contains labels outside {1, 2}")

    def write_csv(self, fh: io.TextIOBase) -> None:
        fh.write("t,x,l,regime,p_hat,action\n")
        for t in range(self.n_periods):
            fh.write(
                f"{t},{float(self.x[t])!r},{float(self.l[t])!r},{int(self.regime[t])},"
                f"{float(self.p_hat[t])!r},{float(self.action[t])!r}\n"
            )
        t = self.n_periods
        fh.write(
            f"{t},{float(self.x[t])!r},{float(self.l[t])!r},{int(self.regime[t])},"
            f"{float(self.p_hat[t])!r},\n"
        )

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def step_regime(current: int, chain: RegimeChain, rng: np.random.Generator) -> int:
    """Advance the hidden regime one period."""
    if current not in (1, 2):
        raise ValueError(f"regime must be 1 or 2, got {current}")
    row = chain.matrix()[current - 1]
    return 1 if rng.random() < row[0] else 2


def regime_path_reference(chain: RegimeChain, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Sequential regime-path sampler (the oracle for the vectorized one)."""
    out = np.empty(horizon + 1, dtype=np.int64)
    out[0] = 1 if rng.random() < chain.p0 else 2
    mat = chain.matrix()
    for t in range(horizon):
        thr = mat[out[t] - 1, 0]
        out[t + 1] = 1 if rng.random() < thr else 2
    return out


def regime_path(chain: RegimeChain, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized regime path consuming the same uniforms as the reference.

    With z in {1, 0} for regimes {1, 2}, a step is determined outright whenever
    the uniform falls below both or above both row thresholds; between such
    points the map is either the identity or a flip, so the path is a forward
    fill corrected by the parity of accumulated flips.
    """
    mat = chain.matrix()
    p11, p21 = mat[0, 0], mat[1, 0]
    u0 = rng.random()
    w = rng.random(horizon)
    if horizon == 0:
        return np.array([1 if u0 < chain.p0 else 2], dtype=np.int64)
    n1 = w < p11  # next z if currently regime 1
    n2 = w < p21  # next z if currently regime 2
    z0 = u0 < chain.p0
    determined = n1 == n2
    flips = n2 & ~n1  # only possible when p21 > p11
    z = np.empty(horizon + 1, dtype=bool)
    z[0] = z0
    # index of the most recent determined step at or before each t (or -1)
    steps = np.arange(horizon)
    last_det = np.maximum.accumulate(np.where(determined, steps, -1))
    det_value = np.where(determined, n1, False)
    flip_cum = np.concatenate(([0], np.cumsum(flips)))
    base = np.where(last_det >= 0, det_value[np.maximum(last_det, 0)], z0)
    # flips strictly after the last determined step and up to t
    flips_since = flip_cum[steps + 1] - np.where(last_det >= 0, flip_cum[last_det + 1], 0)
    z[1:] = base ^ (flips_since % 2 == 1)
    return np.where(z, 1, 2).astype(np.int64)


def sample_returns(
    regime: int, model: MarketModel, rng: np.random.Generator
) -> tuple[float, float, float]:
    """Per-period (baseline, risky, liability) gross returns under one regime."""
    if regime not in (1, 2):
        raise ValueError(f"regime must be 1 or 2, got {regime}")
    i = regime - 1
    e0 = model.e0[i].sample(model.dt, rng)
    e1 = model.e1[i].sample(model.dt, rng)
    q = model.q[i].sample(model.dt, rng)
    return float(e0), float(e1), float(q)


def sample_return_paths(
    regimes: np.ndarray, model: MarketModel, rng: np.random.Generator
) -> ReturnsRecord:
    """Vectorized per-period draws along a regime path (e0, then e1, then q)."""
    horizon = len(regimes)
    out = {}
    for name, specs in (("e0", model.e0), ("e1", model.e1), ("q", model.q)):
        vals = np.empty(horizon)
        draws1 = specs[0].sample(model.dt, rng, size=horizon)
        draws2 = specs[1].sample(model.dt, rng, size=horizon)
        mask1 = regimes == 1
        vals[mask1] = np.asarray(draws1)[mask1]
        vals[~mask1] = np.asarray(draws2)[~mask1]
        out[name] = vals
    return ReturnsRecord(**out)


def step_surplus(
    x: float, l: float, u: float, e0: float, e1: float, q: float
) -> tuple[float, float, float]:
    """One period of the wealth/liability/surplus dynamics."""
    vals = (x, l, u, e0, e1, q)
    if not all(np.isfinite(v) for v in vals):
        raise ValueError(f"non-finite input to surplus step: {vals}")
    x_next = e0 * x + (e1 - e0) * u
    l_next = q * l
    return x_next, l_next, x_next - l_next


def deterministic_rates(
    model: MarketModel, horizon: int, flavor: str, expectation_signal: str = "expected_state"
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-period (baseline, excess, liability) expected rates and the signal path.

    ``flavor`` "filtered" mixes by the regime-1 probability path; "expectation"
    mixes by the expected-state signal literally (or by the unconditional
    regime-1 probability when ``expectation_signal="state1_prob"``).  These are
    the coefficient paths of the observable-dynamics episodes.
    """
    m1, m2 = model.moment_pair()
    chain = model.chain
    probs = filter_states(chain.p0, chain.matrix(), horizon)
    if flavor == "filtered":
        weights = probs
    elif flavor == "expectation":
        if expectation_signal == "expected_state":
            weights = 2.0 - probs
        elif expectation_signal == "state1_prob":
            weights = probs
        else:
            raise ValueError(f"unknown expectation signal kind {expectation_signal!r}")
    else:
        raise ValueError(f"deterministic dynamics flavor must be filtered/expectation, got {flavor}")
    e0_bar = m2.a0 + weights * (m1.a0 - m2.a0)
    ex_bar = m2.a1 + weights * (m1.a1 - m2.a1)
    q_bar = m2.a2 + weights * (m1.a2 - m2.a2)
    return e0_bar[:-1], ex_bar[:-1], q_bar[:-1], weights


def simulate_episode(
    model: MarketModel,
    policy: GaussianPolicy,
    horizon: int,
    x0: float,
    l0: float,
    rng: np.random.Generator,
    dynamics: str = "real",
    signal: str | None = None,
    record_returns: bool = True,
) -> Episode:
    """Roll out one episode under ``policy``.

    The hidden regime path is always simulated and recorded for diagnostics;
    under "filtered"/"expectation" dynamics it does not influence wealth or
    liability.  ``signal`` chooses what the policy sees (defaults: the regime
    under real dynamics, the matching probability path otherwise).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if x0 <= 0.0:
        raise ValueError("initial wealth must be positive")
    if dynamics not in DYNAMICS:
        raise ValueError(f"dynamics must be one of {DYNAMICS}, got {dynamics!r}")
    if signal is None:
        signal = {"real": "regime", "filtered": "filtered_prob", "expectation": "expected_state"}[
            dynamics
        ]
    if signal not in SIGNALS:
        raise ValueError(f"signal must be one of {SIGNALS}, got {signal!r}")

    chain = model.chain
    regimes = regime_path(chain, horizon, rng)
    p_hat = filter_states(chain.p0, chain.matrix(), horizon)

    if dynamics == "real":
        rec = sample_return_paths(regimes[:-1], model, rng)
        e0_arr, ex_arr, q_arr = rec.e0, rec.e1 - rec.e0, rec.q
    else:
        e0_arr, ex_arr, q_arr, _ = deterministic_rates(model, horizon, dynamics)
        rec = ReturnsRecord(e0=e0_arr, e1=e0_arr + ex_arr, q=q_arr)

    if signal == "regime":
        sig = regimes.astype(float)
    elif signal == "filtered_prob":
        sig = p_hat
    else:
        sig = 2.0 - p_hat

    noise = rng.standard_normal(horizon)
    x = np.empty(horizon + 1)
    l = np.empty(horizon + 1)
    action = np.empty(horizon)
    x[0], l[0] = x0, l0
    for t in range(horizon):
        mean = policy.mean_fn(t, x[t], l[t], sig[t])
        var = policy.var_fn(t, sig[t])
        if not (np.isfinite(mean) and np.isfinite(var)) or var < 0.0:
            raise ValueError(f"policy returned invalid mean/variance at t={t}: ({mean}, {var})")
        u = mean + math.sqrt(var) * noise[t]
        action[t] = u
        x[t + 1] = e0_arr[t] * x[t] + ex_arr[t] * u
        l[t + 1] = q_arr[t] * l[t]
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(l))):
        bad = int(np.nonzero(~np.isfinite(x))[0][0]) if not np.all(np.isfinite(x)) else int(
            np.nonzero(~np.isfinite(l))[0][0]
        )
        raise ValueError(f"episode diverged to non-finite state at t={bad}")
    return Episode(
        x=x,
        l=l,
        regime=regimes,
        p_hat=p_hat,
        action=action,
        returns=rec if record_returns else None,
    )


_SPEC_KEYS = ("kind", "annual_mean", "annual_vol", "dof", "skew", "mean_is_gross", "vol_is_variance")


def _spec_from_dict(d: dict) -> ReturnSpec:
    unknown = set(d) - set(_SPEC_KEYS)
    if unknown:
        raise ValueError(f"unknown return spec keys: {sorted(unknown)}")
    return ReturnSpec(**d)


def _spec_to_dict(s: ReturnSpec) -> dict:
    out = {"kind": s.kind, "annual_mean": s.annual_mean, "annual_vol": s.annual_vol}
    if s.dof is not None:
        out["dof"] = s.dof
    if s.skew is not None:
        out["skew"] = s.skew
    out["mean_is_gross"] = s.mean_is_gross
    out["vol_is_variance"] = s.vol_is_variance
    return out


def market_from_dict(cfg: dict) -> MarketModel:
    """Build a model from the documented JSON layout (see README)."""
    try:
        chain = RegimeChain.from_probs(
            p11=cfg["P11"], p12=cfg["P12"], p21=cfg["P21"], p22=cfg["P22"], p0=cfg["p_hat_0"]
        )
        dt = cfg["dt"]
        legs = {}
        for name in ("e0", "e1", "q"):
            legs[name] = (
                _spec_from_dict(cfg[name]["regime1"]),
                _spec_from_dict(cfg[name]["regime2"]),
            )
    except KeyError as exc:
        raise ValueError(f"market config is missing key {exc}") from exc
    return MarketModel(chain=chain, e0=legs["e0"], e1=legs["e1"], q=legs["q"], dt=dt)


def market_to_dict(model: MarketModel) -> dict:
    mat = model.chain.matrix()
    out = {
        "P11": mat[0, 0],
        "P12": mat[0, 1],
        "P21": mat[1, 0],
        "P22": mat[1, 1],
        "p_hat_0": model.chain.p0,
        "dt": model.dt,
    }
    for name in ("e0", "e1", "q"):
        pair = getattr(model, name)
        out[name] = {"regime1": _spec_to_dict(pair[0]), "regime2": _spec_to_dict(pair[1])}
    return out


def load_market(path: str) -> MarketModel:
    with open(path, "r", encoding="utf-8") as fh:
        return market_from_dict(json.load(fh))
