"""Hidden-regime estimation and the per-period moment sets that feed every policy.

The market regime is a two-state Markov chain that investors cannot observe.
Because the regime enters the observable wealth/liability dynamics only through
conditional expectations, the posterior probability of being in regime 1 follows
a *deterministic* affine recursion: it never re-weights on realized returns.
This module implements that recursion (iterated and closed form), the
expectation-based state signal used by the learning-free variant, and the
mixing of per-regime return moments into the "filtered" and "expectation"
moment schedules consumed by the analytic policies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MOMENT_SLACK = 1e-9  # tolerance for second-moment >= first-moment^2 checks


@dataclass(frozen=True)
class MomentSet:
    """First/second raw moments of the three per-period returns.

    ``a0/b0`` describe the gross return of the baseline asset, ``a1/b1`` the
    excess return of the risky asset over the baseline, and ``a2/b2`` the gross
    liability return.  One instance describes a single period under a single
    regime, or their signal-weighted mixture.
    """

    a0: float
    b0: float
    a1: float
    b1: float
    a2: float
    b2: float

    def __post_init__(self) -> None:
        if not all(np.isfinite(v) for v in self.as_tuple()):
            raise ValueError("moment set contains non-finite entries")
        if self.b1 <= 0.0:
            raise ValueError(f"second moment of the excess return must be positive, got {self.b1}")

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.a0, self.b0, self.a1, self.b1, self.a2, self.b2)

    def cross(self) -> float:
        """E[base * excess] implied by the set: a0*(a0 + a1) - b0.

        Within one regime this is exact because the two asset returns are
        independent; for mixed sets it is the definition the policy formulas use.
        """
        return self.a0 * (self.a0 + self.a1) - self.b0

    def risky_mean(self) -> float:
        return self.a0 + self.a1

    def risky_sq(self) -> float:
        """Raw second moment of the risky asset's gross return."""
        return self.b1 + 2.0 * self.a0 * (self.a0 + self.a1) - self.b0

    def violations(self) -> list[str]:
        """Second-moment deficits (variance < 0 readings) present in the set."""
        out = []
        if self.b0 < self.a0**2 - _MOMENT_SLACK:
            out.append(f"b0={self.b0} < a0^2={self.a0 ** 2}")
        if self.b1 < self.a1**2 - _MOMENT_SLACK:
            out.append(f"b1={self.b1} < a1^2={self.a1 ** 2}")
        if self.b2 < self.a2**2 - _MOMENT_SLACK:
            out.append(f"b2={self.b2} < a2^2={self.a2 ** 2}")
        return out


@dataclass(frozen=True)
class MomentSchedule:
    """Per-period moment sets for t = 0..T-1 plus the flavor that produced them.

    ``flavor`` is one of ``"regime"`` (conditioned on a fixed regime),
    ``"filtered"`` (mixed by the filter probability path) or ``"expectation"``
    (mixed by the expected-state signal, which lies outside [0, 1] and may
    produce the ``violations`` recorded here).
    """

    sets: tuple[MomentSet, ...]
    flavor: str
    violations: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.sets)

    def __getitem__(self, t: int) -> MomentSet:
        return self.sets[t]


def _as_matrix(p) -> np.ndarray:
    mat = np.asarray(p, dtype=float)
    if mat.shape != (2, 2):
        raise ValueError(f"transition matrix must be 2x2, got shape {mat.shape}")
    return mat


def update_filter(p_hat: float, p) -> float:
    """One-step update of the regime-1 probability.

    The posterior update is the affine map ``P21 + p_hat * (P11 - P21)``; the
    realized returns drop out of the Bayes step, so no observation argument is
    needed.
    """
    mat = _as_matrix(p)
    return mat[1, 0] + p_hat * (mat[0, 0] - mat[1, 0])


def filter_states(p0: float, p, horizon: int) -> np.ndarray:
    """Probability-of-regime-1 path [p_0, p_1, ..., p_T], iterated."""
    mat = _as_matrix(p)
    out = np.empty(horizon + 1)
    out[0] = p0
    c, d = mat[1, 0], mat[0, 0] - mat[1, 0]
    for t in range(horizon):
        out[t + 1] = c + d * out[t]
    return out


def filter_path(p0: float, p, horizon: int) -> np.ndarray:
    """The updated probabilities [p_1, ..., p_T] (excludes the initial value)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return filter_states(p0, p, horizon)[1:]


def filter_path_closed(p0: float, p, horizon: int) -> np.ndarray:
    """Closed-form twin of :func:`filter_path`.

    Element t-1 equals ``P21 * sum_{k=0}^{t-1} d^k + p0 * d^t`` with
    ``d = P11 - P21``; the geometric sum is accumulated incrementally so the
    formula stays defined at d = 1.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    mat = _as_matrix(p)
    c, d = mat[1, 0], mat[0, 0] - mat[1, 0]
    out = np.empty(horizon)
    geo = 0.0  # sum_{k<t} d^k
    dpow = 1.0  # d^t
    for t in range(horizon):
        geo += dpow
        dpow *= d
        out[t] = c * geo + p0 * dpow
    return out


def stationary_state1_prob(p) -> float:
    """Fixed point P21 / (1 - P11 + P21) of the filter recursion."""
    mat = _as_matrix(p)
    denom = 1.0 - mat[0, 0] + mat[1, 0]
    if denom == 0.0:
        raise ValueError("filter recursion has no unique fixed point (P11 - P21 = 1)")
    return mat[1, 0] / denom


def expected_regime_signal(p0: float, p, t: int) -> float:
    """Expected regime label E[state_t] in [1, 2], via t-step matrix powers."""
    if t < 0:
        raise ValueError("t must be >= 0")
    mat = _as_matrix(p)
    pt = np.linalg.matrix_power(mat, t)
    return (pt[0, 0] + 2.0 * pt[0, 1]) * p0 + (pt[1, 0] + 2.0 * pt[1, 1]) * (1.0 - p0)


def expected_state_path(p0: float, p, horizon: int) -> np.ndarray:
    """[E[state_0], ..., E[state_T]]; equals 2 - P(state_t = 1) path."""
    return 2.0 - filter_states(p0, p, horizon)


def filtered_moments(signal: float, regime_moments: tuple[MomentSet, MomentSet]) -> MomentSet:
    """Mix per-regime raw moments with weight ``signal`` on regime 1.

    All first moments and the raw second moments of the three returns mix
    linearly.  The second moment of the excess return is then rebuilt from the
    mixed components, so its cross term is the product of the *mixed* means
    rather than the mixture of per-regime cross products.
    """
    m1, m2 = regime_moments

    def mix(v1: float, v2: float) -> float:
        return v2 + signal * (v1 - v2)

    a0 = mix(m1.a0, m2.a0)
    b0 = mix(m1.b0, m2.b0)
    a1 = mix(m1.a1, m2.a1)
    a2 = mix(m1.a2, m2.a2)
    b2 = mix(m1.b2, m2.b2)
    risky_mean = mix(m1.risky_mean(), m2.risky_mean())
    risky_sq = mix(m1.risky_sq(), m2.risky_sq())
    b1 = risky_sq - 2.0 * risky_mean * a0 + b0
    if b1 <= 0.0:
        raise ValueError(
            f"mixed second moment of the excess return is non-positive ({b1}) at signal {signal}"
        )
    out = MomentSet(a0=a0, b0=b0, a1=a1, b1=b1, a2=a2, b2=b2)
    if 0.0 <= signal <= 1.0:
        bad = out.violations()
        if bad:  # impossible for a true convex mixture
            raise ValueError(f"moment mixing produced invalid set at signal {signal}: {bad}")
    return out


def regime_schedule(moments: MomentSet, horizon: int) -> MomentSchedule:
    """Constant schedule conditioned on one regime (time-homogeneous market)."""
    return MomentSchedule(sets=(moments,) * horizon, flavor="regime")


def _mixed_schedule(
    pair: tuple[MomentSet, MomentSet], signals: np.ndarray, flavor: str
) -> MomentSchedule:
    sets = []
    violations: list[str] = []
    for t, s in enumerate(signals):
        ms = filtered_moments(float(s), pair)
        sets.append(ms)
        for v in ms.violations():
            violations.append(f"t={t} signal={float(s):.6g}: {v}")
    return MomentSchedule(sets=tuple(sets), flavor=flavor, violations=tuple(violations))


def filtered_schedule(
    pair: tuple[MomentSet, MomentSet], p0: float, p, horizon: int
) -> MomentSchedule:
    """Schedule mixed along the filter path p_0..p_{T-1}."""
    return _mixed_schedule(pair, filter_states(p0, p, horizon)[:-1], "filtered")


def expectation_schedule(
    pair: tuple[MomentSet, MomentSet],
    p0: float,
    p,
    horizon: int,
    signal: str = "expected_state",
) -> MomentSchedule:
    """Schedule for the learning-free variant.

    ``signal="expected_state"`` substitutes E[state_t] in [1, 2] literally into
    the mixing formulas (the faithful reading); ``signal="state1_prob"`` uses
    the unconditional probability of regime 1 instead, which keeps the weights
    inside [0, 1].
    """
    if signal == "expected_state":
        sig = expected_state_path(p0, p, horizon)[:-1]
    elif signal == "state1_prob":
        sig = filter_states(p0, p, horizon)[:-1]
    else:
        raise ValueError(f"unknown expectation signal kind {signal!r}")
    return _mixed_schedule(pair, sig, "expectation")
