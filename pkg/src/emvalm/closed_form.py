"""Analytic value functions and optimal Gaussian feedback policies.

The entropy-regularized mean-variance problem with an uncontrollable
multiplicative liability admits a closed-form solution by backward induction:
the optimal randomized control at each period is Gaussian, its mean affine in
(wealth, liability) and its variance a product of per-period moment ratios.
This module evaluates those formulas on any moment schedule (regime-
conditioned, filtered, or expectation-based), exposes the value function as an
explicit quadratic in (wealth, liability), and provides an independent
Gauss-Hermite check of the one-step recursion.

Products over future periods are accumulated in log space with sign tracking;
on multi-thousand-period horizons the raw products under/overflow double
precision long before the formulas themselves become meaningless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .filtering import MomentSchedule, MomentSet


@dataclass(frozen=True)
class ProblemSpec:
    """Static description of one optimization problem instance.

    ``horizon`` counts rebalancing periods, ``target`` is the desired expected
    terminal surplus, ``multiplier`` the fixed constraint multiplier the
    unconstrained problem is solved at, and ``explore_weight`` the entropy
    temperature.
    """

    horizon: int
    target: float
    multiplier: float
    explore_weight: float
    x0: float = 1.0
    l0: float = 0.0

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.explore_weight <= 0.0:
            raise ValueError("explore_weight must be positive")


@dataclass(frozen=True)
class GaussianPolicy:
    """Feedback rule mapping (t, wealth, liability, signal) to a Normal action law.

    ``affine_fn(t, signal) -> (cx, cl, c0, variance)`` is the fast path used by
    vectorized simulation for policies whose mean is affine in (x, l); the
    scalar ``mean_fn``/``var_fn`` interface is always available.
    """

    mean_fn: Callable[[int, float, float, float], float]
    var_fn: Callable[[int, float], float]
    kind: str = "custom"
    affine_fn: Callable[[int, float], tuple[float, float, float, float]] | None = None

    @classmethod
    def from_affine(cls, affine_fn, kind: str) -> "GaussianPolicy":
        def mean_fn(t, x, l, signal):
            cx, cl, c0, _ = affine_fn(t, signal)
            return cx * x + cl * l + c0

        def var_fn(t, signal):
            return affine_fn(t, signal)[3]

        return cls(mean_fn=mean_fn, var_fn=var_fn, kind=kind, affine_fn=affine_fn)


@dataclass(frozen=True)
class QuadraticValue:
    """A value surface q_xx x^2 + q_xl xl + q_ll l^2 + q_x x + q_l l + q_c."""

    xx: float
    xl: float
    ll: float
    x: float
    l: float
    c: float

    def __call__(self, x: float, l: float):
        return self.xx * x * x + self.xl * x * l + self.ll * l * l + self.x * x + self.l * l + self.c

    def as_tuple(self):
        return (self.xx, self.xl, self.ll, self.x, self.l, self.c)


def f_terms(m: MomentSet) -> tuple[float, float]:
    """The two per-period scalars the products are built from.

    F1 = b0 b1 - cross^2 and F2 = a0 (b1 - a1^2) + a1 (b0 - a0^2); both use the
    same code path whatever flavor of moment set is supplied.
    """
    cross = m.cross()
    f1 = m.b0 * m.b1 - cross * cross
    f2 = m.a0 * (m.b1 - m.a1 * m.a1) + m.a1 * (m.b0 - m.a0 * m.a0)
    return f1, f2


class _SignedSuffixProducts:
    """Suffix products prod_{k=t}^{T-1} v_k in log-sign space, queried by t."""

    def __init__(self, values: np.ndarray):
        v = np.asarray(values, dtype=float)
        n = len(v)
        self._sign = np.ones(n + 1)
        self._log = np.zeros(n + 1)
        for t in range(n - 1, -1, -1):
            if v[t] == 0.0:
                self._sign[t] = 0.0
                self._log[t] = -math.inf
            else:
                self._sign[t] = self._sign[t + 1] * math.copysign(1.0, v[t])
                self._log[t] = self._log[t + 1] + math.log(abs(v[t]))

    def value(self, t: int) -> float:
        if self._sign[t] == 0.0:
            return 0.0
        return self._sign[t] * math.exp(self._log[t])

    def log_abs(self, t: int) -> float:
        return self._log[t]

    def sign(self, t: int) -> float:
        return self._sign[t]


class _ScheduleTables:
    """Per-schedule precomputation shared by policy and value evaluation."""

    def __init__(self, schedule: MomentSchedule, spec: ProblemSpec):
        if len(schedule) != spec.horizon:
            raise ValueError(
                f"schedule length {len(schedule)} does not match horizon {spec.horizon}"
            )
        self.schedule = schedule
        self.spec = spec
        t_count = spec.horizon
        self.a1 = np.array([m.a1 for m in schedule.sets])
        self.b1 = np.array([m.b1 for m in schedule.sets])
        self.a2 = np.array([m.a2 for m in schedule.sets])
        self.b2 = np.array([m.b2 for m in schedule.sets])
        self.cross = np.array([m.cross() for m in schedule.sets])
        fs = [f_terms(m) for m in schedule.sets]
        self.f1 = np.array([f[0] for f in fs])
        self.f2 = np.array([f[1] for f in fs])
        bad = np.nonzero(self.f1 <= 0.0)[0]
        if bad.size:
            k = int(bad[0])
            raise ValueError(f"F1 is non-positive at period {k} (F1={self.f1[k]})")
        self.p_f1_over_b1 = _SignedSuffixProducts(self.f1 / self.b1)
        self.p_f2_over_b1 = _SignedSuffixProducts(self.f2 / self.b1)
        self.p_f2_over_f1 = _SignedSuffixProducts(self.f2 / self.f1)
        self.p_b1_over_f1 = _SignedSuffixProducts(self.b1 / self.f1)
        self.p_a2 = _SignedSuffixProducts(self.a2)
        self.p_b2 = _SignedSuffixProducts(self.b2)
        # sum_{k=t}^{T-1} (a1_k^2 / b1_k) prod_{j>k} f2_j^2 / (b1_j f1_j), backward;
        # each new term carries the full product over the periods after it
        self.risk_sum = np.zeros(t_count + 1)
        ptail = 1.0
        for t in range(t_count - 1, -1, -1):
            self.risk_sum[t] = self.risk_sum[t + 1] + (self.a1[t] ** 2 / self.b1[t]) * ptail
            ptail *= (self.f2[t] * self.f2[t]) / (self.b1[t] * self.f1[t])
        # log of prod_{k=t}^{T-1} (b1_k / (pi * lam)) prod_{j>k} f1_j / b1_j:
        # each j > t contributes (j - t) copies of log(f1_j / b1_j)
        lam = spec.explore_weight
        log_b1_pl = np.log(self.b1 / (math.pi * lam))
        log_ratio = np.log(self.f1 / self.b1)
        self.log_entropy_prod = np.zeros(t_count + 1)
        acc_ratio = 0.0
        for t in range(t_count - 1, -1, -1):
            self.log_entropy_prod[t] = self.log_entropy_prod[t + 1] + log_b1_pl[t] + acc_ratio
            acc_ratio += log_ratio[t]

    def policy_at(self, t: int) -> tuple[float, float, float]:
        """(cx, k1, variance): mean = cx*x + k1*(w + l*prod_a2(t))."""
        spec = self.spec
        if not 0 <= t <= spec.horizon - 1:
            raise ValueError(f"t must lie in [0, {spec.horizon - 1}], got {t}")
        cx = -self.cross[t] / self.b1[t]
        k1 = (self.a1[t] / self.b1[t]) * self.p_f2_over_f1.value(t + 1)
        log_var = (
            math.log(spec.explore_weight / (2.0 * self.b1[t])) + self.p_b1_over_f1.log_abs(t + 1)
        )
        variance = math.exp(log_var)
        if not math.isfinite(variance) or variance <= 0.0:
            raise ValueError(f"policy variance is not a finite positive number at t={t}")
        return cx, k1, variance

    def mean_variance(self, t: int, x: float, l: float) -> tuple[float, float]:
        cx, k1, variance = self.policy_at(t)
        w = self.spec.multiplier
        mean = cx * x + k1 * (w + l * self.p_a2.value(t))
        return mean, variance

    def value_quadratic(self, t: int) -> QuadraticValue:
        spec = self.spec
        w, d, lam = spec.multiplier, spec.target, spec.explore_weight
        if t == spec.horizon:
            return terminal_value(w, d)
        if not 0 <= t < spec.horizon:
            raise ValueError(f"t must lie in [0, {spec.horizon}], got {t}")
        p1 = self.p_f1_over_b1.value(t)
        p2 = self.p_f2_over_b1.value(t)
        pa2 = self.p_a2.value(t)
        pb2 = self.p_b2.value(t)
        rsum = self.risk_sum[t]
        const = 0.5 * lam * self.log_entropy_prod[t] - rsum * w * w - d * d + 2.0 * w * d
        if not math.isfinite(const):
            raise ValueError(f"value-function log term is not finite at t={t}")
        return QuadraticValue(
            xx=p1,
            xl=-2.0 * p2 * pa2,
            ll=pb2 - rsum * pa2 * pa2,
            x=-2.0 * p2 * w,
            l=2.0 * pa2 * w - 2.0 * w * pa2 * rsum,
            c=const,
        )


def terminal_value(w: float, d: float) -> QuadraticValue:
    """(x - l - w)^2 - (w - d)^2 as an explicit quadratic."""
    return QuadraticValue(
        xx=1.0, xl=-2.0, ll=1.0, x=-2.0 * w, l=2.0 * w, c=w * w - (w - d) ** 2
    )


def _tables(schedule: MomentSchedule, spec: ProblemSpec) -> _ScheduleTables:
    return _ScheduleTables(schedule, spec)


def optimal_policy(
    t: int, x: float, l: float, schedule: MomentSchedule, spec: ProblemSpec
) -> tuple[float, float]:
    """Mean and variance of the optimal Gaussian action at (t, x, l)."""
    return _tables(schedule, spec).mean_variance(t, x, l)


def suboptimal_policy(
    t: int, x: float, l: float, tilde_schedule: MomentSchedule, spec: ProblemSpec
) -> tuple[float, float]:
    """Same formulas evaluated on an expectation-based schedule."""
    return _tables(tilde_schedule, spec).mean_variance(t, x, l)


def value_function(
    t: int, x: float, l: float, schedule: MomentSchedule, spec: ProblemSpec
) -> float:
    """The minimized objective at (t, x, l); t = horizon gives the terminal condition."""
    if t == spec.horizon:
        return terminal_value(spec.multiplier, spec.target)(x, l)
    return _tables(schedule, spec).value_quadratic(t)(x, l)


def schedule_policy(schedule: MomentSchedule, spec: ProblemSpec, kind: str) -> GaussianPolicy:
    """Policy object over one schedule; the runtime signal argument is ignored
    because the schedule already encodes the signal path."""
    tables = _tables(schedule, spec)
    w = spec.multiplier

    def affine(t: int, signal: float) -> tuple[float, float, float, float]:
        cx, k1, variance = tables.policy_at(t)
        pa2 = tables.p_a2.value(t)
        return cx, k1 * pa2, k1 * w, variance

    return GaussianPolicy.from_affine(affine, kind=kind)


def regime_policy(
    schedules: tuple[MomentSchedule, MomentSchedule], spec: ProblemSpec
) -> GaussianPolicy:
    """Complete-information policy: the signal selects the regime schedule.

    Future-period moments are frozen at the current regime, exactly as the
    product formulas are written.
    """
    tables = (_tables(schedules[0], spec), _tables(schedules[1], spec))
    w = spec.multiplier

    def affine(t: int, signal: float) -> tuple[float, float, float, float]:
        regime = int(round(signal))
        if regime not in (1, 2):
            raise ValueError(f"regime signal must be 1 or 2, got {signal}")
        tab = tables[regime - 1]
        cx, k1, variance = tab.policy_at(t)
        pa2 = tab.p_a2.value(t)
        return cx, k1 * pa2, k1 * w, variance

    return GaussianPolicy.from_affine(affine, kind="coemv_opt")


def bellman_step(
    next_value: QuadraticValue, m: MomentSet, lam: float
) -> tuple[QuadraticValue, tuple[float, float, float], float]:
    """One entropy-regularized minimization step of the backward recursion.

    Expands E[next_value(e0 x + (e1 - e0) u, q l)] exactly in the period's
    moments, minimizes over Gaussian action laws, and returns the new
    quadratic value together with the minimizing policy's mean coefficients
    (mx, ml, mc) and variance.  This is the independent route against which the
    product formulas are tested, and the primitive the policy-improvement
    iteration is built on.
    """
    if lam <= 0.0:
        raise ValueError("exploration weight must be positive")
    cross = m.cross()
    b = next_value.xx * m.b1
    if b <= 0.0:
        raise ValueError(f"extracted action-quadratic coefficient is non-positive ({b})")
    # E[next(x', l')] = alpha_u u^2 + 2 mu(x, l) u + (terms without u)
    mu_x = next_value.xx * cross
    mu_l = 0.5 * next_value.xl * m.a1 * m.a2
    mu_c = 0.5 * next_value.x * m.a1
    mx, ml, mc = -mu_x / b, -mu_l / b, -mu_c / b
    variance = lam / (2.0 * b)
    rest = QuadraticValue(
        xx=next_value.xx * m.b0,
        xl=next_value.xl * m.a0 * m.a2,
        ll=next_value.ll * m.b2,
        x=next_value.x * m.a0,
        l=next_value.l * m.a2,
        c=next_value.c,
    )
    # plugging the minimizing Gaussian into the one-step functional leaves
    # -mu^2 / b + (lam / 2) ln(b / (pi lam)) on top of the u-free terms
    new = QuadraticValue(
        xx=rest.xx - mu_x * mu_x / b,
        xl=rest.xl - 2.0 * mu_x * mu_l / b,
        ll=rest.ll - mu_l * mu_l / b,
        x=rest.x - 2.0 * mu_x * mu_c / b,
        l=rest.l - 2.0 * mu_l * mu_c / b,
        c=rest.c - mu_c * mu_c / b + 0.5 * lam * math.log(b / (math.pi * lam)),
    )
    return new, (mx, ml, mc), variance


def backward_values(schedule: MomentSchedule, spec: ProblemSpec) -> list[QuadraticValue]:
    """Value quadratics for t = 0..T computed purely by backward recursion."""
    out = [terminal_value(spec.multiplier, spec.target)]
    for t in range(spec.horizon - 1, -1, -1):
        nxt, _, _ = bellman_step(out[0], schedule[t], spec.explore_weight)
        out.insert(0, nxt)
    return out


def policy_value_step(
    next_value: QuadraticValue,
    m: MomentSet,
    mean_coeffs: tuple[float, float, float],
    variance: float,
    lam: float,
) -> QuadraticValue:
    """One-step objective of a *given* affine Gaussian policy (no minimization)."""
    if variance < 0.0:
        raise ValueError("policy variance must be non-negative")
    cross = m.cross()
    mx, ml, mc = mean_coeffs
    b = next_value.xx * m.b1
    mu_x = next_value.xx * cross
    mu_l = 0.5 * next_value.xl * m.a1 * m.a2
    mu_c = 0.5 * next_value.x * m.a1
    rest_xx = next_value.xx * m.b0
    rest_xl = next_value.xl * m.a0 * m.a2
    rest_ll = next_value.ll * m.b2
    rest_x = next_value.x * m.a0
    rest_l = next_value.l * m.a2
    rest_c = next_value.c
    # b E[u^2] + 2 E[mu u] with u = mx x + ml l + mc + sqrt(v) xi
    if variance > 0.0:
        entropy = 0.5 * math.log(2.0 * math.pi * math.e * variance)
    else:
        entropy = -math.inf  # degenerate policy: objective diverges unless lam = 0
    c_from_noise = b * variance - lam * entropy
    return QuadraticValue(
        xx=rest_xx + b * mx * mx + 2.0 * mu_x * mx,
        xl=rest_xl + 2.0 * b * mx * ml + 2.0 * (mu_x * ml + mu_l * mx),
        ll=rest_ll + b * ml * ml + 2.0 * mu_l * ml,
        x=rest_x + 2.0 * b * mx * mc + 2.0 * (mu_x * mc + mu_c * mx),
        l=rest_l + 2.0 * b * ml * mc + 2.0 * (mu_l * mc + mu_c * ml),
        c=rest_c + b * mc * mc + 2.0 * mu_c * mc + c_from_noise,
    )


def bellman_residual(
    t: int,
    x: float,
    l: float,
    schedule: MomentSchedule,
    spec: ProblemSpec,
    quad_order: int,
) -> float:
    """|RHS - value_function(t, x, l)| for the one-step recursion.

    The RHS integrates over the optimal Gaussian action with Gauss-Hermite
    quadrature while the return expectation is expanded exactly in moments, so
    the check shares no code with the product-form value function.
    """
    if quad_order < 5:
        raise ValueError("quad_order must be >= 5")
    tables = _tables(schedule, spec)
    lam = spec.explore_weight
    mean, variance = tables.mean_variance(t, x, l)
    next_q = tables.value_quadratic(t + 1)
    m = schedule[t]
    cross = m.cross()

    nodes, weights = np.polynomial.hermite.hermgauss(quad_order)
    u = mean + math.sqrt(2.0 * variance) * nodes

    exp_next = (
        next_q.xx * (m.b0 * x * x + 2.0 * cross * x * u + m.b1 * u * u)
        + next_q.xl * m.a2 * l * (m.a0 * x + m.a1 * u)
        + next_q.ll * m.b2 * l * l
        + next_q.x * (m.a0 * x + m.a1 * u)
        + next_q.l * m.a2 * l
        + next_q.c
    )
    log_pi = -0.5 * math.log(2.0 * math.pi * variance) - (u - mean) ** 2 / (2.0 * variance)
    rhs = float(np.sum(weights * (exp_next + lam * log_pi)) / math.sqrt(math.pi))
    lhs = tables.value_quadratic(t)(x, l)
    return abs(rhs - lhs)


def policy_table_rows(schedule: MomentSchedule, spec: ProblemSpec) -> list[dict]:
    """Per-period affine coefficients and variance, for CSV dumps."""
    tables = _tables(schedule, spec)
    rows = []
    for t in range(spec.horizon):
        cx, k1, variance = tables.policy_at(t)
        pa2 = tables.p_a2.value(t)
        rows.append(
            {
                "t": t,
                "mean_x_coeff": cx,
                "mean_l_coeff": k1 * pa2,
                "mean_const": k1 * spec.multiplier,
                "variance": variance,
            }
        )
    return rows


def with_multiplier(spec: ProblemSpec, w: float) -> ProblemSpec:
    """Copy of the spec at a different constraint multiplier."""
    return replace(spec, multiplier=w)
