"""Stage objectives, their quadratic forms, and the profit safeguard.

Expected hourly profit is an exact quadratic in the decision vector
X = [prices, purchase]; satisfaction and grid impact are quadratics in the
prices alone.  The safeguard evaluates the probability of profit falling
below a threshold from the closed-form Gaussian tail of the profit noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .demand import ElasticityModel
from .errors import InfeasibleStageError
from .scenario import SafeguardConfig, SatisfactionParams, StorageModel

NORMALIZER_FLOOR = 1e-9
ACTIVE_BAND = 1e-3


# ---------------------------------------------------------------------------
# Gaussian helpers (|error| < 1e-12 throughout)

_SQRT2 = math.sqrt(2.0)


def normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / _SQRT2))


def normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def normal_ppf(p: float) -> float:
    """Inverse standard-normal CDF by Newton iteration with bisection guard."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile must be in (0,1), got {p}")
    lo, hi = -40.0, 40.0
    x = 0.0
    for _ in range(200):
        err = normal_cdf(x) - p
        if err > 0:
            hi = x
        else:
            lo = x
        d = normal_pdf(x)
        step = err / d if d > 1e-300 else 0.0
        x_new = x - step
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) < 1e-14:
            return x_new
        x = x_new
    return x


# ---------------------------------------------------------------------------
# stage data

@dataclass(frozen=True)
class StageContext:
    """Everything needed to price one horizon from one state."""
    horizon: int                     # 1-based
    storage_mwh: float               # level at the start of the hour
    renewable_mwh: float             # generation during the hour
    wholesale_price: float
    elasticity: ElasticityModel
    response_cols: np.ndarray        # voltage response per MWh, (rows, L)
    storage: StorageModel
    satisfaction: SatisfactionParams

    def __post_init__(self):
        if not 0.0 <= self.storage_mwh <= self.storage.capacity_mwh + 1e-9:
            raise ValueError(f"storage level {self.storage_mwh} outside [0, {self.storage.capacity_mwh}]")
        if self.renewable_mwh < 0:
            raise ValueError("renewable energy must be nonnegative")


@dataclass(frozen=True)
class Decision:
    prices: np.ndarray               # $/MWh per station
    purchase: float                  # MWh bought from the wholesale market

    def __post_init__(self):
        object.__setattr__(self, "prices", np.asarray(self.prices, dtype=float))

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.prices, [self.purchase]])


@dataclass(frozen=True)
class Normalizers:
    w_max: float
    g_max: float
    f_max: float

    def __post_init__(self):
        for name in ("w_max", "g_max", "f_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"normalizer {name} must be positive")


@dataclass(frozen=True)
class SafeguardReport:
    probability: float
    satisfied: bool
    active: bool
    degenerate: bool = False


# ---------------------------------------------------------------------------
# raw objectives

def gamma_terms(model: ElasticityModel) -> tuple[np.ndarray, float]:
    """Per-station total price slopes and total intercept of aggregate demand."""
    return model.total_price_slopes, float(model.intercepts.sum())


def profit(ctx: StageContext, dec: Decision, demands, noise_mwh: float = 0.0) -> float:
    """Realized hourly profit: revenue minus procurement and storage-carrying cost."""
    demands = np.asarray(demands, dtype=float)
    st = ctx.storage
    end_storage = (ctx.storage_mwh + st.charge_efficiency * ctx.renewable_mwh
                   + st.charge_efficiency * dec.purchase
                   - demands.sum() / st.discharge_efficiency + noise_mwh)
    return float(dec.prices @ demands - ctx.wholesale_price * dec.purchase
                 - st.unit_cost * end_storage)


def satisfaction(phi_mwh: float, params: SatisfactionParams, capacity_mwh: float) -> float:
    """Aggregate customer satisfaction at total consumption phi."""
    if not -1e-9 <= phi_mwh <= capacity_mwh + 1e-9:
        raise ValueError(f"total demand {phi_mwh} outside [0, {capacity_mwh}]")
    return float(-params.alpha / 2.0 * phi_mwh ** 2 + params.omega * phi_mwh)


def stage_utility(w: float, g: float, f: float, weights, normalizers: Normalizers) -> float:
    """Weighted normalized combination of the three objectives."""
    lam = np.asarray(weights.as_array() if hasattr(weights, "as_array") else weights, dtype=float)
    return float(lam[0] * w / normalizers.w_max + lam[1] * g / normalizers.g_max
                 - lam[2] * f / normalizers.f_max)


# ---------------------------------------------------------------------------
# quadratic forms over the decision vector

@dataclass(frozen=True)
class QuadForm:
    """q(x) = x' A x + b' x + c  (A not halved)."""
    a: np.ndarray
    b: np.ndarray
    c: float

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.a @ x + self.b @ x + self.c)


def profit_quadratic(ctx: StageContext) -> QuadForm:
    """Expected profit as a quadratic in X = [prices, purchase]."""
    m = ctx.elasticity
    st = ctx.storage
    L = m.n_stations
    gam, gam0 = gamma_terms(m)
    a = np.zeros((L + 1, L + 1))
    a[:L, :L] = (m.cross - np.diag(m.self_elasticities))     # symmetric price block
    b = np.empty(L + 1)
    b[:L] = m.intercepts + st.unit_cost / st.discharge_efficiency * gam
    b[L] = -(ctx.wholesale_price + st.unit_cost * st.charge_efficiency)
    t = st.unit_cost * (gam0 / st.discharge_efficiency - ctx.storage_mwh
                        - st.charge_efficiency * ctx.renewable_mwh)
    return QuadForm(a=a, b=b, c=t)


def satisfaction_quadratic(ctx: StageContext) -> QuadForm:
    """Expected satisfaction as a quadratic in the prices.

    The constant term carries the demand-noise variance penalty from the
    curvature of the satisfaction curve.
    """
    m = ctx.elasticity
    p = ctx.satisfaction
    gam, gam0 = gamma_terms(m)
    var_sum = float(np.sum(m.noise_std ** 2))
    a = -p.alpha / 2.0 * np.outer(gam, gam)
    b = (p.omega - p.alpha * gam0) * gam
    c = p.omega * gam0 - p.alpha / 2.0 * (gam0 ** 2 + var_sum)
    return QuadForm(a=a, b=b, c=c)


def impact_quadratic(ctx: StageContext) -> QuadForm:
    """Expected grid impact as a quadratic in the prices.

    Uses the station voltage-response columns of the per-horizon Jacobian
    inverse; the constant carries the demand-noise contribution.
    """
    m = ctx.elasticity
    cols = ctx.response_cols
    theta0 = cols @ m.intercepts
    theta = cols @ m.price_response
    noise = float(np.sum((m.noise_std ** 2) * np.sum(cols ** 2, axis=0)))
    return QuadForm(a=theta.T @ theta, b=2.0 * theta.T @ theta0,
                    c=float(theta0 @ theta0) + noise)


def expected_impact(ctx: StageContext, prices) -> float:
    return impact_quadratic(ctx)(np.asarray(prices, dtype=float))


def deterministic_impact(ctx: StageContext, demands) -> float:
    """Impact of a concrete demand vector (no noise term)."""
    v = ctx.response_cols @ np.asarray(demands, dtype=float)
    return float(v @ v)


# ---------------------------------------------------------------------------
# profit safeguard

def profit_noise_std(ctx: StageContext, prices) -> float:
    """Std of the hourly profit around its mean at the given prices."""
    st = ctx.storage
    prices = np.asarray(prices, dtype=float)
    sigma2 = ctx.elasticity.noise_std ** 2
    var = float(np.sum((prices + st.unit_cost / st.discharge_efficiency) ** 2 * sigma2)
                + st.unit_cost ** 2 * st.process_noise_std ** 2)
    return math.sqrt(var)


def safeguard_probability(ctx: StageContext, dec: Decision, min_profit: float) -> float:
    """Probability that realized profit falls below the threshold.

    With all noise sources at zero the distribution collapses; the result is
    then the 0/1 step (0.5 on the boundary) reported by safeguard_check as
    degenerate.
    """
    x = dec.stacked()
    mean_w = profit_quadratic(ctx)(x)
    sigma = profit_noise_std(ctx, dec.prices)
    if sigma == 0.0:
        diff = min_profit - mean_w
        return 0.5 if diff == 0.0 else (1.0 if diff > 0 else 0.0)
    return normal_cdf((min_profit - mean_w) / sigma)


def safeguard_check(ctx: StageContext, dec: Decision, cfg: SafeguardConfig) -> SafeguardReport:
    prob = safeguard_probability(ctx, dec, cfg.min_profit)
    degenerate = profit_noise_std(ctx, dec.prices) == 0.0
    return SafeguardReport(
        probability=prob,
        satisfied=prob < cfg.risk_level,
        active=abs(prob - cfg.risk_level) <= ACTIVE_BAND,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# stage feasibility and normalizers

@dataclass(frozen=True)
class StageBounds:
    """Deterministic feasible set of one stage: box bounds plus the storage
    corridor on total demand y given the purchase o:
    lo(o) <= y <= hi(o) keeps next storage inside [0, capacity]."""
    price_cap: float
    purchase_cap: float
    storage_mwh: float
    renewable_mwh: float
    storage: StorageModel

    def inflow(self, purchase: float) -> float:
        st = self.storage
        return self.storage_mwh + st.charge_efficiency * (self.renewable_mwh + purchase)

    def demand_window(self, purchase: float) -> tuple[float, float]:
        st = self.storage
        c = self.inflow(purchase)
        return (max(0.0, st.discharge_efficiency * (c - st.capacity_mwh)),
                st.discharge_efficiency * c)


def feasible(ctx: StageContext, dec: Decision, bounds: StageBounds, tol: float = 1e-7) -> bool:
    """Deterministic feasibility of a decision at the stage's state."""
    p = dec.prices
    if np.any(p < -tol) or np.any(p > bounds.price_cap + tol):
        return False
    if not -tol <= dec.purchase <= bounds.purchase_cap + tol:
        return False
    mean = ctx.elasticity.intercepts + ctx.elasticity.price_response @ p
    if np.any(mean < -tol):
        return False
    lo, hi = bounds.demand_window(dec.purchase)
    return lo - tol <= mean.sum() <= hi + tol


def max_satisfaction(params: SatisfactionParams, capacity_mwh: float) -> float:
    phi = min(max(params.omega / params.alpha, 0.0), capacity_mwh)
    return satisfaction(phi, params, capacity_mwh)


def compute_normalizers(ctx: StageContext, bounds: StageBounds) -> Normalizers:
    """Per-horizon scales: each objective maximized alone over the stage set.

    The impact scale is the impact of the feasible demand extreme (demands at
    zero prices, shrunk into the storage corridor).  All scales are floored
    to keep the normalized utility well defined.
    """
    _, w_max = maximize_expected_profit(ctx, bounds)
    g_max = max_satisfaction(ctx.satisfaction, ctx.storage.capacity_mwh)
    gam0_vec = ctx.elasticity.intercepts
    _, y_hi = bounds.demand_window(bounds.purchase_cap)
    total = gam0_vec.sum()
    scale = min(1.0, y_hi / total) if total > 0 else 0.0
    f_max = deterministic_impact(ctx, gam0_vec * scale)
    return Normalizers(w_max=max(w_max, NORMALIZER_FLOOR),
                       g_max=max(g_max, NORMALIZER_FLOOR),
                       f_max=max(f_max, NORMALIZER_FLOOR))


def maximize_expected_profit(ctx: StageContext, bounds: StageBounds,
                             sweeps: int = 60, tol: float = 1e-10) -> tuple[Decision, float]:
    """Maximize expected profit alone by cyclic coordinate ascent.

    Each price coordinate has a closed-form 1-D quadratic maximum over the
    interval cut out by the box, nonnegative-demand, and storage constraints;
    the purchase is always driven to its feasible minimum because its profit
    slope is negative.
    """
    m = ctx.elasticity
    st = ctx.storage
    L = m.n_stations
    quad = profit_quadratic(ctx)
    a, b = quad.a, quad.b
    resp = m.price_response
    gam, _ = gamma_terms(m)

    def min_purchase(y: float) -> float:
        # smallest o with next storage >= 0
        need = (y / st.discharge_efficiency - ctx.storage_mwh
                - st.charge_efficiency * ctx.renewable_mwh) / st.charge_efficiency
        return min(max(need, 0.0), bounds.purchase_cap)

    best = None
    # widest demand corridor over all purchase choices: the lower edge comes
    # from buying nothing, the upper from buying the cap
    y_lo = bounds.demand_window(0.0)[0]
    y_hi = bounds.demand_window(bounds.purchase_cap)[1]
    starts = [np.zeros(L), np.full(L, bounds.price_cap / 2.0), np.full(L, bounds.price_cap)]
    for p0 in starts:
        p = p0.copy()
        for _ in range(sweeps):
            moved = 0.0
            for j in range(L):
                lo_j, hi_j = 0.0, bounds.price_cap
                # keep every station's mean demand nonnegative
                for i in range(L):
                    slope = resp[i, j]
                    rest = m.intercepts[i] + resp[i] @ p - slope * p[j]
                    if slope < 0:
                        hi_j = min(hi_j, rest / -slope)
                    elif slope > 0:
                        lo_j = max(lo_j, -rest / slope)
                # keep total demand inside the widest storage corridor
                y_rest = m.intercepts.sum() + gam @ p - gam[j] * p[j]
                if gam[j] < 0:
                    lo_j = max(lo_j, (y_rest - y_hi) / -gam[j])
                    hi_j = min(hi_j, (y_rest - y_lo) / -gam[j])
                if lo_j > hi_j + 1e-9:
                    continue
                # 1-D quadratic in p_j: coefficient a_jj, slope from the rest
                lin = b[j] + 2.0 * (a[j, :L] @ p) - 2.0 * a[j, j] * p[j]
                if a[j, j] < 0:
                    cand = np.clip(-lin / (2.0 * a[j, j]), lo_j, hi_j)
                else:
                    cand = lo_j if lin < 0 else hi_j
                moved = max(moved, abs(cand - p[j]))
                p[j] = float(np.clip(cand, lo_j, hi_j))
            if moved < tol:
                break
        y = float(m.intercepts.sum() + gam @ p)
        o = min_purchase(max(y, 0.0))
        dec = Decision(prices=p, purchase=o)
        if not feasible(ctx, dec, bounds):
            continue
        val = quad(dec.stacked())
        if best is None or val > best[1]:
            best = (dec, val)
    if best is None:
        raise InfeasibleStageError("no feasible decision while computing the profit scale")
    return best
