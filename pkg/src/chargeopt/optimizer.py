"""Backward stochastic dynamic programming for pricing and procurement.

States are (storage level, renewable level) on a discretized grid.  Each
stage maximizes a quadratic in the decision vector [prices, purchase] plus
the expected continuation value, which is piecewise linear in next-hour
storage.  The purchase is enumerated on a grid; for each candidate the price
block is a small concave QP solved exactly per continuation segment by a
primal active-set method.  The greedy benchmark runs the same stage solver
with a zero continuation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import objective as obj
from .demand import predict_demand
from .errors import ChargeOptError, InfeasibleStageError
from .grid import assemble_jacobian, invert_jacobian, solve_power_flow, station_response_columns
from .objective import Decision, Normalizers, StageBounds, StageContext
from .scenario import Scenario

_VALUE_TOL = 1e-9


# ---------------------------------------------------------------------------
# small dense active-set QP (maximization form)

def max_concave_qp(a2: np.ndarray, lin: np.ndarray, g_rows: np.ndarray, h: np.ndarray,
                   x0: np.ndarray, ridge: float = 1e-10, max_iter: int = 80):
    """Maximize x' a2 x + lin' x subject to g_rows @ x <= h, from feasible x0.

    a2 must be symmetric negative semidefinite; the ridge keeps the Newton
    system definite so flat directions resolve deterministically.  Returns
    (x, converged).
    """
    n = len(lin)
    p_mat = -(a2 + a2.T) + ridge * np.eye(n)
    x = np.asarray(x0, dtype=float).copy()
    slack = h - g_rows @ x
    if np.min(slack) < -1e-7:
        return x, False
    working = [i for i in range(len(h)) if slack[i] <= 1e-10]

    for _ in range(max_iter):
        k = len(working)
        gw = g_rows[working] if k else np.zeros((0, n))
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = p_mat
        if k:
            kkt[:n, n:] = gw.T
            kkt[n:, :n] = gw
        rhs = np.concatenate([lin, h[working]]) if k else lin
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        x_eq, lam = sol[:n], sol[n:]
        d = x_eq - x
        if np.max(np.abs(d)) < 1e-11:
            if k == 0 or np.min(lam) >= -1e-9:
                return x, True
            working.pop(int(np.argmin(lam)))
            continue
        # ratio test against constraints outside the working set
        alpha, blocker = 1.0, None
        gd = g_rows @ d
        gx = g_rows @ x
        for i in range(len(h)):
            if i in working or gd[i] <= 1e-13:
                continue
            a_i = (h[i] - gx[i]) / gd[i]
            if a_i < alpha - 1e-14:
                alpha, blocker = a_i, i
        x = x + max(alpha, 0.0) * d
        if blocker is not None:
            working.append(blocker)
    return x, False


# ---------------------------------------------------------------------------
# stage problem data

@dataclass(frozen=True)
class StateGrid:
    storage: np.ndarray          # sorted MWh points covering [0, capacity]
    n_levels: int

    def __post_init__(self):
        s = np.asarray(self.storage, dtype=float)
        object.__setattr__(self, "storage", s)
        if len(s) < 2 or np.any(np.diff(s) <= 0):
            raise ValueError("storage grid must be sorted with at least two points")

    @classmethod
    def from_scenario(cls, scn: Scenario) -> "StateGrid":
        return cls(storage=np.linspace(0.0, scn.storage.capacity_mwh, scn.sdp.storage_points),
                   n_levels=scn.renewable_chain.n_levels)


@dataclass(frozen=True)
class StageQP:
    """Stage objective in quadratic form: E{utility}(X) = 0.5 X'QX + B'X + r.

    r is the state constant plus the continuation expectation supplied at
    solve time: r(cont) = r_const + cont.
    """
    q: np.ndarray
    b: np.ndarray
    r_const: float

    def r(self, continuation: float = 0.0) -> float:
        return self.r_const + continuation

    def __call__(self, x, continuation: float = 0.0) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.q @ x + self.b @ x + self.r(continuation))

    @property
    def a_price(self) -> np.ndarray:
        return 0.5 * self.q[:-1, :-1]

    @property
    def b_price(self) -> np.ndarray:
        return self.b[:-1]

    @property
    def b_purchase(self) -> float:
        return float(self.b[-1])


def assemble_stage_qp(ctx: StageContext, weights, normalizers: Normalizers) -> StageQP:
    """Combine the three objective quadratics with normalized weights."""
    lam = np.asarray(weights.as_array() if hasattr(weights, "as_array") else weights, dtype=float)
    l1 = lam[0] / normalizers.w_max
    l2 = lam[1] / normalizers.g_max
    l3 = lam[2] / normalizers.f_max
    w_q = obj.profit_quadratic(ctx)
    g_q = obj.satisfaction_quadratic(ctx)
    f_q = obj.impact_quadratic(ctx)
    n = ctx.elasticity.n_stations
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = l1 * w_q.a[:n, :n] + l2 * g_q.a - l3 * f_q.a
    b = np.empty(n + 1)
    b[:n] = l1 * w_q.b[:n] + l2 * g_q.b - l3 * f_q.b
    b[n] = l1 * w_q.b[n]
    r = l1 * w_q.c + l2 * g_q.c - l3 * f_q.c
    return StageQP(q=2.0 * a, b=b, r_const=float(r))


@dataclass
class StageSolution:
    decision: Decision
    value: float                      # optimal expected utility-to-go
    safeguard_probability: float
    safeguard_active: bool
    safeguard_satisfied: bool
    chance_constrained: bool = False  # solver enforced the safeguard


@dataclass
class Policy:
    kind: str                          # "sdp" | "greedy"
    state_grid: StateGrid
    decisions: np.ndarray              # (K, D, nI, L+1), NaN where infeasible
    values: np.ndarray                 # (K+1, D, nI) expected utility-to-go
    safeguard_probability: np.ndarray  # (K, D, nI)
    safeguard_active: np.ndarray       # bool (K, D, nI)
    normalizers: list[Normalizers]
    scenario_digest: str = ""

    def decision_at(self, k: int, level: int, storage: float) -> Decision:
        """Interpolate the stored decision across the storage grid."""
        grid = self.state_grid.storage
        s = float(np.clip(storage, grid[0], grid[-1]))
        i = int(np.clip(np.searchsorted(grid, s) - 1, 0, len(grid) - 2))
        t = (s - grid[i]) / (grid[i + 1] - grid[i])
        row = self.decisions[k - 1, level - 1]
        if np.any(np.isnan(row[i])) or np.any(np.isnan(row[i + 1])):
            raise ChargeOptError(
                f"policy has no feasible decision near horizon {k}, level {level}, storage {storage:.2f}")
        x = (1.0 - t) * row[i] + t * row[i + 1]
        return Decision(prices=x[:-1], purchase=float(x[-1]))

    def value_at(self, k: int, level: int, storage: float) -> float:
        return float(np.interp(storage, self.state_grid.storage, self.values[k - 1, level - 1]))


class _Piecewise:
    """Linear interpolant with exposed segment slopes."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        self.x = x
        self.y = y
        self.slopes = np.diff(y) / np.diff(x)

    def __call__(self, v: float) -> float:
        return float(np.interp(v, self.x, self.y))

    @property
    def n_segments(self) -> int:
        return len(self.slopes)


def next_storage(storage: float, renewable: float, purchase: float, total_demand: float,
                 noise: float, model) -> tuple[float, float]:
    """Storage transition with clamping; returns (next level, signed spill).

    Positive spill is overflow discarded at the capacity ceiling, negative
    spill is the unserved discharge when the level would have gone below
    zero.
    """
    raw = (storage + model.charge_efficiency * (renewable + purchase)
           - total_demand / model.discharge_efficiency + noise)
    clipped = min(max(raw, 0.0), model.capacity_mwh)
    return clipped, raw - clipped


# ---------------------------------------------------------------------------
# the stage engine

class StageEngine:
    """Scenario-level precomputation plus per-state stage solves.

    The price response must be drivable to zero demand with nonnegative
    prices (diagonally dominant elasticities); that shrink ray provides
    feasible starting points for every demand window.
    """

    def __init__(self, scenario: Scenario):
        self.scn = scenario
        net = scenario.network
        sol = solve_power_flow(net)
        self.jacobian_inverse = invert_jacobian(assemble_jacobian(net, sol))
        self.response_cols = station_response_columns(self.jacobian_inverse,
                                                      scenario.station_map, net.base_mva)

        m = scenario.elasticity
        self.L = m.n_stations
        self.K = scenario.horizons
        self.D = scenario.renewable_chain.n_levels
        self.capacity = scenario.storage.capacity_mwh
        self.eta_c = scenario.storage.charge_efficiency
        self.eta_d = scenario.storage.discharge_efficiency
        self.gam, self.gamma0 = obj.gamma_terms(m)
        self.p_zero = np.linalg.solve(m.price_response, -m.intercepts)
        if np.any(self.p_zero < -1e-9) or self.gamma0 <= 0:
            raise ChargeOptError("demand system cannot be driven to zero with nonnegative prices; "
                                 "check elasticity coefficients")
        self.p_zero = np.maximum(self.p_zero, 0.0)
        cap = scenario.price_cap
        pz_max = float(np.max(self.p_zero)) if self.L else 0.0
        t_cap = min(1.0, cap / pz_max) if pz_max > 0 else 1.0
        self.y_ray_min = (1.0 - t_cap) * self.gamma0  # smallest demand reachable on the shrink ray

        self.grid = StateGrid.from_scenario(scenario)
        self.o_grid = np.linspace(0.0, scenario.procurement_cap_mwh, scenario.sdp.procurement_steps + 1)
        self.zeta_quantile = obj.normal_ppf(scenario.safeguard.risk_level)

        # static price-space rows: p >= 0, p <= cap, mean demand >= 0
        eye = np.eye(self.L)
        self.g_static = np.vstack([-eye, eye, -m.price_response])
        self.h_static = np.concatenate([np.zeros(self.L), np.full(self.L, cap), m.intercepts])

        self._rows = np.vstack([self.g_static, self.gam[None, :], -self.gam[None, :]])

        self.normalizers: list[Normalizers] = []
        self.stage_qps: list[StageQP] = []
        self.profit_qps: list[obj.QuadForm] = []
        self._fast: list[tuple | None] = []
        solar = scenario.solar_energy
        for k in range(1, self.K + 1):
            ref_ctx = self.context(k, storage=self.capacity / 2.0, renewable=float(solar[k - 1]))
            self.normalizers.append(obj.compute_normalizers(ref_ctx, self.bounds(ref_ctx)))
            zero_ctx = self.context(k, storage=0.0, renewable=0.0)
            self.stage_qps.append(assemble_stage_qp(zero_ctx, scenario.weights, self.normalizers[-1]))
            self.profit_qps.append(obj.profit_quadratic(zero_ctx))
            self._fast.append(self._fast_pieces(self.stage_qps[-1]))

    def _fast_pieces(self, qp: StageQP):
        """Cached solves for the interior shortcut of the segment problem.

        Only available when the price Hessian is strictly negative definite;
        rank-deficient combinations (e.g. a pure-satisfaction weight vector)
        fall back to the active-set path.
        """
        a_pp = qp.a_price
        if self.L == 1:
            return None
        try:
            eig_max = float(np.max(np.linalg.eigvalsh(2.0 * a_pp)))
        except np.linalg.LinAlgError:
            return None
        if eig_max > -1e-10:
            return None
        inv2a = np.linalg.inv(2.0 * a_pp)
        w_b = inv2a @ qp.b_price
        w_g = inv2a @ self.gam
        return (a_pp, qp.b_price, w_b, w_g, float(self.gam @ w_g))

    # -- helpers -------------------------------------------------------------
    def context(self, k: int, storage: float, renewable: float) -> StageContext:
        return StageContext(
            horizon=k,
            storage_mwh=storage,
            renewable_mwh=renewable,
            wholesale_price=float(self.scn.wholesale_prices.values[k - 1]),
            elasticity=self.scn.elasticity,
            response_cols=self.response_cols,
            storage=self.scn.storage,
            satisfaction=self.scn.satisfaction,
        )

    def bounds(self, ctx: StageContext) -> StageBounds:
        return StageBounds(price_cap=self.scn.price_cap,
                           purchase_cap=self.scn.procurement_cap_mwh,
                           storage_mwh=ctx.storage_mwh,
                           renewable_mwh=ctx.renewable_mwh,
                           storage=self.scn.storage)

    def level_value(self, level: int) -> float:
        return self.scn.renewable_chain.value(level)

    def _r_state(self, qp: StageQP, k: int, storage: float, renewable: float) -> float:
        lam1_eff = self.scn.weights.profit / self.normalizers[k - 1].w_max
        eta_s = self.scn.storage.unit_cost
        return qp.r_const - lam1_eff * eta_s * (storage + self.eta_c * renewable)

    def _ray_point(self, y: float) -> np.ndarray:
        t = 1.0 - y / self.gamma0
        return np.clip(t * self.p_zero, 0.0, self.scn.price_cap)

    # -- price solve for one continuation segment ----------------------------
    def _segment_1d(self, qp: StageQP, b_lin: float, y_lo: float, y_hi: float):
        """Closed-form single-station segment: clamp the vertex to the interval."""
        gam = self.gam[0]
        lo = max(0.0, (self.gamma0 - y_hi) / -gam)
        hi = min(self.scn.price_cap, (self.gamma0 - y_lo) / -gam, self.gamma0 / -gam)
        if lo > hi + 1e-12:
            return None
        a = float(qp.a_price[0, 0])
        if a < 0:
            p = min(max(-b_lin / (2.0 * a), lo), hi)
        else:
            p = hi if b_lin > 0 else lo
        return np.array([p])

    def _fast_segment(self, k: int, slope_term: float, y_lo: float, y_hi: float):
        """Closed-form segment solve when no box or demand row binds.

        Uses the cached factorization of the per-horizon price Hessian: the
        unconstrained vertex, shifted onto the demand window when it falls
        outside.  Returns None when a box/demand row binds (caller then runs
        the active-set solver).
        """
        pieces = self._fast[k - 1]
        if pieces is None:
            return None
        _, _, w_b, w_g, g_t_wg = pieces
        p_int = -(w_b - slope_term * w_g)
        y_int = self.gamma0 + float(self.gam @ p_int)
        if y_int < y_lo or y_int > y_hi:
            y_b = y_lo if y_int < y_lo else y_hi
            if g_t_wg == 0.0:
                return None
            mu = (y_int - y_b) / g_t_wg
            p_int = p_int - mu * w_g
        cap = self.scn.price_cap
        if np.any(p_int < -1e-12) or np.any(p_int > cap + 1e-12):
            return None
        mean = self.scn.elasticity.intercepts + self.scn.elasticity.price_response @ p_int
        if np.any(mean < -1e-9):
            return None
        return np.clip(p_int, 0.0, cap)

    def _solve_segment(self, qp: StageQP, b_extra: np.ndarray, y_lo: float, y_hi: float,
                       warm: np.ndarray | None):
        """Maximize the price quadratic with total demand confined to [y_lo, y_hi]."""
        lin = qp.b_price + b_extra
        if self.L == 1:
            return self._segment_1d(qp, float(lin[0]), y_lo, y_hi)
        rows = self._rows
        rhs = np.concatenate([self.h_static, [y_hi - self.gamma0, self.gamma0 - y_lo]])
        x0 = None
        if warm is not None:
            cand = np.clip(warm, 0.0, self.scn.price_cap)
            if np.min(rhs - rows @ cand) >= -1e-9:
                x0 = cand
        if x0 is None:
            x0 = self._ray_point(min(max(0.5 * (y_lo + y_hi), self.y_ray_min), self.gamma0))
            if np.min(rhs - rows @ x0) < -1e-7:
                return None
        scale = max(1e-10, 1e-12 * float(np.abs(np.trace(qp.a_price))))
        p, _ = max_concave_qp(qp.a_price, lin, rows, rhs, x0, ridge=scale)
        if np.min(rhs - rows @ p) < -1e-6:
            return None
        return p

    def _chance_terms(self, k: int, storage: float, renewable: float, purchase: float):
        """Closure computing the safeguard margin g(p) >= 0 and its gradient."""
        st = self.scn.storage
        wq = self.profit_qps[k - 1]
        a_pp = wq.a[: self.L, : self.L]
        sig2 = self.scn.elasticity.noise_std ** 2
        shift = st.unit_cost / st.discharge_efficiency
        noise_floor = st.unit_cost ** 2 * st.process_noise_std ** 2
        quantile = self.zeta_quantile
        # constant part of mean profit: purchase column, state term, threshold
        const = (wq.b[self.L] * purchase + wq.c
                 - st.unit_cost * (storage + self.eta_c * renewable)
                 - self.scn.safeguard.min_profit)
        b_p = wq.b[: self.L]

        def g_and_grad(pv: np.ndarray):
            mean_part = float(pv @ a_pp @ pv + b_p @ pv) + const
            grad_w = 2.0 * a_pp @ pv + b_p
            var = float(np.sum((pv + shift) ** 2 * sig2) + noise_floor)
            sigma = math.sqrt(var)
            gval = mean_part + quantile * sigma
            grad = grad_w if sigma == 0.0 else grad_w + quantile * ((pv + shift) * sig2) / sigma
            return gval, grad

        return g_and_grad

    def _segment_with_chance(self, qp, b_extra, y_lo, y_hi, warm, g_and_grad):
        """Segment solve with the profit safeguard enforced.

        The safeguard region {g >= 0} is convex (g is concave), enforced by
        sequential linearization around the iterate.
        """
        p = self._solve_segment(qp, b_extra, y_lo, y_hi, warm)
        if p is None:
            return None
        gval, grad = g_and_grad(p)
        if gval >= -1e-9:
            return p
        base_rows = self._rows
        base_rhs = np.concatenate([self.h_static, [y_hi - self.gamma0, self.gamma0 - y_lo]])
        lin = qp.b_price + b_extra
        margin = 0.0
        for _ in range(16):
            rows = np.vstack([base_rows, -grad[None, :]])
            rhs = np.concatenate([base_rhs, [gval - grad @ p - margin]])
            x0 = p if np.min(rhs - rows @ p) >= -1e-9 else self._feasible_in_rows(rows, rhs, y_lo, y_hi)
            if x0 is None:
                return None
            p_new, _ = max_concave_qp(qp.a_price, lin, rows, rhs, x0)
            if np.min(base_rhs - base_rows @ p_new) < -1e-6:
                return None
            move = float(np.max(np.abs(p_new - p)))
            p = p_new
            gval, grad = g_and_grad(p)
            if gval >= -1e-7:
                return p
            if move < 1e-10:
                margin += max(-gval, 1e-6)
        return p if gval >= -1e-6 else None

    def _feasible_in_rows(self, rows, rhs, y_lo, y_hi):
        for t in np.linspace(0.0, 1.0, 33):
            y = y_lo + t * (y_hi - y_lo)
            cand = self._ray_point(min(max(y, self.y_ray_min), self.gamma0))
            if np.min(rhs - rows @ cand) >= -1e-9:
                return cand
        return None

    # -- value of the price block at total inflow C ---------------------------
    def _value_at_inflow(self, k: int, qp: StageQP, cont: _Piecewise, c_inflow: float,
                         warm: np.ndarray | None = None, g_and_grad=None,
                         hint: int | None = None):
        """max over prices of the quadratic plus continuation(C - y / eta_d).

        Returns (value, prices, winning segment); the value excludes the
        purchase term and the state constant.  When g_and_grad is given, the
        safeguard is enforced inside each segment.  ``hint`` seeds the
        segment search with a neighboring solve's winner.
        """
        y_floor = max(0.0, self.eta_d * (c_inflow - self.capacity), self.y_ray_min)
        y_ceil = min(self.eta_d * c_inflow, self.gamma0)
        if y_floor > y_ceil + 1e-9:
            return -np.inf, None, -1
        x_grid = cont.x
        lo_idx = int(np.clip(np.searchsorted(x_grid, c_inflow - y_ceil / self.eta_d, side="right") - 1,
                             0, cont.n_segments - 1))
        hi_idx = int(np.clip(np.searchsorted(x_grid, c_inflow - y_floor / self.eta_d, side="left") - 1,
                             0, cont.n_segments - 1))

        a_pp = qp.a_price
        b_p = qp.b_price

        def eval_segment(s: int, warm_p):
            seg_ylo = max(y_floor, self.eta_d * (c_inflow - x_grid[s + 1]))
            seg_yhi = min(y_ceil, self.eta_d * (c_inflow - x_grid[s]))
            if seg_ylo > seg_yhi + 1e-9:
                return None
            slope_term = cont.slopes[s] / self.eta_d
            if g_and_grad is None:
                p = self._fast_segment(k, slope_term, seg_ylo, seg_yhi)
                if p is None:
                    p = self._solve_segment(qp, -slope_term * self.gam, seg_ylo, seg_yhi, warm_p)
            else:
                p = self._segment_with_chance(qp, -slope_term * self.gam, seg_ylo, seg_yhi,
                                              warm_p, g_and_grad)
            if p is None:
                return None
            y = float(self.gamma0 + self.gam @ p)
            value = float(p @ a_pp @ p + b_p @ p) + cont(c_inflow - y / self.eta_d)
            return value, p

        n_seg = hi_idx - lo_idx + 1
        results: dict[int, tuple | None] = {}
        best = [-np.inf, None, -1]

        def try_seg(s: int, warm_p):
            if s not in results:
                results[s] = eval_segment(s, warm_p)
            r = results[s]
            if r is not None and r[0] > best[0] + _VALUE_TOL:
                best[0], best[1], best[2] = r[0], r[1], s
                return True
            return False

        def climb():
            moved = True
            while moved:
                moved = False
                for s in (best[2] - 1, best[2] + 1):
                    if lo_idx <= s <= hi_idx and try_seg(s, best[1]):
                        moved = True

        if n_seg <= 24:
            for s in range(lo_idx, hi_idx + 1):
                try_seg(s, warm)
        else:
            if hint is not None:
                try_seg(int(np.clip(hint, lo_idx, hi_idx)), warm)
            else:
                stride = max(1, n_seg // 8)
                for s in range(lo_idx, hi_idx + 1, stride):
                    try_seg(s, warm)
            if best[2] >= 0:
                climb()
            # guard against a local trap on a non-concave continuation
            for s in (lo_idx, hi_idx):
                if try_seg(s, best[1] if best[1] is not None else warm):
                    climb()
            if best[1] is None:
                for s in range(lo_idx, hi_idx + 1):
                    try_seg(s, warm)
        return best[0], best[1], best[2]

    # -- full stage solve at one state ----------------------------------------
    def solve_state(self, k: int, level: int, storage: float, cont: _Piecewise,
                    qp: StageQP | None = None, enforce_chance: bool | None = None) -> StageSolution:
        """Exact stage solve at one (horizon, renewable level, storage) state."""
        u = self.level_value(level)
        qp = qp or self.stage_qps[k - 1]
        if enforce_chance is None:
            enforce_chance = self.scn.safeguard.enforcement == "penalize"
        best = (-np.inf, None, None)
        warm = None
        for o in self.o_grid:
            c_inflow = storage + self.eta_c * (u + o)
            gg = self._chance_terms(k, storage, u, float(o)) if enforce_chance else None
            val, p = self._value_at_inflow(k, qp, cont, c_inflow, warm=warm, g_and_grad=gg)
            if p is None:
                continue
            warm = p
            total = val + qp.b_purchase * o
            if total > best[0] + _VALUE_TOL:
                best = (total, p, float(o))
        if best[1] is None:
            raise InfeasibleStageError(
                f"no feasible decision at horizon {k}, level {level}, storage {storage:.3f}")
        value = best[0] + self._r_state(qp, k, storage, u)
        dec = Decision(prices=best[1], purchase=best[2])
        ctx = self.context(k, storage=storage, renewable=u)
        report = obj.safeguard_check(ctx, dec, self.scn.safeguard)
        return StageSolution(decision=dec, value=value,
                             safeguard_probability=report.probability,
                             safeguard_active=report.active,
                             safeguard_satisfied=report.satisfied,
                             chance_constrained=bool(enforce_chance))

    # -- one full horizon over the state grid ---------------------------------
    def solve_horizon(self, k: int, j_next: np.ndarray):
        """Solve every state of horizon k given next-horizon values (nI, D).

        The price-block value is swept once per renewable level over the
        distinct total-inflow points (exact when the state/purchase product
        is small, a uniform sample otherwise); each state then picks its
        purchase from that curve.  States where the profit safeguard binds
        are re-solved with the constraint enforced per purchase candidate.

        Returns (values (nI, D), decisions (D, nI, L+1), probabilities,
        active flags).
        """
        n_i = len(self.grid.storage)
        values = np.full((n_i, self.D), -np.inf)
        decisions = np.full((self.D, n_i, self.L + 1), np.nan)
        probs = np.full((self.D, n_i), np.nan)
        active = np.zeros((self.D, n_i), dtype=bool)
        trans = self.scn.renewable_chain.transitions[k - 1]
        penalize = self.scn.safeguard.enforcement == "penalize"
        qp = self.stage_qps[k - 1]
        exact = n_i * len(self.o_grid) <= self.scn.sdp.exact_pair_limit

        for lvl in range(1, self.D + 1):
            mixed = self._mix_continuation(j_next, trans[lvl - 1])
            cont = _Piecewise(self.grid.storage, mixed)
            u = self.level_value(lvl)

            def store(i, sol: StageSolution):
                values[i, lvl - 1] = sol.value
                decisions[lvl - 1, i] = sol.decision.stacked()
                probs[lvl - 1, i] = sol.safeguard_probability
                active[lvl - 1, i] = sol.safeguard_active

            if exact:
                pairs = np.round(self.grid.storage[:, None] + self.eta_c * (u + self.o_grid[None, :]), 9)
                c_list = np.unique(pairs)
            else:
                c_list = np.linspace(self.eta_c * u,
                                     self.capacity + self.eta_c * (u + self.o_grid[-1]),
                                     self.scn.sdp.value_samples)
            v_curve = np.full(len(c_list), -np.inf)
            p_curve = np.full((len(c_list), self.L), np.nan)
            warm = None
            for idx, c_val in enumerate(c_list):
                val, p = self._value_at_inflow(k, qp, cont, float(c_val), warm=warm)
                if p is not None:
                    v_curve[idx] = val
                    p_curve[idx] = p
                    warm = p
            finite = np.isfinite(v_curve)

            for i, s_i in enumerate(self.grid.storage):
                c_vals = np.round(s_i + self.eta_c * (u + self.o_grid), 9)
                if exact:
                    right = np.clip(np.searchsorted(c_list, c_vals), 0, len(c_list) - 1)
                    left = np.clip(right - 1, 0, len(c_list) - 1)
                    idxs = np.where(np.abs(c_list[left] - c_vals) <= np.abs(c_list[right] - c_vals),
                                    left, right)
                    cand_vals = v_curve[idxs]
                elif finite.any():
                    cand_vals = np.interp(c_vals, c_list[finite], v_curve[finite])
                    cand_vals[(c_vals < c_list[finite][0]) | (c_vals > c_list[finite][-1])] = -np.inf
                else:
                    cand_vals = np.full(len(c_vals), -np.inf)
                totals = cand_vals + qp.b_purchase * self.o_grid
                placed = False
                # stable sort so value ties resolve to the smallest purchase
                for cand in np.argsort(-totals, kind="stable")[:4]:
                    if not np.isfinite(totals[cand]):
                        break
                    o = float(self.o_grid[cand])
                    if exact:
                        val, p = float(cand_vals[cand]), p_curve[idxs[cand]]
                    else:
                        val, p = self._value_at_inflow(k, qp, cont, float(c_vals[cand]), warm=warm)
                        if p is None:
                            continue
                    dec = Decision(prices=p, purchase=o)
                    ctx = self.context(k, storage=float(s_i), renewable=u)
                    report = obj.safeguard_check(ctx, dec, self.scn.safeguard)
                    needs_chance = penalize and (
                        not (report.satisfied or report.active)
                        or report.probability > 0.5 * self.scn.safeguard.risk_level)
                    if needs_chance:
                        # the safeguard shapes this state's optimum: scan
                        # purchases exactly with the constraint enforced
                        try:
                            store(i, self.solve_state(k, lvl, float(s_i), cont))
                            placed = True
                        except InfeasibleStageError:
                            pass
                        break
                    store(i, StageSolution(
                        decision=dec,
                        value=val + qp.b_purchase * o + self._r_state(qp, k, float(s_i), u),
                        safeguard_probability=report.probability,
                        safeguard_active=report.active,
                        safeguard_satisfied=report.satisfied,
                        chance_constrained=False))
                    placed = True
                    break
                if not placed and not np.isfinite(values[i, lvl - 1]):
                    try:
                        store(i, self.solve_state(k, lvl, float(s_i), cont))
                    except InfeasibleStageError:
                        continue
        return values, decisions, probs, active

    @staticmethod
    def _mix_continuation(j_next: np.ndarray, row: np.ndarray) -> np.ndarray:
        reachable = row > 0.0
        cols = j_next[:, reachable]
        if np.any(~np.isfinite(cols)):
            mixed = np.where(np.isfinite(cols), cols, 0.0) @ row[reachable]
            mixed[~np.isfinite(cols).all(axis=1)] = -np.inf
            return mixed
        return cols @ row[reachable]

    def terminal_values(self) -> np.ndarray:
        lam1_eff = self.scn.weights.profit / self.normalizers[-1].w_max
        salvage = self.scn.terminal_salvage_price
        return np.tile((lam1_eff * salvage * self.grid.storage)[:, None], (1, self.D))


# ---------------------------------------------------------------------------
# public solvers

def sdp_solve(scenario: Scenario, engine: StageEngine | None = None) -> Policy:
    """Backward dynamic program over the discretized state grid."""
    engine = engine or StageEngine(scenario)
    big_k, d, n_i, n_st = engine.K, engine.D, len(engine.grid.storage), engine.L
    values = np.empty((big_k + 1, d, n_i))
    values[big_k] = engine.terminal_values().T
    decisions = np.full((big_k, d, n_i, n_st + 1), np.nan)
    probs = np.full((big_k, d, n_i), np.nan)
    active = np.zeros((big_k, d, n_i), dtype=bool)
    for k in range(big_k, 0, -1):
        vals, decs, pr, ac = engine.solve_horizon(k, values[k].T)
        values[k - 1] = vals.T
        decisions[k - 1] = decs
        probs[k - 1] = pr
        active[k - 1] = ac
    return Policy(kind="sdp", state_grid=engine.grid, decisions=decisions,
                  values=values, safeguard_probability=probs, safeguard_active=active,
                  normalizers=engine.normalizers, scenario_digest=scenario.digest())


def greedy_solve(scenario: Scenario, engine: StageEngine | None = None) -> Policy:
    """Single-horizon maximization at every state (zero continuation)."""
    engine = engine or StageEngine(scenario)
    big_k, d, n_i, n_st = engine.K, engine.D, len(engine.grid.storage), engine.L
    values = np.zeros((big_k + 1, d, n_i))
    decisions = np.full((big_k, d, n_i, n_st + 1), np.nan)
    probs = np.full((big_k, d, n_i), np.nan)
    active = np.zeros((big_k, d, n_i), dtype=bool)
    zero_next = np.zeros((n_i, d))
    for k in range(1, big_k + 1):
        vals, decs, pr, ac = engine.solve_horizon(k, zero_next)
        values[k - 1] = vals.T
        decisions[k - 1] = decs
        probs[k - 1] = pr
        active[k - 1] = ac
    return Policy(kind="greedy", state_grid=engine.grid, decisions=decisions,
                  values=values, safeguard_probability=probs, safeguard_active=active,
                  normalizers=engine.normalizers, scenario_digest=scenario.digest())


def solve_stage(qp: StageQP, ctx: StageContext, bounds: StageBounds, continuation,
                engine: StageEngine, level: int = 1) -> StageSolution:
    """Solve one stage problem for an explicit QP and continuation function."""
    if abs(bounds.purchase_cap - engine.scn.procurement_cap_mwh) > 1e-9 \
            or abs(bounds.price_cap - engine.scn.price_cap) > 1e-9:
        raise ValueError("stage bounds must match the engine's scenario caps")
    grid = engine.grid.storage
    cont = _Piecewise(grid, np.array([float(continuation(s)) for s in grid]))
    return engine.solve_state(ctx.horizon, level, ctx.storage_mwh, cont, qp=qp)


# ---------------------------------------------------------------------------
# forward simulation

@dataclass
class Trajectory:
    horizon: np.ndarray
    storage: np.ndarray              # level at the start of each horizon
    renewable_level: np.ndarray
    renewable: np.ndarray            # MWh modeled for the hour
    purchase: np.ndarray
    prices: np.ndarray               # (K, L)
    demands: np.ndarray              # realized, clamped at zero
    noise: np.ndarray                # storage process noise draws
    spill: np.ndarray                # signed clamping amounts
    profit: np.ndarray
    satisfaction: np.ndarray
    impact: np.ndarray
    utility: np.ndarray
    safeguard_active: np.ndarray
    events: list = field(default_factory=list)

    @property
    def total_profit(self) -> float:
        return float(self.profit.sum())

    @property
    def total_utility(self) -> float:
        return float(self.utility.sum())


@dataclass
class SimulationSummary:
    n_runs: int
    mean_total_utility: float
    ci_total_utility: tuple[float, float]
    mean_total_profit: float
    ci_total_profit: tuple[float, float]


def simulate_policy(policy: Policy, scenario: Scenario, n_runs: int,
                    rng: np.random.Generator, engine: StageEngine | None = None,
                    ) -> tuple[list[Trajectory], SimulationSummary]:
    """Monte-Carlo rollouts of a policy under the scenario's noise model."""
    engine = engine or StageEngine(scenario)
    chain = scenario.renewable_chain
    st = scenario.storage
    big_k, n_st = scenario.horizons, scenario.stations
    sigma = scenario.elasticity.noise_std
    trajectories = []
    for _ in range(n_runs):
        storage = float(scenario.initial_storage_mwh)
        level = int(scenario.initial_level)
        rows = dict(horizon=np.arange(1, big_k + 1), storage=np.empty(big_k),
                    renewable_level=np.empty(big_k, dtype=int), renewable=np.empty(big_k),
                    purchase=np.empty(big_k), prices=np.empty((big_k, n_st)),
                    demands=np.empty((big_k, n_st)), noise=np.empty(big_k),
                    spill=np.empty(big_k), profit=np.empty(big_k),
                    satisfaction=np.empty(big_k), impact=np.empty(big_k),
                    utility=np.empty(big_k), safeguard_active=np.zeros(big_k, dtype=bool))
        events = []
        for k in range(1, big_k + 1):
            u = engine.level_value(level)
            dec = policy.decision_at(k, level, storage)
            pred = predict_demand(scenario.elasticity, dec.prices)
            eps = rng.normal(0.0, sigma)
            demands = pred.mean + eps
            if np.any(demands < 0):
                events.append((k, "demand clamped at zero"))
                demands = np.maximum(demands, 0.0)
            w = rng.normal(0.0, st.process_noise_std)
            phi = float(demands.sum())
            nxt, spill = next_storage(storage, u, dec.purchase, phi, w, st)
            if spill > 1e-12:
                events.append((k, f"storage overflow spill {spill:.3f} MWh"))
            elif spill < -1e-12:
                events.append((k, f"storage shortfall {-spill:.3f} MWh"))
            # carrying cost charged on the physical post-transition level
            # (identical to the plain profit formula whenever nothing clamps)
            w_k = float(dec.prices @ demands
                        - scenario.wholesale_prices.values[k - 1] * dec.purchase
                        - st.unit_cost * nxt)
            phi_credit = min(phi, st.capacity_mwh)
            if phi > st.capacity_mwh:
                events.append((k, "demand beyond capacity; satisfaction saturated"))
            ctx = engine.context(k, storage=storage, renewable=u)
            g_k = obj.satisfaction(phi_credit, scenario.satisfaction, st.capacity_mwh)
            f_k = obj.deterministic_impact(ctx, demands)
            pi_k = obj.stage_utility(w_k, g_k, f_k, scenario.weights, policy.normalizers[k - 1])
            report = obj.safeguard_check(ctx, dec, scenario.safeguard)
            i = k - 1
            rows["storage"][i] = storage
            rows["renewable_level"][i] = level
            rows["renewable"][i] = u
            rows["purchase"][i] = dec.purchase
            rows["prices"][i] = dec.prices
            rows["demands"][i] = demands
            rows["noise"][i] = w
            rows["spill"][i] = spill
            rows["profit"][i] = w_k
            rows["satisfaction"][i] = g_k
            rows["impact"][i] = f_k
            rows["utility"][i] = pi_k
            rows["safeguard_active"][i] = report.active
            storage = nxt
            if k < big_k:
                level = int(rng.choice(chain.n_levels, p=chain.transitions[k - 1, level - 1]) + 1)
        trajectories.append(Trajectory(events=events, **rows))

    totals_u = np.array([t.total_utility for t in trajectories])
    totals_w = np.array([t.total_profit for t in trajectories])

    def ci(v: np.ndarray) -> tuple[float, float]:
        if len(v) < 2:
            return (float(v[0]), float(v[0]))
        half = 1.96 * float(np.std(v, ddof=1)) / math.sqrt(len(v))
        return (float(np.mean(v) - half), float(np.mean(v) + half))

    summary = SimulationSummary(
        n_runs=n_runs,
        mean_total_utility=float(totals_u.mean()),
        ci_total_utility=ci(totals_u),
        mean_total_profit=float(totals_w.mean()),
        ci_total_profit=ci(totals_w),
    )
    return trajectories, summary
