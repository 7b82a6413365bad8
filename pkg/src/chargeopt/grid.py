"""Bus/branch network model, Newton power flow, and voltage-variation metrics.

The charging-load impact metric is the squared 2-norm of the first-order
voltage response (magnitudes and phases) to the load increase, computed
from the inverse power-flow Jacobian evaluated at the base operating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CaseFormatError, PowerFlowError

SLACK, PV, PQ = "slack", "pv", "pq"

# Default demo placement of 20 charging stations on the bundled 57-bus case.
# Stations sit on PQ buses only; the even-indexed stations span the full
# sensitivity range of the system (largest at station 20, smallest at 8).
IEEE57_DEFAULT_STATION_BUSES = (18, 39, 21, 41, 22, 43, 23, 45, 27, 47,
                                28, 50, 29, 51, 38, 53, 44, 49, 54, 57)


@dataclass(frozen=True)
class Bus:
    index: int                 # external bus id as given in the case file
    kind: str                  # slack | pv | pq
    p_load_mw: float = 0.0
    q_load_mvar: float = 0.0
    gs_mw: float = 0.0         # shunt conductance at v = 1 p.u.
    bs_mvar: float = 0.0       # shunt susceptance at v = 1 p.u.
    p_gen_mw: float = 0.0
    v_setpoint: float = 1.0    # regulated magnitude for slack/PV buses


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0             # total line-charging susceptance
    tap: float = 0.0           # 0 means no transformer (ratio 1)
    shift_deg: float = 0.0


@dataclass
class Network:
    buses: list[Bus]
    branches: list[Branch]
    base_mva: float

    def __post_init__(self):
        self._pos = {b.index: i for i, b in enumerate(self.buses)}
        if len(self._pos) != len(self.buses):
            raise CaseFormatError("duplicate bus ids in case")
        slacks = [b for b in self.buses if b.kind == SLACK]
        if len(slacks) != 1:
            raise CaseFormatError(f"expected exactly one slack bus, found {len(slacks)}")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in self._pos:
                    raise CaseFormatError(f"branch {br.from_bus}-{br.to_bus} references unknown bus {end}")
            if br.r == 0.0 and br.x == 0.0:
                raise CaseFormatError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        self._check_connected()

    def _check_connected(self):
        n = len(self.buses)
        adj = [[] for _ in range(n)]
        for br in self.branches:
            i, k = self._pos[br.from_bus], self._pos[br.to_bus]
            adj[i].append(k)
            adj[k].append(i)
        seen = {0}
        stack = [0]
        while stack:
            for k in adj[stack.pop()]:
                if k not in seen:
                    seen.add(k)
                    stack.append(k)
        if len(seen) != n:
            missing = sorted(self.buses[i].index for i in range(n) if i not in seen)
            raise CaseFormatError(f"network is not connected; unreachable buses {missing}")

    # -- index helpers (internal positions, file order) --
    def position(self, bus_id: int) -> int:
        return self._pos[bus_id]

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def slack_pos(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == SLACK)

    @property
    def pq_positions(self) -> list[int]:
        return [i for i, b in enumerate(self.buses) if b.kind == PQ]

    @property
    def pv_positions(self) -> list[int]:
        return [i for i, b in enumerate(self.buses) if b.kind == PV]

    @property
    def non_slack_positions(self) -> list[int]:
        return [i for i, b in enumerate(self.buses) if b.kind != SLACK]

    def is_pq(self, bus_id: int) -> bool:
        return self.buses[self._pos[bus_id]].kind == PQ


@dataclass(frozen=True)
class StationMap:
    """Assignment of charging stations to network buses.

    ``buses[i]`` is the external id of the bus feeding station i.  The power
    factor sets the reactive load that accompanies each MW of charging
    (1.0 means purely active load).
    """
    buses: tuple[int, ...]
    power_factor: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.power_factor <= 1.0:
            raise ValueError(f"power factor must be in (0, 1], got {self.power_factor}")

    @property
    def reactive_ratio(self) -> float:
        return math.tan(math.acos(self.power_factor))


@dataclass(frozen=True)
class AdmittanceMatrix:
    g: np.ndarray              # conductance part, dense N x N
    b: np.ndarray              # susceptance part

    @property
    def complex(self) -> np.ndarray:
        return self.g + 1j * self.b


@dataclass(frozen=True)
class PowerFlowSolution:
    vm: np.ndarray             # magnitudes, p.u., file bus order
    va: np.ndarray             # phases, radians
    iterations: int
    final_mismatch: float


@dataclass(frozen=True)
class Jacobian:
    """Power-flow Jacobian in [dP/dV dP/dPhi; dQ/dV dQ/dPhi] block layout.

    Rows: P equations of non-slack buses, then Q equations of PQ buses.
    Columns: V of PQ buses, then phase of non-slack buses.
    """
    matrix: np.ndarray
    p_rows: dict = field(repr=False, default=None)     # bus id -> row of its P equation
    q_rows: dict = field(repr=False, default=None)     # bus id -> row of its Q equation
    v_cols: dict = field(repr=False, default=None)     # bus id -> column of its V variable
    delta_cols: dict = field(repr=False, default=None)  # bus id -> column of its phase variable


@dataclass(frozen=True)
class JacobianInverse:
    """Entries b[i, j] of the inverse Jacobian with explicit index maps.

    Rows follow the variable stack (V of PQ buses, then phases of non-slack
    buses); columns follow the injection stack (P at non-slack buses, then Q
    at PQ buses).
    """
    b: np.ndarray
    v_rows: dict
    delta_rows: dict
    p_cols: dict
    q_cols: dict


# ---------------------------------------------------------------------------
# case file parsing

_KINDS = {"slack": SLACK, "pv": PV, "pq": PQ}


def parse_case(text: str) -> Network:
    """Parse the tabular case format (BASE_MVA line, BUS / GEN / BRANCH sections).

    Column layout::

        BUS:    id  kind  Pd_MW  Qd_MVAr  Gs_MW  Bs_MVAr
        GEN:    bus  Pg_MW  Vset_pu
        BRANCH: from  to  r_pu  x_pu  b_pu  tap  shift_deg

    ``tap == 0`` denotes a plain line (ratio 1).  Comments start with '#'.
    """
    base_mva = None
    bus_rows, gen_rows, branch_rows = [], [], []
    section = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        token = line.split()[0].upper()
        if token == "BASE_MVA":
            parts = line.split()
            if len(parts) != 2:
                raise CaseFormatError("BASE_MVA expects one value", line_no)
            base_mva = float(parts[1])
        elif token in ("BUS", "GEN", "BRANCH"):
            section = token
        elif token == "END":
            section = None
        else:
            if section is None:
                raise CaseFormatError(f"data outside any section: {line!r}", line_no)
            {"BUS": bus_rows, "GEN": gen_rows, "BRANCH": branch_rows}[section].append((line_no, line.split()))

    if base_mva is None or base_mva <= 0:
        raise CaseFormatError("missing or non-positive BASE_MVA")
    if not bus_rows:
        raise CaseFormatError("case has no BUS section")

    buses = {}
    order = []
    for line_no, parts in bus_rows:
        if len(parts) != 6:
            raise CaseFormatError(f"BUS row needs 6 fields, got {len(parts)}", line_no)
        try:
            idx = int(parts[0])
            kind = _KINDS[parts[1].lower()]
            pd, qd, gs, bs = (float(v) for v in parts[2:])
        except (ValueError, KeyError) as exc:
            raise CaseFormatError(f"malformed BUS row: {exc}", line_no) from exc
        if idx in buses:
            raise CaseFormatError(f"duplicate bus {idx}", line_no)
        buses[idx] = dict(index=idx, kind=kind, p_load_mw=pd, q_load_mvar=qd, gs_mw=gs, bs_mvar=bs)
        order.append(idx)

    for line_no, parts in gen_rows:
        if len(parts) != 3:
            raise CaseFormatError(f"GEN row needs 3 fields, got {len(parts)}", line_no)
        try:
            idx, pg, vset = int(parts[0]), float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise CaseFormatError(f"malformed GEN row: {exc}", line_no) from exc
        if idx not in buses:
            raise CaseFormatError(f"GEN references unknown bus {idx}", line_no)
        if buses[idx]["kind"] == PQ:
            raise CaseFormatError(f"GEN at PQ bus {idx}", line_no)
        if buses[idx].get("p_gen_mw"):
            raise CaseFormatError(f"duplicate GEN at bus {idx}", line_no)
        buses[idx]["p_gen_mw"] = pg
        buses[idx]["v_setpoint"] = vset

    branches = []
    for line_no, parts in branch_rows:
        if len(parts) != 7:
            raise CaseFormatError(f"BRANCH row needs 7 fields, got {len(parts)}", line_no)
        try:
            f, t = int(parts[0]), int(parts[1])
            r, x, b, tap, shift = (float(v) for v in parts[2:])
        except ValueError as exc:
            raise CaseFormatError(f"malformed BRANCH row: {exc}", line_no) from exc
        if f not in buses or t not in buses:
            raise CaseFormatError(f"branch references unknown bus {f if f not in buses else t}", line_no)
        branches.append(Branch(f, t, r, x, b, tap, shift))

    for spec in buses.values():
        if spec["kind"] in (SLACK, PV) and "v_setpoint" not in spec:
            raise CaseFormatError(f"{spec['kind']} bus {spec['index']} has no GEN row for its setpoint")

    return Network([Bus(**buses[i]) for i in order], branches, base_mva)


def load_case(path) -> Network:
    with open(path) as fh:
        return parse_case(fh.read())


# ---------------------------------------------------------------------------
# admittance and power flow

def build_admittance(net: Network) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix from branch and shunt data."""
    n = net.n_buses
    y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        i, k = net.position(br.from_bus), net.position(br.to_bus)
        ys = 1.0 / complex(br.r, br.x)
        ych = 1j * br.b / 2.0
        tap = br.tap if br.tap != 0.0 else 1.0
        t = tap * np.exp(1j * math.radians(br.shift_deg))
        y[i, i] += (ys + ych) / (tap * tap)
        y[k, k] += ys + ych
        y[i, k] -= ys / np.conj(t)
        y[k, i] -= ys / t
    for b in net.buses:
        y[net.position(b.index), net.position(b.index)] += complex(b.gs_mw, b.bs_mvar) / net.base_mva
    return AdmittanceMatrix(g=y.real.copy(), b=y.imag.copy())


def _scheduled_injections(net: Network):
    p = np.array([(b.p_gen_mw - b.p_load_mw) for b in net.buses]) / net.base_mva
    q = np.array([-b.q_load_mvar for b in net.buses]) / net.base_mva
    return p, q


def _injections(y: np.ndarray, vm: np.ndarray, va: np.ndarray):
    v = vm * np.exp(1j * va)
    s = v * np.conj(y @ v)
    return s.real, s.imag


def solve_power_flow(net: Network, tol: float = 1e-8, max_iter: int = 20,
                     warm_start: PowerFlowSolution | None = None) -> PowerFlowSolution:
    """Newton's method on the polar power-flow equations from a flat start.

    Raises PowerFlowError on non-convergence or a singular iterate Jacobian.
    """
    y = build_admittance(net).complex
    n = net.n_buses
    vm = np.ones(n)
    va = np.zeros(n)
    if warm_start is not None:
        vm, va = warm_start.vm.copy(), warm_start.va.copy()
    for b in net.buses:
        if b.kind in (SLACK, PV):
            vm[net.position(b.index)] = b.v_setpoint

    p_sched, q_sched = _scheduled_injections(net)
    non_slack = net.non_slack_positions
    pq = net.pq_positions

    for iteration in range(max_iter + 1):
        p_calc, q_calc = _injections(y, vm, va)
        dp = p_sched[non_slack] - p_calc[non_slack]
        dq = q_sched[pq] - q_calc[pq]
        mismatch = np.concatenate([dp, dq])
        worst = float(np.max(np.abs(mismatch))) if mismatch.size else 0.0
        if worst < tol:
            return PowerFlowSolution(vm=vm, va=va, iterations=iteration, final_mismatch=worst)
        if iteration == max_iter:
            break
        jac = _jacobian_matrix(y, vm, va, non_slack, pq)
        try:
            step = np.linalg.solve(jac, mismatch)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular Jacobian at iteration {iteration}") from exc
        if not np.all(np.isfinite(step)):
            raise PowerFlowError(f"diverged at iteration {iteration}")
        m = len(pq)
        vm[pq] += step[:m]
        va[non_slack] += step[m:]
    raise PowerFlowError(f"no convergence after {max_iter} iterations (mismatch {worst:.3e})")


def _derivative_blocks(y: np.ndarray, vm: np.ndarray, va: np.ndarray):
    """Dense partial derivatives of injections w.r.t. magnitudes and phases."""
    g, b = y.real, y.imag
    dd = va[:, None] - va[None, :]
    t1 = g * np.cos(dd) + b * np.sin(dd)
    t2 = g * np.sin(dd) - b * np.cos(dd)
    p = vm * (t1 @ vm)
    q = vm * (t2 @ vm)
    vv = np.outer(vm, vm)

    dp_dd = vv * t2
    np.fill_diagonal(dp_dd, -q - vm ** 2 * np.diag(b))
    dp_dv = vm[:, None] * t1
    np.fill_diagonal(dp_dv, p / vm + vm * np.diag(g))
    dq_dd = -vv * t1
    np.fill_diagonal(dq_dd, p - vm ** 2 * np.diag(g))
    dq_dv = vm[:, None] * t2
    np.fill_diagonal(dq_dv, q / vm - vm * np.diag(b))
    return dp_dv, dp_dd, dq_dv, dq_dd


def _jacobian_matrix(y, vm, va, non_slack, pq):
    dp_dv, dp_dd, dq_dv, dq_dd = _derivative_blocks(y, vm, va)
    return np.block([
        [dp_dv[np.ix_(non_slack, pq)], dp_dd[np.ix_(non_slack, non_slack)]],
        [dq_dv[np.ix_(pq, pq)], dq_dd[np.ix_(pq, non_slack)]],
    ])


def assemble_jacobian(net: Network, sol: PowerFlowSolution) -> Jacobian:
    """Jacobian blocks evaluated at a converged operating point."""
    y = build_admittance(net).complex
    non_slack = net.non_slack_positions
    pq = net.pq_positions
    matrix = _jacobian_matrix(y, sol.vm, sol.va, non_slack, pq)
    ids = [b.index for b in net.buses]
    p_rows = {ids[pos]: r for r, pos in enumerate(non_slack)}
    q_rows = {ids[pos]: len(non_slack) + r for r, pos in enumerate(pq)}
    v_cols = {ids[pos]: c for c, pos in enumerate(pq)}
    delta_cols = {ids[pos]: len(pq) + c for c, pos in enumerate(non_slack)}
    return Jacobian(matrix=matrix, p_rows=p_rows, q_rows=q_rows, v_cols=v_cols, delta_cols=delta_cols)


def invert_jacobian(jac: Jacobian) -> JacobianInverse:
    try:
        inv = np.linalg.inv(jac.matrix)
    except np.linalg.LinAlgError as exc:
        raise PowerFlowError("Jacobian is singular (operating point near voltage collapse)") from exc
    residual = np.max(np.abs(jac.matrix @ inv - np.eye(jac.matrix.shape[0])))
    if residual > 1e-8:
        raise PowerFlowError(f"Jacobian inversion residual {residual:.2e} exceeds 1e-8")
    # rows of the inverse correspond to the Jacobian's variable columns,
    # columns to its equation rows
    return JacobianInverse(
        b=inv,
        v_rows=dict(jac.v_cols),
        delta_rows=dict(jac.delta_cols),
        p_cols=dict(jac.p_rows),
        q_cols=dict(jac.q_rows),
    )


def solved_operating_point(net: Network, tol: float = 1e-8, max_iter: int = 20) -> JacobianInverse:
    """Convenience path: solve the base case and return the inverse Jacobian."""
    sol = solve_power_flow(net, tol=tol, max_iter=max_iter)
    return invert_jacobian(assemble_jacobian(net, sol))


# ---------------------------------------------------------------------------
# impact metric and sensitivities

def injection_vector(ji: JacobianInverse, demands_mwh, smap: StationMap, base_mva: float) -> np.ndarray:
    """Per-unit [dP; dQ] stack for the given station demands over one hour."""
    vec = np.zeros(ji.b.shape[1])
    ratio = smap.reactive_ratio
    for bus, d in zip(smap.buses, demands_mwh, strict=True):
        if d < 0:
            raise ValueError(f"negative demand {d} at station bus {bus}")
        if bus not in ji.q_cols:
            raise ValueError(f"station mapped to non-PQ bus {bus}")
        dp = d / base_mva          # 1-hour horizons: MWh and MW coincide
        vec[ji.p_cols[bus]] += dp
        if ratio > 0.0:
            vec[ji.q_cols[bus]] += dp * ratio
    return vec


def impact_metric(ji: JacobianInverse, demands_mwh, smap: StationMap, base_mva: float) -> float:
    """Squared 2-norm of the linearized voltage variation caused by charging."""
    variation = ji.b @ injection_vector(ji, demands_mwh, smap, base_mva)
    return float(variation @ variation)


def station_response_columns(ji: JacobianInverse, smap: StationMap, base_mva: float) -> np.ndarray:
    """Voltage-variation response per MWh of demand at each station (columns)."""
    cols = np.zeros((ji.b.shape[0], len(smap.buses)))
    ratio = smap.reactive_ratio
    for i, bus in enumerate(smap.buses):
        if bus not in ji.q_cols:
            raise ValueError(f"station mapped to non-PQ bus {bus}")
        col = ji.b[:, ji.p_cols[bus]].copy()
        if ratio > 0.0:
            col += ratio * ji.b[:, ji.q_cols[bus]]
        cols[:, i] = col / base_mva
    return cols


def bus_sensitivities(ji: JacobianInverse) -> dict[int, tuple[float, float]]:
    """Active/reactive power sensitivity of every PQ bus.

    Each value is the squared 2-norm of the voltage variation for a unit
    per-unit injection at that bus (the corresponding inverse-Jacobian column).
    """
    out = {}
    for bus, col in ji.q_cols.items():
        s_ac = float(np.sum(ji.b[:, ji.p_cols[bus]] ** 2))
        s_re = float(np.sum(ji.b[:, col] ** 2))
        out[bus] = (s_ac, s_re)
    return out
