"""Regenerate the 57-bus golden power-flow solution.

Solves the bundled case with scipy's MINPACK root finder on the rectangular
complex-power mismatch (an algorithm path independent of the package solver),
verifies the result against the published solved voltages of the standard
test case (magnitudes printed to 3 decimals, angles to 2), and writes the
high-precision solution to src/chargeopt/data/ieee57_solution.csv.

Run from the repository root:  python3 tools/make_ieee57_golden.py
"""

import pathlib
import sys

import numpy as np
from scipy.optimize import fsolve

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from chargeopt.grid import build_admittance, load_case  # noqa: E402

# Published solved operating point of the standard IEEE 57-bus case:
# bus id -> (V magnitude p.u., angle degrees).
PUBLISHED = {
    1: (1.040, 0.00), 2: (1.010, -1.18), 3: (0.985, -5.97), 4: (0.981, -7.32),
    5: (0.976, -8.52), 6: (0.980, -8.65), 7: (0.984, -7.58), 8: (1.005, -4.45),
    9: (0.980, -9.56), 10: (0.986, -11.43), 11: (0.974, -10.17), 12: (1.015, -10.46),
    13: (0.979, -9.79), 14: (0.970, -9.33), 15: (0.988, -7.18), 16: (1.013, -8.85),
    17: (1.017, -5.39), 18: (1.001, -11.71), 19: (0.970, -13.20), 20: (0.964, -13.41),
    21: (1.008, -12.89), 22: (1.010, -12.84), 23: (1.008, -12.91), 24: (0.999, -13.25),
    25: (0.982, -18.13), 26: (0.959, -12.95), 27: (0.982, -11.48), 28: (0.997, -10.45),
    29: (1.010, -9.75), 30: (0.962, -18.68), 31: (0.936, -19.34), 32: (0.949, -18.46),
    33: (0.947, -18.50), 34: (0.959, -14.10), 35: (0.966, -13.86), 36: (0.976, -13.59),
    37: (0.985, -13.41), 38: (1.013, -12.71), 39: (0.983, -13.46), 40: (0.973, -13.62),
    41: (0.996, -14.05), 42: (0.966, -15.50), 43: (1.010, -11.33), 44: (1.017, -11.86),
    45: (1.036, -9.25), 46: (1.060, -11.12), 47: (1.033, -12.49), 48: (1.027, -12.59),
    49: (1.036, -12.92), 50: (1.023, -13.39), 51: (1.052, -12.52), 52: (0.980, -11.47),
    53: (0.971, -12.23), 54: (0.996, -11.69), 55: (1.031, -10.78), 56: (0.968, -16.04),
    57: (0.965, -16.56),
}


def main():
    root = pathlib.Path(__file__).resolve().parents[1]
    case_path = root / "src" / "chargeopt" / "data" / "ieee57.case"
    net = load_case(case_path)
    y = build_admittance(net).complex
    n = net.n_buses
    slack = net.slack_pos
    pq = net.pq_positions
    pv = net.pv_positions
    non_slack = net.non_slack_positions

    p_sched = np.array([(b.p_gen_mw - b.p_load_mw) for b in net.buses]) / net.base_mva
    q_sched = np.array([-b.q_load_mvar for b in net.buses]) / net.base_mva
    vset = np.array([b.v_setpoint for b in net.buses])

    m = len(pq)

    def unpack(z):
        vm = np.empty(n)
        va = np.zeros(n)
        vm[slack] = vset[slack]
        vm[pv] = vset[pv]
        vm[pq] = z[:m]
        va[non_slack] = z[m:]
        return vm, va

    def mismatch(z):
        vm, va = unpack(z)
        v = vm * np.exp(1j * va)
        s = v * np.conj(y @ v)
        return np.concatenate([s.real[non_slack] - p_sched[non_slack],
                               s.imag[pq] - q_sched[pq]])

    z0 = np.concatenate([np.ones(m), np.zeros(len(non_slack))])
    z, info, ier, msg = fsolve(mismatch, z0, full_output=True, xtol=1e-13)
    if ier != 1:
        raise SystemExit(f"reference solve failed: {msg}")
    residual = np.max(np.abs(mismatch(z)))
    vm, va = unpack(z)
    va_deg = np.degrees(va)

    worst_v = worst_a = 0.0
    for b in net.buses:
        i = net.position(b.index)
        ref_v, ref_a = PUBLISHED[b.index]
        worst_v = max(worst_v, abs(vm[i] - ref_v))
        worst_a = max(worst_a, abs(va_deg[i] - ref_a))
    print(f"mismatch residual: {residual:.3e}")
    print(f"max |Vm - published|: {worst_v:.5f} p.u. (published rounded to 3 decimals)")
    print(f"max |Va - published|: {worst_a:.4f} deg  (published rounded to 2 decimals)")
    # published magnitudes carry 3 decimals and the archived solution itself
    # was converged to a looser tolerance, hence the bands below
    if worst_v > 1.2e-3 or worst_a > 8.0e-2:
        raise SystemExit("solution deviates from the published operating point; check case data")

    out = root / "src" / "chargeopt" / "data" / "ieee57_solution.csv"
    with open(out, "w") as fh:
        fh.write("bus,vm_pu,va_deg\n")
        for b in net.buses:
            i = net.position(b.index)
            fh.write(f"{b.index},{vm[i]:.12f},{va_deg[i]:.12f}\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
