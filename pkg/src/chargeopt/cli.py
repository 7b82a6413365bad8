"""Command-line entry point.

Subcommands drive the full pipeline end to end and drop delimited outputs
plus rendered figures into the chosen output directory:

    chargeopt run            solve one scenario and simulate the policy
    chargeopt compare        SDP against greedy across paired seeds
    chargeopt sensitivities  per-bus voltage sensitivities of the network
    chargeopt pareto         weighted-sum Pareto front with knee points
    chargeopt demand-fit     fit the demand model from historical rows

Exit codes: 0 success, 1 domain error (JSON diagnostics on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, demand, pareto, report
from .errors import ChargeOptError
from .grid import bus_sensitivities
from .optimizer import StageEngine, greedy_solve, sdp_solve, simulate_policy
from .scenario import load_scenario


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    scn = load_scenario(args.scenario)
    if getattr(args, "seed", None) is not None:
        scn = scn.with_updates(rng_seed=int(args.seed))
    return scn


def cmd_run(args) -> int:
    t_start = time.time()
    scn = _load(args)
    out = _out_dir(args)
    engine = StageEngine(scn)
    policy = sdp_solve(scn, engine) if args.mode == "sdp" else greedy_solve(scn, engine)
    rng = np.random.default_rng(scn.rng_seed)
    trajectories, summary = simulate_policy(policy, scn, args.runs, rng, engine)

    report.write_policy_json(out / "policy.json", policy)
    report.write_value_table_json(out / "value_table.json", policy)
    report.write_trajectory_csv(out / "trajectory.csv", trajectories[0])
    report.write_runs_csv(out / "runs.csv", trajectories)
    warnings = [
        {"run": r, "horizon": int(k), "event": msg}
        for r, t in enumerate(trajectories) for k, msg in t.events
    ]
    doc = {
        "tool_version": __version__,
        "scenario_digest": scn.digest(),
        "mode": args.mode,
        "seed": scn.rng_seed,
        "runs": args.runs,
        "horizons": scn.horizons,
        "stations": scn.stations,
        "mean_total_profit": summary.mean_total_profit,
        "ci_total_profit": list(summary.ci_total_profit),
        "mean_total_utility": summary.mean_total_utility,
        "ci_total_utility": list(summary.ci_total_utility),
        "mean_total_satisfaction": float(np.mean([t.satisfaction.sum() for t in trajectories])),
        "mean_total_impact": float(np.mean([t.impact.sum() for t in trajectories])),
        "safeguard_active_states": int(policy.safeguard_active.sum()),
        "events": warnings,
        "timing_s": time.time() - t_start,
    }
    report.write_summary_json(out / "summary.json", doc)
    report.fig_run_overview(out / "run_overview.png", trajectories, scn.wholesale_prices.values)
    print(f"wrote {out}/summary.json (mode={args.mode}, {scn.horizons} horizons, "
          f"mean profit {summary.mean_total_profit:.2f})")
    return 0


def cmd_compare(args) -> int:
    scn = _load(args)
    out = _out_dir(args)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = [scn.rng_seed + i for i in range(args.runs)]
    engine = StageEngine(scn)
    policy_sdp = sdp_solve(scn, engine)
    policy_greedy = greedy_solve(scn, engine)
    rows = []
    for seed in seeds:
        t_s, _ = simulate_policy(policy_sdp, scn, 1, np.random.default_rng(seed), engine)
        t_g, _ = simulate_policy(policy_greedy, scn, 1, np.random.default_rng(seed), engine)
        w_s, w_g = t_s[0].total_profit, t_g[0].total_profit
        rows.append({
            "seed": seed,
            "sdp_profit": w_s,
            "greedy_profit": w_g,
            "profit_gain_pct": 100.0 * (w_s - w_g) / abs(w_g) if w_g != 0 else float("inf"),
            "sdp_utility": t_s[0].total_utility,
            "greedy_utility": t_g[0].total_utility,
        })
    report.write_comparison_csv(out / "comparison.csv", rows)
    report.fig_comparison(out / "comparison.png", rows)
    mean_gain = float(np.mean([r["profit_gain_pct"] for r in rows]))
    report.write_summary_json(out / "compare_summary.json", {
        "tool_version": __version__,
        "scenario_digest": scn.digest(),
        "seeds": seeds,
        "mean_profit_gain_pct": mean_gain,
    })
    print(f"mean profit gain over greedy: {mean_gain:.2f}% across {len(seeds)} seeds")
    return 0


def cmd_sensitivities(args) -> int:
    scn = _load(args)
    out = _out_dir(args)
    engine = StageEngine(scn)
    sens = bus_sensitivities(engine.jacobian_inverse)
    report.write_sensitivities_csv(out / "sensitivities.csv", sens)
    report.fig_sensitivities(out / "sensitivities.png", sens,
                             station_buses=scn.station_map.buses)
    print(f"wrote {out}/sensitivities.csv ({len(sens)} PQ buses)")
    return 0


def cmd_pareto(args) -> int:
    scn = _load(args)
    out = _out_dir(args)
    front = pareto.pareto_front(scn, weight_step=args.weight_step, rho0=args.rho0,
                                n_runs=args.runs, seed=scn.rng_seed,
                                refine_passes=args.refine_passes)
    report.write_front_csv(out / "front.csv", front)
    report.write_knees_csv(out / "knees.csv", front)
    report.fig_pareto(out / "pareto_front.png", front)
    report.fig_pareto_projections(out / "pareto_projections.png", front)
    engine = StageEngine(scn)
    sens = bus_sensitivities(engine.jacobian_inverse)
    station_s = np.array([sens[b][0] for b in scn.station_map.buses])
    report.fig_demand_shift(out / "demand_shift.png", front, station_s)
    print(f"front: {len(front.points)} points, {len(front.knee_indices)} knees")
    return 0


def cmd_demand_fit(args) -> int:
    out = _out_dir(args)
    prices, demands = demand.load_fit_history(args.history)
    model, state = demand.fit_elasticity(prices, demands, forgetting=args.forgetting,
                                         variance_recursion=args.variance_recursion)
    problems = model.validate()
    (out / "elasticity.json").write_text(json.dumps(demand.model_to_dict(model), indent=2))
    fitted = np.array([demand.predict_demand(model, p).mean for p in prices])
    resid = demands - fitted
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((demands - demands.mean(axis=0)) ** 2).sum())
    report.write_summary_json(out / "fit_diagnostics.json", {
        "tool_version": __version__,
        "rows": int(prices.shape[0]),
        "stations": int(prices.shape[1]),
        "forgetting": args.forgetting,
        "r_squared": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0,
        "residual_std_per_station": resid.std(axis=0, ddof=1).tolist(),
        "rls_sigma2": state.sigma2.tolist(),
        "validation_warnings": problems,
    })
    report.fig_demand_fit(out / "demand_fit.png", prices, demands, model)
    print(f"fitted {prices.shape[1]}-station model from {prices.shape[0]} rows")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chargeopt",
                                     description="EV charging pricing and procurement planner")
    parser.add_argument("--version", action="version", version=f"chargeopt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True, help="scenario YAML path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override scenario seed")

    p = sub.add_parser("run", help="solve and simulate one scenario")
    common(p)
    p.add_argument("--mode", choices=["sdp", "greedy"], default="sdp")
    p.add_argument("--runs", type=int, default=32, help="simulation rollouts")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="SDP vs greedy across paired seeds")
    common(p)
    p.add_argument("--runs", type=int, default=20, help="number of paired seeds")
    p.add_argument("--seeds", default=None, help="explicit comma-separated seed list")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sensitivities", help="per-bus voltage sensitivities")
    common(p)
    p.set_defaults(func=cmd_sensitivities)

    p = sub.add_parser("pareto", help="weighted-sum Pareto front and knee points")
    common(p)
    p.add_argument("--weight-step", type=float, default=0.1)
    p.add_argument("--rho0", type=float, default=1.0)
    p.add_argument("--runs", type=int, default=1, help="evaluation rollouts per weight vector")
    p.add_argument("--refine-passes", type=int, default=0)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("demand-fit", help="fit the demand model from history")
    p.add_argument("--history", required=True, help="CSV with columns p_1..p_L,d_1..d_L")
    p.add_argument("--out", required=True)
    p.add_argument("--forgetting", type=float, default=0.98)
    p.add_argument("--variance-recursion", choices=["printed", "corrected"], default="corrected")
    p.set_defaults(func=cmd_demand_fit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFound", "message": str(exc)}), file=sys.stderr)
        return 2
    except ChargeOptError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except ValueError as exc:
        print(json.dumps({"error": "ValueError", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
