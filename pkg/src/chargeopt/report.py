"""Delimited outputs and figures for solver runs.

Every command's numeric artifacts are written as CSV/JSON with documented
schemas; alongside them the same data is rendered to PNG figures so a run
directory is self-contained.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .optimizer import Policy, Trajectory  # noqa: E402
from .pareto import Front  # noqa: E402

TOOL_VERSION = "0.1.0"


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


# ---------------------------------------------------------------------------
# CSV / JSON writers

def write_trajectory_csv(path, trajectory: Trajectory) -> None:
    """Single-run log: horizon,I,u,o,p_1..p_L,d_1..d_L,W,G,F,Pi,safeguard_active."""
    n_stations = trajectory.prices.shape[1]
    header = (["horizon", "I", "u", "o"]
              + [f"p_{j}" for j in range(1, n_stations + 1)]
              + [f"d_{j}" for j in range(1, n_stations + 1)]
              + ["W", "G", "F", "Pi", "safeguard_active"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, k in enumerate(trajectory.horizon):
            row = ([int(k), _fmt(trajectory.storage[i]), _fmt(trajectory.renewable[i]),
                    _fmt(trajectory.purchase[i])]
                   + [_fmt(v) for v in trajectory.prices[i]]
                   + [_fmt(v) for v in trajectory.demands[i]]
                   + [_fmt(trajectory.profit[i]), _fmt(trajectory.satisfaction[i]),
                      _fmt(trajectory.impact[i]), _fmt(trajectory.utility[i]),
                      int(trajectory.safeguard_active[i])])
            writer.writerow(row)


def write_runs_csv(path, trajectories: list[Trajectory]) -> None:
    """All runs concatenated with a leading `run` column."""
    n_stations = trajectories[0].prices.shape[1]
    header = (["run", "horizon", "I", "u", "o"]
              + [f"p_{j}" for j in range(1, n_stations + 1)]
              + [f"d_{j}" for j in range(1, n_stations + 1)]
              + ["W", "G", "F", "Pi", "safeguard_active"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for run, t in enumerate(trajectories):
            for i, k in enumerate(t.horizon):
                writer.writerow([run, int(k), _fmt(t.storage[i]), _fmt(t.renewable[i]),
                                 _fmt(t.purchase[i])]
                                + [_fmt(v) for v in t.prices[i]]
                                + [_fmt(v) for v in t.demands[i]]
                                + [_fmt(t.profit[i]), _fmt(t.satisfaction[i]),
                                   _fmt(t.impact[i]), _fmt(t.utility[i]),
                                   int(t.safeguard_active[i])])


def write_policy_json(path, policy: Policy) -> None:
    doc = {
        "kind": policy.kind,
        "scenario_digest": policy.scenario_digest,
        "tool_version": TOOL_VERSION,
        "storage_grid": policy.state_grid.storage.tolist(),
        "renewable_levels": policy.state_grid.n_levels,
        "decisions": np.where(np.isnan(policy.decisions), None, policy.decisions).tolist(),
        "safeguard_probability": np.where(np.isnan(policy.safeguard_probability), None,
                                          policy.safeguard_probability).tolist(),
        "safeguard_active": policy.safeguard_active.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def write_value_table_json(path, policy: Policy) -> None:
    vals = np.where(np.isfinite(policy.values), policy.values, None)
    doc = {
        "scenario_digest": policy.scenario_digest,
        "tool_version": TOOL_VERSION,
        "storage_grid": policy.state_grid.storage.tolist(),
        "values": vals.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def write_summary_json(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True))


def write_sensitivities_csv(path, sensitivities: dict[int, tuple[float, float]]) -> None:
    """Per-PQ-bus sensitivities ranked by active-power sensitivity."""
    ranked = sorted(sensitivities.items(), key=lambda kv: -kv[1][0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "bus", "s_active", "s_reactive"])
        for rank, (bus, (s_ac, s_re)) in enumerate(ranked, start=1):
            writer.writerow([rank, bus, _fmt(s_ac), _fmt(s_re)])


def write_front_csv(path, front: Front) -> None:
    """lambda1,lambda2,lambda3,W,G,F,is_knee plus per-station demand columns."""
    n_stations = len(front.points[0].station_demand) if front.points else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda1", "lambda2", "lambda3", "W", "G", "F", "is_knee"]
                        + [f"demand_{j}" for j in range(1, n_stations + 1)])
        knees = set(front.knee_indices)
        for i, p in enumerate(front.points):
            writer.writerow([_fmt(p.weights[0]), _fmt(p.weights[1]), _fmt(p.weights[2]),
                             _fmt(p.profit), _fmt(p.satisfaction), _fmt(p.impact),
                             int(i in knees)]
                            + [_fmt(v) for v in p.station_demand])


def write_knees_csv(path, front: Front) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda1", "lambda2", "lambda3", "W", "G", "F"])
        for i in front.knee_indices:
            p = front.points[i]
            writer.writerow([_fmt(p.weights[0]), _fmt(p.weights[1]), _fmt(p.weights[2]),
                             _fmt(p.profit), _fmt(p.satisfaction), _fmt(p.impact)])


def write_comparison_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "sdp_profit", "greedy_profit", "profit_gain_pct",
                         "sdp_utility", "greedy_utility"])
        for r in rows:
            writer.writerow([r["seed"], _fmt(r["sdp_profit"]), _fmt(r["greedy_profit"]),
                             _fmt(r["profit_gain_pct"]), _fmt(r["sdp_utility"]),
                             _fmt(r["greedy_utility"])])


# ---------------------------------------------------------------------------
# figures

def fig_run_overview(path, trajectories: list[Trajectory], wholesale: np.ndarray) -> None:
    """Prices, procurement, storage path, and wholesale prices for the run."""
    t0 = trajectories[0]
    hours = t0.horizon
    fig, axes = plt.subplots(4, 1, figsize=(9, 11), sharex=True)

    ax = axes[0]
    for j in range(t0.prices.shape[1]):
        ax.plot(hours, np.mean([t.prices[:, j] for t in trajectories], axis=0),
                label=f"station {j + 1}")
    ax.set_ylabel("charging price ($/MWh)")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)

    ax = axes[1]
    ax.bar(hours, np.mean([t.purchase for t in trajectories], axis=0), color="tab:blue")
    ax.set_ylabel("purchase (MWh)")
    ax.grid(alpha=0.3)

    ax = axes[2]
    for t in trajectories[: min(8, len(trajectories))]:
        ax.plot(hours, t.storage, alpha=0.5)
    ax.set_ylabel("storage (MWh)")
    ax.grid(alpha=0.3)

    ax = axes[3]
    ax.step(hours, wholesale, where="mid", color="k")
    ax.set_ylabel("wholesale ($/MWh)")
    ax.set_xlabel("hour")
    ax.grid(alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_comparison(path, rows: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    gains = [r["profit_gain_pct"] for r in rows]
    ax.bar(range(len(rows)), gains, color="tab:green")
    ax.axhline(float(np.mean(gains)), color="k", linestyle="--",
               label=f"mean {np.mean(gains):.2f}%")
    ax.set_xlabel("paired seed index")
    ax.set_ylabel("profit gain over greedy (%)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_sensitivities(path, sensitivities: dict[int, tuple[float, float]],
                      station_buses=()) -> None:
    buses = sorted(sensitivities)
    s_ac = [sensitivities[b][0] for b in buses]
    s_re = [sensitivities[b][1] for b in buses]
    x = np.arange(len(buses))
    fig, ax = plt.subplots(figsize=(11, 4))
    ax.bar(x - 0.2, s_ac, width=0.4, label="active")
    ax.bar(x + 0.2, s_re, width=0.4, label="reactive")
    marked = [i for i, b in enumerate(buses) if b in set(station_buses)]
    if marked:
        ax.plot([x[i] for i in marked], [s_ac[i] for i in marked], "r*",
                markersize=10, label="station bus")
    ax.set_xticks(x[:: max(1, len(buses) // 30)])
    ax.set_xticklabels([buses[i] for i in range(0, len(buses), max(1, len(buses) // 30))],
                       fontsize=7)
    ax.set_xlabel("PQ bus")
    ax.set_ylabel("sensitivity (p.u. variation per unit injection)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_pareto(path, front: Front) -> None:
    """3-D scatter of the front with knee points highlighted."""
    fig = plt.figure(figsize=(7, 6))
    ax = fig.add_subplot(111, projection="3d")
    pts = np.array([[p.profit, p.satisfaction, p.impact] for p in front.points])
    knees = set(front.knee_indices)
    normal = [i for i in range(len(front.points)) if i not in knees]
    if normal:
        ax.scatter(pts[normal, 0], pts[normal, 1], pts[normal, 2], alpha=0.6, label="front")
    if knees:
        kn = sorted(knees)
        ax.scatter(pts[kn, 0], pts[kn, 1], pts[kn, 2], color="red", s=50, label="knee")
    ax.set_xlabel("profit ($)")
    ax.set_ylabel("satisfaction")
    ax.set_zlabel("grid impact")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_pareto_projections(path, front: Front) -> None:
    """Pairwise projections: profit/satisfaction, profit/impact, satisfaction/impact."""
    pts = np.array([[p.profit, p.satisfaction, p.impact] for p in front.points])
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    pairs = [(0, 1, "profit ($)", "satisfaction"),
             (0, 2, "profit ($)", "impact"),
             (1, 2, "satisfaction", "impact")]
    knees = sorted(set(front.knee_indices))
    for ax, (a, b, xl, yl) in zip(axes, pairs):
        ax.scatter(pts[:, a], pts[:, b], alpha=0.6)
        if knees:
            ax.scatter(pts[knees, a], pts[knees, b], color="red", s=40)
        ax.set_xlabel(xl)
        ax.set_ylabel(yl)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_demand_shift(path, front: Front, sensitivities_by_station: np.ndarray) -> None:
    """Per-station demand against the impact weight along the front."""
    pts = sorted(front.points, key=lambda p: p.weights[2])
    lam3 = [p.weights[2] for p in pts]
    demand = np.array([p.station_demand for p in pts])
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for j in range(demand.shape[1]):
        ax.plot(lam3, demand[:, j], marker="o", markersize=3,
                label=f"station {j + 1} (S={sensitivities_by_station[j]:.2f})")
    ax.set_xlabel("impact weight")
    ax.set_ylabel("daily demand (MWh)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_demand_fit(path, prices, demands, model) -> None:
    """Observed versus fitted demand per station."""
    from .demand import predict_demand
    prices = np.asarray(prices)
    demands = np.asarray(demands)
    fitted = np.array([predict_demand(model, p).mean for p in prices])
    n_stations = demands.shape[1]
    fig, axes = plt.subplots(1, n_stations, figsize=(4 * n_stations, 4), squeeze=False)
    for j in range(n_stations):
        ax = axes[0][j]
        ax.scatter(demands[:, j], fitted[:, j], s=8, alpha=0.5)
        lim = [min(demands[:, j].min(), fitted[:, j].min()),
               max(demands[:, j].max(), fitted[:, j].max())]
        ax.plot(lim, lim, "k--", linewidth=1)
        ax.set_xlabel(f"observed demand, station {j + 1}")
        ax.set_ylabel("fitted")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
