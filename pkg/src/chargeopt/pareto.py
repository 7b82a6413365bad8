"""Pareto front generation by weighted-sum sweep, dominance filtering, and
knee-point extraction.

Profit and satisfaction are maximized, grid impact is minimized.  The knee
metric follows the improvement-per-degradation ratio on triples that the
caller has already normalized and sign-aligned (all three maximized);
``Front.compute_knees`` does that normalization over the current front.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .optimizer import StageEngine, sdp_solve, simulate_policy
from .scenario import Scenario, UtilityWeights


@dataclass(frozen=True)
class ParetoPoint:
    objectives: np.ndarray          # [total profit, total satisfaction, total impact]
    weights: tuple[float, float, float]
    station_demand: np.ndarray      # mean total demand per station over the day
    mean_prices: np.ndarray         # time-averaged price per station

    def __post_init__(self):
        object.__setattr__(self, "objectives", np.asarray(self.objectives, dtype=float))

    @property
    def profit(self) -> float:
        return float(self.objectives[0])

    @property
    def satisfaction(self) -> float:
        return float(self.objectives[1])

    @property
    def impact(self) -> float:
        return float(self.objectives[2])


@dataclass
class Front:
    points: list[ParetoPoint]
    rho0: float = 1.0
    knee_indices: list[int] = field(default_factory=list)

    def compute_knees(self) -> "Front":
        """Normalize objectives over the front, negate impact, select knees."""
        if len(self.points) < 2:
            self.knee_indices = []
            return self
        raw = np.array([[p.profit, p.satisfaction, -p.impact] for p in self.points])
        lo, hi = raw.min(axis=0), raw.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        norm = (raw - lo) / span
        triples = [norm[i] for i in range(len(self.points))]
        self.knee_indices = sorted(knee_select(triples, self.rho0))
        return self


def simplex_grid(step: float) -> list[tuple[float, float, float]]:
    """All weight triples on the simplex in multiples of ``step``."""
    n = round(1.0 / step)
    if abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"step {step} must divide 1 evenly")
    out = []
    for i in range(n + 1):
        for j in range(n - i + 1):
            k = n - i - j
            out.append((i / n, j / n, k / n))
    return out


def dominance_filter(objectives) -> list[int]:
    """Indices of non-dominated triples (profit, satisfaction up; impact down).

    Exact duplicates keep their first occurrence only.
    """
    pts = np.asarray([np.asarray(p, dtype=float) for p in objectives])
    keep = []
    for i, y in enumerate(pts):
        dominated = False
        for j, z in enumerate(pts):
            if i == j:
                continue
            if np.array_equal(y, z):
                if j < i:
                    dominated = True
                    break
                continue
            better_eq = z[0] >= y[0] and z[1] >= y[1] and z[2] <= y[2]
            strictly = z[0] > y[0] or z[1] > y[1] or z[2] < y[2]
            if better_eq and strictly:
                dominated = True
                break
        if not dominated:
            keep.append(i)
    return keep


def knee_metric(i: int, triples) -> float:
    """Least improvement per unit degradation of replacing any other point.

    ``triples`` must already be normalized with every component maximized.
    A point that weakly dominates the whole rest of the set gets +inf; a
    dominated point gets 0.
    """
    pts = [np.asarray(t, dtype=float) for t in triples]
    if not 0 <= i < len(pts):
        raise ValueError("index outside the set")
    if len(pts) < 2:
        raise ValueError("need at least two points")
    y = pts[i]
    best = np.inf
    for j, z in enumerate(pts):
        if j == i:
            continue
        gain = float(np.maximum(y - z, 0.0).sum())
        loss = float(np.maximum(z - y, 0.0).sum())
        if loss == 0.0:
            continue                      # weakly dominated alternative: ratio +inf
        best = min(best, gain / loss)
    return best


def knee_select(triples, rho0: float) -> list[int]:
    """Indices whose knee metric strictly exceeds the threshold."""
    return [i for i in range(len(triples)) if knee_metric(i, triples) > rho0]


# ---------------------------------------------------------------------------
# sweeping the solver across weight vectors

def _evaluate_weights(args):
    scenario, weights, n_runs, seed = args
    scn = scenario.with_updates(weights=UtilityWeights(*weights))
    engine = StageEngine(scn)
    policy = sdp_solve(scn, engine)
    rng = np.random.default_rng(seed)
    trajectories, _ = simulate_policy(policy, scn, n_runs, rng, engine)
    profit = float(np.mean([t.total_profit for t in trajectories]))
    sat = float(np.mean([t.satisfaction.sum() for t in trajectories]))
    impact = float(np.mean([t.impact.sum() for t in trajectories]))
    demand = np.mean([t.demands.sum(axis=0) for t in trajectories], axis=0)
    prices = np.mean([t.prices.mean(axis=0) for t in trajectories], axis=0)
    return ParetoPoint(objectives=np.array([profit, sat, impact]),
                       weights=tuple(weights), station_demand=demand, mean_prices=prices)


def weighted_sum_sweep(scenario: Scenario, weight_grid, n_runs: int = 1,
                       seed: int = 0, workers: int | None = None) -> list[ParetoPoint]:
    """One full solve + evaluation per weight vector, in grid order."""
    for w in weight_grid:
        if min(w) < -1e-12 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"weight vector {w} is not on the simplex")
    if workers is None:
        workers = int(os.environ.get("CHARGEOPT_THREADS", "1"))
    jobs = [(scenario, w, n_runs, seed) for w in weight_grid]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_evaluate_weights, jobs))
    return [_evaluate_weights(j) for j in jobs]


def adaptive_refine(scenario: Scenario, front: Front, max_passes: int = 1,
                    gap_threshold: float = 0.25, n_runs: int = 1, seed: int = 0,
                    workers: int | None = None) -> Front:
    """Fill large gaps on the front by re-solving at midpoint weights.

    Adjacency is nearest-neighbor in normalized objective space; each pair
    farther apart than the threshold contributes the midpoint of its
    generating weight vectors.  The union is re-filtered for dominance.
    """
    points = list(front.points)
    for _ in range(max_passes):
        if len(points) < 2:
            break
        raw = np.array([[p.profit, p.satisfaction, -p.impact] for p in points])
        lo, hi = raw.min(axis=0), raw.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        norm = (raw - lo) / span
        new_weights = []
        seen = {tuple(np.round(p.weights, 9)) for p in points}
        for i in range(len(points)):
            dists = np.linalg.norm(norm - norm[i], axis=1)
            dists[i] = np.inf
            j = int(np.argmin(dists))
            if dists[j] <= gap_threshold:
                continue
            mid = tuple((np.asarray(points[i].weights) + np.asarray(points[j].weights)) / 2.0)
            key = tuple(np.round(mid, 9))
            if key not in seen:
                seen.add(key)
                new_weights.append(mid)
        if not new_weights:
            break
        points += weighted_sum_sweep(scenario, new_weights, n_runs=n_runs,
                                     seed=seed, workers=workers)
        keep = dominance_filter([p.objectives for p in points])
        points = [points[i] for i in keep]
    refined = Front(points=points, rho0=front.rho0)
    return refined.compute_knees()


def pareto_front(scenario: Scenario, weight_step: float = 0.1, rho0: float = 1.0,
                 n_runs: int = 1, seed: int = 0, refine_passes: int = 0,
                 gap_threshold: float = 0.25, workers: int | None = None) -> Front:
    """Sweep the weight simplex, filter dominance, and mark knee points."""
    points = weighted_sum_sweep(scenario, simplex_grid(weight_step),
                                n_runs=n_runs, seed=seed, workers=workers)
    keep = dominance_filter([p.objectives for p in points])
    front = Front(points=[points[i] for i in keep], rho0=rho0).compute_knees()
    if refine_passes > 0:
        front = adaptive_refine(scenario, front, max_passes=refine_passes,
                                gap_threshold=gap_threshold, n_runs=n_runs,
                                seed=seed, workers=workers)
    return front
