"""Price-elastic charging demand: prediction and online coefficient estimation.

Per-station hourly demand is affine in the full price vector: an intercept,
a negative response to the station's own price, and nonnegative responses to
competitor prices, plus zero-mean Gaussian noise.  Coefficients and residual
variances are tracked online by recursive least squares with a forgetting
factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError


@dataclass
class DemandPrediction:
    mean: np.ndarray          # MWh per station, clamped at zero
    variance: np.ndarray      # residual variance per station
    clamped: np.ndarray       # stations whose raw mean was negative


@dataclass(frozen=True)
class ElasticityModel:
    """Demand-curve coefficients for all stations.

    ``intercepts[j]`` is demand at all-zero prices; ``self_elasticities[j]``
    (positive) is the drop in station j demand per $/MWh of its own price;
    ``cross[i, j]`` (zero diagonal, symmetric) is the gain in station j
    demand per $/MWh of station i's price.
    """
    intercepts: np.ndarray
    self_elasticities: np.ndarray
    cross: np.ndarray
    noise_std: np.ndarray

    def __post_init__(self):
        for name in ("intercepts", "self_elasticities", "cross", "noise_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def n_stations(self) -> int:
        return len(self.intercepts)

    @property
    def price_response(self) -> np.ndarray:
        """Matrix M with d_mean = intercepts + M @ prices."""
        return self.cross.T - np.diag(self.self_elasticities)

    @property
    def total_price_slopes(self) -> np.ndarray:
        """d(total demand)/d(price_j): own drop plus cross gains."""
        return self.price_response.sum(axis=0)

    def validate(self) -> list[str]:
        problems = []
        L = self.n_stations
        shapes = {
            "intercepts": (L,), "self_elasticities": (L,),
            "cross": (L, L), "noise_std": (L,),
        }
        for name, want in shapes.items():
            if getattr(self, name).shape != want:
                problems.append(f"elasticity field {name} has shape {getattr(self, name).shape}, expected {want}")
        if problems:
            return problems
        if np.any(self.self_elasticities <= 0):
            problems.append("self elasticities must be positive (demand decreases in own price)")
        if np.any(np.diag(self.cross) != 0):
            problems.append("cross-elasticity matrix must have zero diagonal")
        if not np.allclose(self.cross, self.cross.T, atol=1e-9):
            problems.append("cross elasticities must be symmetric")
        if np.any(self.cross < 0):
            problems.append("cross elasticities must be nonnegative")
        if np.any(self.noise_std < 0):
            problems.append("demand noise std must be nonnegative")
        return problems


def predict_demand(model: ElasticityModel, prices) -> DemandPrediction:
    """Mean and variance of station demands at the given price vector."""
    prices = np.asarray(prices, dtype=float)
    if prices.shape != (model.n_stations,):
        raise ValueError(f"expected {model.n_stations} prices, got shape {prices.shape}")
    if np.any(prices < 0):
        raise ValueError("prices must be nonnegative")
    raw = model.intercepts + model.price_response @ prices
    clamped = raw < 0
    return DemandPrediction(mean=np.where(clamped, 0.0, raw),
                            variance=model.noise_std ** 2,
                            clamped=clamped)


def aggregate_demand(demands) -> float:
    """Total consumption across stations for one horizon."""
    demands = np.asarray(demands, dtype=float)
    if np.any(demands < 0):
        raise ValueError("demands must be nonnegative")
    return float(demands.sum())


# ---------------------------------------------------------------------------
# recursive least squares

@dataclass
class RlsState:
    """Online regression state for all stations.

    One coefficient vector (intercept first, then one slope per station
    price) and one covariance-like matrix per station, plus the residual
    variance recursion state (m, n, sigma2).
    """
    coeffs: np.ndarray          # (L, L+1)
    h: np.ndarray               # (L, L+1, L+1)
    forgetting: float
    m: np.ndarray = None
    n: np.ndarray = None
    sigma2: np.ndarray = None
    variance_recursion: str = "printed"    # "printed" | "corrected"
    updates: np.ndarray = None
    var_updates: np.ndarray = None
    v_acc: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        L = self.coeffs.shape[0]
        for name in ("m", "n", "sigma2", "v_acc"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(L))
        for name in ("updates", "var_updates"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(L, dtype=int))


def rls_init(n_stations: int, forgetting: float = 0.98, h0_scale: float = 1e3,
             variance_recursion: str = "printed") -> RlsState:
    if not 0.0 < forgetting <= 1.0:
        raise ValueError(f"forgetting factor must be in (0, 1], got {forgetting}")
    if variance_recursion not in ("printed", "corrected"):
        raise ValueError(f"unknown variance recursion {variance_recursion!r}")
    k = n_stations + 1
    return RlsState(
        coeffs=np.zeros((n_stations, k)),
        h=np.stack([np.eye(k) * h0_scale for _ in range(n_stations)]),
        forgetting=forgetting,
        variance_recursion=variance_recursion,
    )


def regressor(prices) -> np.ndarray:
    """Prices with a leading constant term."""
    return np.concatenate([[1.0], np.asarray(prices, dtype=float)])


def rls_update(state: RlsState, station: int, reg: np.ndarray, observed: float) -> float:
    """One coefficient update for a station; returns the prior residual."""
    if not (np.all(np.isfinite(reg)) and np.isfinite(observed)):
        raise EstimationError("non-finite RLS input")
    nu = state.forgetting
    h = state.h[station]
    y = state.coeffs[station]
    err = observed - reg @ y
    hp = h @ reg
    gain = hp / (nu + reg @ hp)
    h_new = (h - np.outer(gain, hp)) / nu
    state.h[station] = (h_new + h_new.T) / 2.0     # keep H symmetric
    state.coeffs[station] = y + err * gain
    state.updates[station] += 1
    return float(err)


def variance_update(state: RlsState, station: int, residual: float) -> float:
    """One residual-variance update for a station; returns the new estimate.

    The "printed" recursion follows the source formulas literally, treating
    the accumulated residual sum as the weight; "corrected" uses the
    effective sample count as the weight, which makes the estimate track the
    sample variance of the stream.
    """
    nu = state.forgetting
    state.m[station] = nu * state.m[station] + residual
    state.n[station] = nu * state.n[station] + 1.0
    state.var_updates[station] += 1
    m, n = state.m[station], state.n[station]
    if state.var_updates[station] < 2:
        # mean of a single sample carries no variance information
        return float(state.sigma2[station])
    eps_bar = m / n
    if state.variance_recursion == "printed":
        if m == 0.0:
            return float(state.sigma2[station])
        u = ((m - 1.0) / m) ** 2 + (1.0 / m) ** 2
        v = m * (1.0 - u)
        if v == 0.0:
            return float(state.sigma2[station])
        state.sigma2[station] = (nu * v * state.sigma2[station]
                                 + ((m - 1.0) / m) * (eps_bar - residual) ** 2) / v
    else:
        w = (n - 1.0) / n
        v_prev = state.v_acc[station]
        v = nu * v_prev + w
        state.sigma2[station] = (nu * v_prev * state.sigma2[station]
                                 + w * (eps_bar - residual) ** 2) / v
        state.v_acc[station] = v
    return float(state.sigma2[station])


def load_fit_history(path) -> tuple[np.ndarray, np.ndarray]:
    """Read fitting rows from a CSV with header p_1..p_L,d_1..d_L."""
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EstimationError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        p_cols = [i for i, h in enumerate(header) if h.startswith("p_")]
        d_cols = [i for i, h in enumerate(header) if h.startswith("d_")]
        if not p_cols or len(p_cols) != len(d_cols):
            raise EstimationError(f"{path}: expected matching p_j and d_j columns, got {header}")
        rows = [[float(v) for v in rec] for rec in reader if rec]
    if not rows:
        raise EstimationError(f"{path}: no data rows")
    data = np.asarray(rows)
    return data[:, p_cols], data[:, d_cols]


def model_to_dict(model: ElasticityModel) -> dict:
    return {
        "intercepts": model.intercepts.tolist(),
        "self_elasticities": model.self_elasticities.tolist(),
        "cross": model.cross.tolist(),
        "noise_std": model.noise_std.tolist(),
    }


def model_from_dict(doc: dict) -> ElasticityModel:
    return ElasticityModel(intercepts=doc["intercepts"],
                           self_elasticities=doc["self_elasticities"],
                           cross=doc["cross"], noise_std=doc["noise_std"])


def fit_elasticity(prices_history, demand_history, forgetting: float = 1.0,
                   h0_scale: float = 1e3, variance_recursion: str = "corrected",
                   ) -> tuple[ElasticityModel, RlsState]:
    """Fit the demand model from historical (prices, demands) rows.

    Cross elasticities are symmetrized by averaging the two estimates of each
    pair.  A self elasticity estimated with the wrong sign is floored at a
    tiny positive value and reported through the model validation.
    """
    prices_history = np.asarray(prices_history, dtype=float)
    demand_history = np.asarray(demand_history, dtype=float)
    if prices_history.ndim != 2 or prices_history.shape != demand_history.shape:
        raise EstimationError("price and demand histories must be matching 2-D arrays")
    n_rows, L = prices_history.shape
    if n_rows == 0:
        raise EstimationError("empty fitting history")
    state = rls_init(L, forgetting=forgetting, h0_scale=h0_scale,
                     variance_recursion=variance_recursion)
    for row in range(n_rows):
        reg = regressor(prices_history[row])
        for j in range(L):
            err = rls_update(state, j, reg, demand_history[row, j])
            variance_update(state, j, err)

    coeffs = state.coeffs
    intercepts = coeffs[:, 0].copy()
    slopes = coeffs[:, 1:]                     # slopes[j, i] = dd_j / dp_i
    self_el = np.maximum(-np.diag(slopes), 1e-12)
    cross = (slopes + slopes.T) / 2.0
    np.fill_diagonal(cross, 0.0)
    cross = np.maximum(cross, 0.0)
    model = ElasticityModel(
        intercepts=intercepts,
        self_elasticities=self_el,
        cross=cross,
        noise_std=np.sqrt(np.maximum(state.sigma2, 0.0)),
    )
    return model, state
