"""Scenario loading and validation: the single source of configured values.

A scenario is one YAML document with nested sections.  Hourly series may be
inline arrays or `{csv: path}` references resolved against the scenario
file's directory.  Loading fills documented defaults, records which were
applied, and validates every invariant, reporting all violations at once.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import forecast, grid
from .demand import ElasticityModel
from .errors import ScenarioError
from .forecast import MarkovChain, PriceSeries, SolarProfile

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class StorageModel:
    capacity_mwh: float
    unit_cost: float                 # $/MWh carried per hour (capital + upkeep)
    charge_efficiency: float
    discharge_efficiency: float
    process_noise_std: float = 0.5

    def validate(self) -> list[str]:
        out = []
        if self.capacity_mwh <= 0:
            out.append("storage capacity must be positive")
        if self.unit_cost < 0:
            out.append("unit storage cost must be nonnegative")
        if not 0 < self.charge_efficiency <= 1:
            out.append("charge_efficiency must be in (0,1]")
        if not 0 < self.discharge_efficiency <= 1:
            out.append("discharge_efficiency must be in (0,1]")
        if self.process_noise_std < 0:
            out.append("storage process noise std must be nonnegative")
        return out


@dataclass(frozen=True)
class SatisfactionParams:
    alpha: float                     # curvature, 1/MWh^2
    omega: float                     # initial slope, 1/MWh

    def validate(self) -> list[str]:
        out = []
        if self.alpha <= 0:
            out.append("satisfaction alpha must be positive")
        if self.omega <= 0:
            out.append("satisfaction omega must be positive")
        return out


@dataclass(frozen=True)
class UtilityWeights:
    profit: float
    satisfaction: float
    impact: float

    def as_array(self) -> np.ndarray:
        return np.array([self.profit, self.satisfaction, self.impact])

    def validate(self) -> list[str]:
        out = []
        if np.any(self.as_array() < 0):
            out.append("weights must be nonnegative")
        if abs(self.as_array().sum() - 1.0) > WEIGHT_TOL:
            out.append("weights must sum to 1")
        return out


@dataclass(frozen=True)
class SafeguardConfig:
    min_profit: float                # W_min
    risk_level: float                # acceptable Prob(W < W_min)
    enforcement: str = "penalize"    # "penalize" | "warn_only"

    def validate(self) -> list[str]:
        out = []
        if not 0 < self.risk_level < 1:
            out.append("safeguard risk level must be in (0,1)")
        if self.enforcement not in ("penalize", "warn_only"):
            out.append(f"unknown safeguard enforcement {self.enforcement!r}")
        return out


@dataclass(frozen=True)
class SdpConfig:
    storage_points: int = 101
    procurement_steps: int = 200
    value_samples: int = 512         # resolution of the precomputed stage-value curve
    exact_pair_limit: int = 8192     # below this, every (storage, purchase) pair is solved exactly
    price_solver_tol: float = 1e-9

    def validate(self) -> list[str]:
        out = []
        if self.storage_points < 2:
            out.append("need at least 2 storage grid points")
        if self.procurement_steps < 1:
            out.append("need at least 1 procurement step")
        if self.value_samples < 2:
            out.append("value_samples must be at least 2")
        return out


@dataclass(frozen=True)
class Scenario:
    horizons: int
    stations: int
    storage: StorageModel
    satisfaction: SatisfactionParams
    weights: UtilityWeights
    safeguard: SafeguardConfig
    elasticity: ElasticityModel
    network_path: str
    station_map: grid.StationMap
    wholesale_prices: PriceSeries
    solar: SolarProfile
    renewable_chain: MarkovChain
    procurement_cap_mwh: float
    rng_seed: int
    terminal_salvage_price: float = 0.0
    price_cap: float = 200.0
    initial_storage_mwh: float = None
    initial_level: int = None
    sdp: SdpConfig = field(default_factory=SdpConfig)
    defaults_applied: tuple = ()
    _network_cache: list = field(default_factory=list, repr=False, compare=False)

    @property
    def solar_energy(self) -> np.ndarray:
        return forecast.solar_to_energy(self.solar)

    @property
    def network(self) -> grid.Network:
        if not self._network_cache:
            self._network_cache.append(grid.load_case(self.network_path))
        return self._network_cache[0]

    def with_updates(self, **kwargs) -> "Scenario":
        """Copy with selected fields replaced (cached network dropped)."""
        return replace(self, _network_cache=[], **kwargs)

    def digest(self) -> str:
        return hashlib.sha256(serialize(self).encode()).hexdigest()[:16]


def validate(scn: Scenario) -> list[str]:
    """All invariant violations, empty when the scenario is sound."""
    out = []
    if scn.horizons < 1:
        out.append("horizons must be at least 1")
    if scn.stations < 1:
        out.append("stations must be at least 1")
    out += scn.storage.validate()
    out += scn.satisfaction.validate()
    out += scn.weights.validate()
    out += scn.safeguard.validate()
    out += [f"elasticity: {p}" for p in scn.elasticity.validate()]
    if scn.elasticity.n_stations != scn.stations:
        out.append(f"elasticity model covers {scn.elasticity.n_stations} stations, scenario has {scn.stations}")
    if len(scn.wholesale_prices) != scn.horizons:
        out.append(f"wholesale price series has {len(scn.wholesale_prices)} entries, expected {scn.horizons}")
    if len(scn.solar.radiation_kw_m2) != scn.horizons:
        out.append(f"solar series has {len(scn.solar.radiation_kw_m2)} entries, expected {scn.horizons}")
    if scn.renewable_chain.horizons != scn.horizons:
        out.append(f"renewable chain covers {scn.renewable_chain.horizons} horizons, expected {scn.horizons}")
    if scn.procurement_cap_mwh <= 0:
        out.append("procurement cap must be positive")
    if scn.price_cap <= 0:
        out.append("price cap must be positive")
    if len(scn.station_map.buses) != scn.stations:
        out.append(f"station map covers {len(scn.station_map.buses)} stations, scenario has {scn.stations}")
    if scn.initial_storage_mwh is not None and not 0 <= scn.initial_storage_mwh <= scn.storage.capacity_mwh:
        out.append("initial storage must lie in [0, capacity]")
    if scn.initial_level is not None and not 1 <= scn.initial_level <= scn.renewable_chain.n_levels:
        out.append("initial renewable level out of range")
    out += scn.sdp.validate()
    try:
        net = scn.network
    except Exception as exc:                       # case file problems surface here
        out.append(f"network: {exc}")
    else:
        for i, bus in enumerate(scn.station_map.buses, start=1):
            try:
                if not net.is_pq(bus):
                    out.append(f"station {i} must map to a PQ bus (bus {bus} is {net.buses[net.position(bus)].kind})")
            except KeyError:
                out.append(f"station {i} maps to unknown bus {bus}")
    return out


# ---------------------------------------------------------------------------
# loading

def _series(node, base: Path, horizons: int, what: str) -> np.ndarray:
    if isinstance(node, dict) and "csv" in node:
        return forecast.load_series_csv(base / node["csv"])
    if isinstance(node, (list, tuple)):
        return np.asarray(node, dtype=float)
    raise ScenarioError(f"{what}: expected inline array or {{csv: path}}, got {type(node).__name__}")


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ScenarioError(f"{where}: missing required field {key!r}")
    return mapping[key]


def _build_chain(node: dict, base: Path, solar_mwh: np.ndarray, horizons: int) -> tuple[MarkovChain, bool]:
    mode = node.get("mode", "history")
    d_levels = int(node.get("levels", 10))
    if mode == "explicit":
        return MarkovChain(level_values=np.asarray(_require(node, "level_values", "renewable"), dtype=float),
                           transitions=np.asarray(_require(node, "transitions", "renewable"), dtype=float)), False
    if mode == "deterministic":
        return forecast.deterministic_chain(solar_mwh), False
    if mode == "history":
        hist_node = _require(node, "history", "renewable")
        history = forecast.load_history_csv(base / hist_node["csv"]) if isinstance(hist_node, dict) \
            else np.asarray(hist_node, dtype=float)
        if history.shape[1] != horizons:
            raise ScenarioError(f"renewable history has {history.shape[1]} horizons, expected {horizons}")
        return forecast.chain_from_energy_history(history, d_levels), False
    raise ScenarioError(f"renewable: unknown mode {mode!r}")


def load_scenario(path) -> Scenario:
    """Parse, default-fill, and validate the scenario document at ``path``."""
    path = Path(path)
    base = path.parent
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: scenario document must be a mapping")
    scn = scenario_from_dict(doc, base)
    problems = validate(scn)
    if problems:
        raise ScenarioError(f"{path}: invalid scenario:\n  - " + "\n  - ".join(problems))
    return scn


def scenario_from_dict(doc: dict, base: Path) -> Scenario:
    defaults = []

    def default(section: dict, key: str, value):
        if key not in section:
            defaults.append(f"{key}={value}")
            return value
        return section[key]

    horizons = int(_require(doc, "horizons", "scenario"))
    stations = int(_require(doc, "stations", "scenario"))

    st = _require(doc, "storage", "scenario")
    storage = StorageModel(
        capacity_mwh=float(_require(st, "capacity_mwh", "storage")),
        unit_cost=float(_require(st, "unit_cost", "storage")),
        charge_efficiency=float(_require(st, "charge_efficiency", "storage")),
        discharge_efficiency=float(_require(st, "discharge_efficiency", "storage")),
        process_noise_std=float(default(st, "process_noise_std", 0.5)),
    )
    sat = _require(doc, "satisfaction", "scenario")
    satisfaction = SatisfactionParams(alpha=float(_require(sat, "alpha", "satisfaction")),
                                      omega=float(_require(sat, "omega", "satisfaction")))
    w = _require(doc, "weights", "scenario")
    weights = UtilityWeights(profit=float(_require(w, "profit", "weights")),
                             satisfaction=float(_require(w, "satisfaction", "weights")),
                             impact=float(_require(w, "impact", "weights")))
    sg = _require(doc, "safeguard", "scenario")
    safeguard = SafeguardConfig(
        min_profit=float(_require(sg, "min_profit", "safeguard")),
        risk_level=float(_require(sg, "risk_level", "safeguard")),
        enforcement=str(default(sg, "enforcement", "penalize")),
    )
    el = _require(doc, "elasticity", "scenario")
    elasticity = ElasticityModel(
        intercepts=_require(el, "intercepts", "elasticity"),
        self_elasticities=_require(el, "self_elasticities", "elasticity"),
        cross=_require(el, "cross", "elasticity"),
        noise_std=_require(el, "noise_std", "elasticity"),
    )
    nw = _require(doc, "network", "scenario")
    network_path = str(base / _require(nw, "case_file", "network"))
    station_map = grid.StationMap(
        buses=tuple(int(b) for b in _require(nw, "station_buses", "network")),
        power_factor=float(default(nw, "power_factor", 1.0)),
    )
    prices = PriceSeries(values=_series(_require(doc, "wholesale_prices", "scenario"), base, horizons, "wholesale_prices"))
    so = _require(doc, "solar", "scenario")
    solar = SolarProfile(
        radiation_kw_m2=_series(_require(so, "radiation", "solar"), base, horizons, "solar radiation"),
        panel_area_m2=float(_require(so, "panel_area_m2", "solar")),
        efficiency=float(default(so, "efficiency", 0.20)),
    )
    solar_mwh = forecast.solar_to_energy(solar)
    rn = doc.get("renewable")
    if rn is None:
        defaults.append("renewable=deterministic(solar)")
        chain = forecast.deterministic_chain(solar_mwh)
    else:
        chain, _ = _build_chain(rn, base, solar_mwh, horizons)

    sdp_node = doc.get("sdp", {})
    sdp = SdpConfig(
        storage_points=int(default(sdp_node, "storage_points", 101)),
        procurement_steps=int(default(sdp_node, "procurement_steps", 200)),
        value_samples=int(default(sdp_node, "value_samples", 512)),
        exact_pair_limit=int(default(sdp_node, "exact_pair_limit", 8192)),
        price_solver_tol=float(default(sdp_node, "price_solver_tol", 1e-9)),
    )

    initial_storage = doc.get("initial_storage_mwh")
    if initial_storage is None:
        initial_storage = storage.capacity_mwh / 2.0
        defaults.append(f"initial_storage_mwh={initial_storage}")
    initial_level = doc.get("initial_level")
    if initial_level is None:
        u0 = float(solar_mwh[0])
        initial_level = int(np.argmin(np.abs(chain.level_values - u0))) + 1
        defaults.append(f"initial_level={initial_level}")

    return Scenario(
        horizons=horizons,
        stations=stations,
        storage=storage,
        satisfaction=satisfaction,
        weights=weights,
        safeguard=safeguard,
        elasticity=elasticity,
        network_path=network_path,
        station_map=station_map,
        wholesale_prices=prices,
        solar=solar,
        renewable_chain=chain,
        procurement_cap_mwh=float(default(doc, "procurement_cap_mwh", 300.0)),
        rng_seed=int(default(doc, "rng_seed", 0)),
        terminal_salvage_price=float(default(doc, "terminal_salvage_price", 0.0)),
        price_cap=float(default(doc, "price_cap", 200.0)),
        initial_storage_mwh=float(initial_storage),
        initial_level=int(initial_level),
        sdp=sdp,
        defaults_applied=tuple(defaults),
    )


def serialize(scn: Scenario) -> str:
    """Canonical YAML with every resolved value inline (round-trips exactly)."""
    doc = {
        "horizons": scn.horizons,
        "stations": scn.stations,
        "storage": {
            "capacity_mwh": scn.storage.capacity_mwh,
            "unit_cost": scn.storage.unit_cost,
            "charge_efficiency": scn.storage.charge_efficiency,
            "discharge_efficiency": scn.storage.discharge_efficiency,
            "process_noise_std": scn.storage.process_noise_std,
        },
        "satisfaction": {"alpha": scn.satisfaction.alpha, "omega": scn.satisfaction.omega},
        "weights": {"profit": scn.weights.profit, "satisfaction": scn.weights.satisfaction,
                    "impact": scn.weights.impact},
        "safeguard": {"min_profit": scn.safeguard.min_profit, "risk_level": scn.safeguard.risk_level,
                      "enforcement": scn.safeguard.enforcement},
        "elasticity": {
            "intercepts": scn.elasticity.intercepts.tolist(),
            "self_elasticities": scn.elasticity.self_elasticities.tolist(),
            "cross": scn.elasticity.cross.tolist(),
            "noise_std": scn.elasticity.noise_std.tolist(),
        },
        "network": {"case_file": scn.network_path,
                    "station_buses": list(scn.station_map.buses),
                    "power_factor": scn.station_map.power_factor},
        "wholesale_prices": scn.wholesale_prices.values.tolist(),
        "solar": {"radiation": scn.solar.radiation_kw_m2.tolist(),
                  "panel_area_m2": scn.solar.panel_area_m2,
                  "efficiency": scn.solar.efficiency},
        "renewable": {"mode": "explicit",
                      "levels": scn.renewable_chain.n_levels,
                      "level_values": scn.renewable_chain.level_values.tolist(),
                      "transitions": scn.renewable_chain.transitions.tolist()},
        "procurement_cap_mwh": scn.procurement_cap_mwh,
        "rng_seed": scn.rng_seed,
        "terminal_salvage_price": scn.terminal_salvage_price,
        "price_cap": scn.price_cap,
        "initial_storage_mwh": scn.initial_storage_mwh,
        "initial_level": scn.initial_level,
        "sdp": {"storage_points": scn.sdp.storage_points,
                "procurement_steps": scn.sdp.procurement_steps,
                "value_samples": scn.sdp.value_samples,
                "exact_pair_limit": scn.sdp.exact_pair_limit,
                "price_solver_tol": scn.sdp.price_solver_tol},
    }
    buf = io.StringIO()
    yaml.safe_dump(doc, buf, sort_keys=False, default_flow_style=None)
    return buf.getvalue()


def load_scenario_text(text: str, base: Path = Path(".")) -> Scenario:
    """Load a scenario from YAML text (series must be inline or base-relative)."""
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a mapping")
    scn = scenario_from_dict(doc, base)
    problems = validate(scn)
    if problems:
        raise ScenarioError("invalid scenario:\n  - " + "\n  - ".join(problems))
    return scn
