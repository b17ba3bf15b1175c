"""Domain types, scenario configuration and radio/geometry primitives."""

from __future__ import annotations

import dataclasses
import hashlib
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .control import NfvPolicy
from .ids import ForestConfig
from .ledger import GasModel, KeyPair

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DEFAULT_CONFIG_PATH = Path(__file__).parent / "data" / "default.toml"


class ConfigError(ValueError):
    """Raised when a scenario config file cannot be turned into a ScenarioConfig."""


@dataclass
class Vehicle:
    id: int
    position: tuple[float, float]
    speed: float
    heading: float
    max_speed: float = 50.0
    max_accel: float = 3.6
    max_decel: float = 5.0
    processing_power: float = 0.5
    vehicle_type_weight: float = 0.5
    energy: float = 0.0
    key_pair: Optional[KeyPair] = field(default=None, repr=False, compare=False)
    cluster_id: Optional[int] = None

    @property
    def depleted(self) -> bool:
        return self.energy <= 0.0


@dataclass
class Rsu:
    id: int
    position: tuple[float, float]
    coverage_radius: float
    cluster_ids: set[int] = field(default_factory=set)


@dataclass(frozen=True)
class DelayModel:
    """Per-message delay terms in seconds.

    t_b: ledger validation, t_s: SDN controller processing, t_n: NFV
    allocation (base value, before load scaling), t_c: member to cluster
    head, t_v: vehicle to infrastructure.
    """

    t_b: float = 1.2
    t_s: float = 0.05
    t_n: float = 0.1
    t_c: float = 0.02
    t_v: float = 0.04

    def cluster_denominator(self, t_n: Optional[float] = None) -> float:
        return self.t_b + self.t_s + (self.t_n if t_n is None else t_n) + self.t_c

    def vehicle_denominator(self, t_n: Optional[float] = None) -> float:
        return self.t_b + self.t_s + (self.t_n if t_n is None else t_n) + self.t_v


@dataclass(frozen=True)
class EnergyModel:
    """Energy bookkeeping constants, all in millijoules."""

    initial_energy: float = 20000.0
    tx_cost_per_byte: float = 0.01
    rx_cost_per_byte: float = 0.005
    idle_cost_per_round: float = 0.5
    ch_overhead_per_round: float = 2.0


@dataclass(frozen=True)
class ScenarioConfig:
    n_vehicles: int = 80
    n_rsus: int = 10
    area: tuple[float, float] = (2000.0, 2000.0)
    packet_size_range: tuple[int, int] = (100, 512)
    rounds: int = 1000
    seed: int = 1
    delay_model: DelayModel = DelayModel()
    energy_model: EnergyModel = EnergyModel()
    gas_model: GasModel = GasModel()
    election_weights: tuple[float, float, float] = (0.4, 0.4, 0.2)
    ids_config: ForestConfig = ForestConfig()
    cluster_size_target: Optional[int] = None
    # radio / topology
    rsu_layout: str = "grid"
    rsu_coverage: float = 500.0
    tx_power_dbm: float = 20.0
    path_loss_exp: float = 2.7
    # kinematics
    max_speed: float = 50.0
    max_accel: float = 3.6
    max_decel: float = 5.0
    # traffic and maintenance
    messages_per_vehicle: int = 1
    malicious_fraction: float = 0.05
    recluster_interval: int = 50
    cloud_flush_interval: int = 10
    window_rounds: int = 10
    n_controllers: int = 2
    nfv_policy: NfvPolicy = NfvPolicy()

    def replace(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def validate_config(cfg: ScenarioConfig) -> list[str]:
    """Return every invariant violation as ``"path: message"``; empty means runnable."""
    errors: list[str] = []

    def check(ok: bool, path: str, msg: str) -> None:
        if not ok:
            errors.append(f"{path}: {msg}")

    for name in ("n_vehicles", "n_rsus", "messages_per_vehicle", "recluster_interval",
                 "cloud_flush_interval", "window_rounds", "n_controllers"):
        check(getattr(cfg, name) > 0, name, "must be > 0")
    # zero rounds is a valid (empty) run
    check(cfg.rounds >= 0, "rounds", "must be >= 0")
    check(len(cfg.area) == 2 and all(a > 0 for a in cfg.area), "area", "width and height must be > 0")
    lo, hi = cfg.packet_size_range
    check(0 < lo <= hi, "packet_size_range", f"empty or non-positive range [{lo}, {hi}]")
    check(0 <= cfg.seed < 2**64, "seed", "must be a 64-bit unsigned integer")

    w = cfg.election_weights
    check(len(w) == 3, "election_weights", "need exactly three weights")
    if len(w) == 3:
        for i, x in enumerate(w):
            check(0.0 <= x <= 1.0, f"election_weights[{i}]", "must lie in [0, 1]")
        check(abs(sum(w) - 1.0) <= 1e-9, "election_weights", f"weights sum to {sum(w)!r}, expected 1")

    d = cfg.delay_model
    for name in ("t_b", "t_s", "t_n", "t_c", "t_v"):
        check(getattr(d, name) >= 0, f"delay_model.{name}", "must be >= 0")
    check(d.cluster_denominator() > 0, "delay_model", "t_b + t_s + t_n + t_c must be > 0")
    check(d.vehicle_denominator() > 0, "delay_model", "t_b + t_s + t_n + t_v must be > 0")

    for f in dataclasses.fields(EnergyModel):
        check(getattr(cfg.energy_model, f.name) >= 0, f"energy_model.{f.name}", "must be >= 0")
    for f in dataclasses.fields(GasModel):
        check(getattr(cfg.gas_model, f.name) >= 0, f"gas_model.{f.name}", "must be >= 0")

    ids = cfg.ids_config
    check(ids.n_trees > 0, "ids_config.n_trees", "must be > 0")
    check(ids.subsample_size >= 2, "ids_config.subsample_size", "must be >= 2")
    check(0 < ids.threshold < 1, "ids_config.threshold", "must lie in (0, 1)")
    check(ids.n_features > 0, "ids_config.n_features", "must be > 0")
    check(ids.training_samples >= 2, "ids_config.training_samples", "must be >= 2")

    if cfg.cluster_size_target is not None:
        check(cfg.cluster_size_target > 0, "cluster_size_target", "must be > 0 when set")
    check(cfg.rsu_layout in ("grid", "random"), "rsu_layout", "must be 'grid' or 'random'")
    check(cfg.rsu_coverage > 0, "rsu_coverage", "must be > 0")
    check(cfg.path_loss_exp >= 0, "path_loss_exp", "must be >= 0")
    check(cfg.max_speed > 0, "max_speed", "must be > 0")
    check(cfg.max_accel >= 0, "max_accel", "must be >= 0")
    check(cfg.max_decel >= 0, "max_decel", "must be >= 0")
    check(0.0 <= cfg.malicious_fraction <= 1.0, "malicious_fraction", "must lie in [0, 1]")

    p = cfg.nfv_policy
    check(p.window > 0, "nfv_policy.window", "must be > 0")
    check(0 < p.target_utilization <= 1, "nfv_policy.target_utilization", "must lie in (0, 1]")
    check(p.unit_capacity > 0, "nfv_policy.unit_capacity", "must be > 0")
    check(p.max_capacity >= 1, "nfv_policy.max_capacity", "must be >= 1")
    return errors


# -- config files -----------------------------------------------------------

_NESTED = {
    "delay_model": DelayModel,
    "energy_model": EnergyModel,
    "gas_model": GasModel,
    "ids_config": ForestConfig,
    "nfv_policy": NfvPolicy,
}
_TUPLES = {"area", "packet_size_range", "election_weights"}


def _build(cls: type, data: dict, path: str) -> Any:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and cls is ScenarioConfig:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a table")
            value = _build(_NESTED[key], value, key)
        elif isinstance(value, dict):
            raise ConfigError(f"{path + '.' if path else ''}{key}: nesting deeper than one level")
        elif key in _TUPLES:
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ScenarioConfig:
    return _build(ScenarioConfig, data, "")


def load_config(path: str | Path | None = None) -> ScenarioConfig:
    """Read a TOML scenario file; ``None`` loads the bundled defaults."""
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            value = dataclasses.asdict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


# -- randomness -------------------------------------------------------------

def derive_seed(seed: int, *tags: Any) -> int:
    """64-bit seed for an independent stream named by ``tags``."""
    h = hashlib.sha256(seed.to_bytes(8, "big"))
    for tag in tags:
        h.update(b"\x1f" + str(tag).encode())
    return int.from_bytes(h.digest()[:8], "big")


def stream(seed: int, *tags: Any) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))


# -- geometry and radio -----------------------------------------------------

def distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def signal_strength(v: Vehicle, r: Rsu, tx_power_dbm: float, path_loss_exp: float) -> float:
    """Log-distance received power in dBm, distance clamped to 1 m."""
    d = max(distance(v.position, r.position), 1.0)
    return tx_power_dbm - 10.0 * path_loss_exp * math.log10(d)


def grid_rsus(n: int, area: tuple[float, float], coverage: float) -> list[Rsu]:
    """Place ``n`` RSUs at the centres of a near-square grid of cells.

    Rows get ``n // rows`` or one more columns, so every cell is covered by
    its own RSU once the radius reaches the cell half-diagonal; the radius
    is raised to that value when ``coverage`` is smaller.
    """
    width, height = area
    rows = max(1, int(math.floor(math.sqrt(n * height / width))))
    rows = min(rows, n)
    base, extra = divmod(n, rows)
    cols_per_row = [base + (1 if i >= rows - extra else 0) for i in range(rows)]
    need = max(
        math.hypot(width / (2 * c), height / (2 * rows)) for c in cols_per_row
    )
    radius = max(coverage, need)
    rsus = []
    rid = 0
    for i, cols in enumerate(cols_per_row):
        y = (i + 0.5) * height / rows
        for j in range(cols):
            x = (j + 0.5) * width / cols
            rsus.append(Rsu(id=rid, position=(x, y), coverage_radius=radius))
            rid += 1
    return rsus


def random_rsus(n: int, area: tuple[float, float], coverage: float, rng: np.random.Generator) -> list[Rsu]:
    xs = rng.uniform(0, area[0], n)
    ys = rng.uniform(0, area[1], n)
    return [Rsu(id=i, position=(float(xs[i]), float(ys[i])), coverage_radius=coverage) for i in range(n)]


def effective_rsu_count(cfg: ScenarioConfig) -> int:
    """RSUs deployed for a run; cluster-size experiments derive it from the target."""
    if cfg.cluster_size_target:
        return max(1, math.ceil(cfg.n_vehicles / cfg.cluster_size_target))
    return cfg.n_rsus


def build_rsus(cfg: ScenarioConfig) -> list[Rsu]:
    n = effective_rsu_count(cfg)
    if cfg.rsu_layout == "random" and not cfg.cluster_size_target:
        return random_rsus(n, cfg.area, cfg.rsu_coverage, stream(cfg.seed, "rsus"))
    return grid_rsus(n, cfg.area, cfg.rsu_coverage)


def build_vehicles(cfg: ScenarioConfig) -> list[Vehicle]:
    """Vehicles with uniformly sampled positions, kinematics and election attributes."""
    rng = stream(cfg.seed, "vehicles")
    n = cfg.n_vehicles
    xs = rng.uniform(0, cfg.area[0], n)
    ys = rng.uniform(0, cfg.area[1], n)
    speeds = rng.uniform(0, cfg.max_speed / 2, n)
    headings = rng.uniform(0, 2 * math.pi, n)
    power = rng.uniform(0, 1, n)
    vtype = rng.uniform(0, 1, n)
    return [
        Vehicle(
            id=i,
            position=(float(xs[i]), float(ys[i])),
            speed=float(speeds[i]),
            heading=float(headings[i]),
            max_speed=cfg.max_speed,
            max_accel=cfg.max_accel,
            max_decel=cfg.max_decel,
            processing_power=float(power[i]),
            vehicle_type_weight=float(vtype[i]),
            energy=cfg.energy_model.initial_energy,
        )
        for i in range(n)
    ]
