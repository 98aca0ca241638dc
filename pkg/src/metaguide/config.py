"""Scenario configuration: YAML files with nested sections, scalar or ``{low, high}`` values."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import yaml

from .engagement import (
    ActuatorFault,
    EngagementState,
    NoiseConfig,
    SpeedModel,
    TargetManeuver,
    TerminalMonitor,
    initial_state,
)
from .errors import ConfigError
from .meta import AdaptationConfig, TrainConfig
from .mppi import ControllerConfig, CostConfig, MPPIConfig

VARIANTS = ("proposed", "fixed_temperature", "no_adaptation")


@dataclass(frozen=True)
class Range:
    """Uniform distribution on [low, high]; bounds are sorted on construction."""

    low: float
    high: float

    def __post_init__(self):
        lo, hi = sorted((float(self.low), float(self.high)))
        object.__setattr__(self, "low", lo)
        object.__setattr__(self, "high", hi)

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high)) if self.high > self.low else self.low


Value = Union[float, Range]


def _resolve(v, rng):
    return v.sample(rng) if isinstance(v, Range) else v


@dataclass(frozen=True)
class InitialConditions:
    R: Value = 4000.0
    theta_L: Value = -0.7
    phi_L: Value = 0.65
    theta_m: Value = -0.36
    phi_m: Value = -0.2
    V_M: Value = 800.0
    theta_t: Value = -0.32
    phi_t: Value = -0.22
    V_T: Value = 270.0


@dataclass(frozen=True)
class Desired:
    theta_LD: Value = -0.6
    phi_LD: Value = 0.8


@dataclass(frozen=True)
class ManeuverSpec:
    amplitude_y: Value = 0.0
    amplitude_z: Value = 0.0
    angular_frequency: Value = 1.0


@dataclass(frozen=True)
class SpeedSpec:
    thrust_accel: Value = 25.0
    T_B: Value = 3.5
    drag_coeff_parasite: Value = 1e-5
    drag_coeff_induced: Value = 20.0
    V_min: Value = 50.0


@dataclass(frozen=True)
class FaultSpec:
    eta: Value = 1.0
    t_start: Value = math.inf
    t_end: Value = math.inf


@dataclass(frozen=True)
class NoiseSpec:
    uncertainty_amplitude: float = 0.0
    uncertainty_channels: tuple = ("R", "R_dot", "theta_m", "phi_m")
    los_angle_sigma: float = 0.0
    los_rate_rel_sigma: float = 0.0


@dataclass(frozen=True)
class SimSpec:
    dt: float = 0.005
    a_max: float = 200.0
    R_hit: float = 0.1
    R_max: float = 20000.0
    t_max: float = 15.0
    k_increase: int = 1


@dataclass(frozen=True)
class MPPISpec:
    n_samples: int = 1000
    horizon: int = 3
    sigma: tuple = (20.0, 20.0)
    sigma_floor: float = 1e-6
    block_size: int = 250
    workers: int = 1


@dataclass(frozen=True)
class CostSpec:
    K1: tuple = (0.6, 0.5)
    K2: tuple = (3.0, 2.0)
    lambda_star: float = 1.0
    control_penalty: float = 0.02
    terminal_weight: float = 10.0
    rate_shaping: float = 3.0
    tau_min: float = 0.8
    tgo_scaling: bool = True
    tgo_floor: float = 0.0


@dataclass(frozen=True)
class CollectionSpec:
    n_trajectories: int = 200
    control_sigma: float = 60.0
    t_max: float = 15.0
    augment_sigma: float = 0.01
    initial: InitialConditions = InitialConditions(
        R=Range(1500.0, 4500.0), theta_L=Range(-1.0, -0.4), phi_L=Range(0.3, 1.0),
        theta_m=Range(-0.5, 0.5), phi_m=Range(-0.5, 0.5), V_M=Range(700.0, 900.0),
        theta_t=Range(-0.6, 0.6), phi_t=Range(-0.8, 0.8), V_T=270.0,
    )
    maneuver: ManeuverSpec = ManeuverSpec(Range(0.0, 40.0), Range(0.0, 40.0), 1.0)
    speed: SpeedSpec = SpeedSpec(T_B=Range(0.0, 4.0))
    noise: NoiseSpec = NoiseSpec()


@dataclass(frozen=True)
class EngagementConfig:
    name: str = "case1"
    initial: InitialConditions = InitialConditions()
    desired: Desired = Desired()
    maneuver: ManeuverSpec = ManeuverSpec(40.0, 40.0, 1.0)
    speed: SpeedSpec = SpeedSpec()
    fault: FaultSpec = FaultSpec(0.5, 3.0, math.inf)
    noise: NoiseSpec = NoiseSpec()
    sim: SimSpec = SimSpec()
    mppi: MPPISpec = MPPISpec()
    cost: CostSpec = CostSpec()
    adaptation: AdaptationConfig = AdaptationConfig()
    training: TrainConfig = TrainConfig()
    collection: CollectionSpec = CollectionSpec()
    variant: str = "proposed"
    fixed_temperature: Optional[float] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "fixed_temperature" and not self.fixed_temperature:
            raise ConfigError("variant fixed_temperature needs a positive fixed_temperature")

    # -- sampling ------------------------------------------------------------
    def is_resolved(self) -> bool:
        return not any(isinstance(getattr(sec, f.name), Range)
                       for sec in (self.initial, self.desired, self.maneuver, self.speed, self.fault)
                       for f in fields(sec))

    def resolve(self, rng: np.random.Generator) -> "EngagementConfig":
        """Draw every ranged scenario field (fixed declaration order)."""
        out = {}
        for name in ("initial", "desired", "maneuver", "speed", "fault"):
            sec = getattr(self, name)
            out[name] = replace(sec, **{f.name: _resolve(getattr(sec, f.name), rng) for f in fields(sec)})
        return replace(self, **out)

    def with_variant(self, variant: str, fixed_temperature: Optional[float] = None) -> "EngagementConfig":
        ft = fixed_temperature if fixed_temperature is not None else self.fixed_temperature
        return replace(self, variant=variant, fixed_temperature=ft if variant == "fixed_temperature" else self.fixed_temperature)

    # -- runtime objects -----------------------------------------------------
    def _need_resolved(self):
        if not self.is_resolved():
            raise ConfigError("config still contains ranges; call resolve() first")

    def initial_state(self) -> EngagementState:
        self._need_resolved()
        i = self.initial
        return initial_state(i.R, i.theta_L, i.phi_L, i.theta_m, i.phi_m, i.theta_t, i.phi_t, i.V_M, i.V_T)

    def target_maneuver(self) -> TargetManeuver:
        self._need_resolved()
        return TargetManeuver(**dataclasses.asdict(self.maneuver))

    def speed_model(self) -> SpeedModel:
        self._need_resolved()
        return SpeedModel(**dataclasses.asdict(self.speed))

    def actuator_fault(self) -> ActuatorFault:
        self._need_resolved()
        f = self.fault
        if f.eta >= 1.0:
            return ActuatorFault()
        return ActuatorFault(f.eta, f.t_start, f.t_end)

    def noise_config(self) -> NoiseConfig:
        return NoiseConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                              for k, v in dataclasses.asdict(self.noise).items()})

    def monitor(self) -> TerminalMonitor:
        s = self.sim
        return TerminalMonitor(R_hit=s.R_hit, R_max=s.R_max, t_max=s.t_max, k_increase=s.k_increase)

    def controller_config(self) -> ControllerConfig:
        self._need_resolved()
        m, c = self.mppi, self.cost
        mp = MPPIConfig(
            n_samples=m.n_samples, horizon=m.horizon, sigma=tuple(m.sigma), dt=self.sim.dt,
            a_max=self.sim.a_max, sigma_floor=m.sigma_floor, block_size=m.block_size, workers=m.workers,
            fixed_temperature=self.fixed_temperature if self.variant == "fixed_temperature" else None,
        )
        cost = CostConfig(
            K1=tuple(c.K1), K2=tuple(c.K2), lambda_star=c.lambda_star, control_penalty=c.control_penalty,
            theta_LD=self.desired.theta_LD, phi_LD=self.desired.phi_LD, terminal_weight=c.terminal_weight,
            rate_shaping=c.rate_shaping, tau_min=c.tau_min, tgo_scaling=c.tgo_scaling,
            tgo_floor=c.tgo_floor,
        )
        return ControllerConfig(mp, cost, self.adaptation, adapt=self.variant != "no_adaptation")

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return _to_plain(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _to_plain(obj):
    if isinstance(obj, Range):
        return {"low": obj.low, "high": obj.high}
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _number(v, where):
    if isinstance(v, bool):
        raise ConfigError(f"{where}: expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            pass
    raise ConfigError(f"{where}: expected a number, got {v!r}")


def _value(v, where, ranged):
    if isinstance(v, dict):
        if not ranged:
            raise ConfigError(f"{where}: ranges are not allowed here")
        if set(v) != {"low", "high"}:
            raise ConfigError(f"{where}: a range needs exactly 'low' and 'high'")
        return Range(_number(v["low"], where), _number(v["high"], where))
    if isinstance(v, (list, tuple)):
        return tuple(_number(x, where) for x in v)
    return _number(v, where)


_RANGED = {InitialConditions, Desired, ManeuverSpec, SpeedSpec, FaultSpec}


def _build(cls, data, where, base=None):
    defaults = cls() if base is None else base
    if data is None:
        return defaults
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    kinds = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(kinds)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        here = f"{where}.{k}"
        cur = getattr(defaults, k)
        if dataclasses.is_dataclass(cur):
            kw[k] = _build(type(cur), v, here, cur)
        elif isinstance(cur, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{here}: expected true/false")
            kw[k] = v
        elif isinstance(cur, int) and not isinstance(cur, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
                raise ConfigError(f"{here}: expected an integer")
            kw[k] = int(v)
        elif isinstance(cur, str):
            kw[k] = str(v)
        elif k == "uncertainty_channels":
            kw[k] = tuple(str(x) for x in v)
        elif isinstance(cur, tuple) and cur and isinstance(cur[0], int):
            if not isinstance(v, (list, tuple)) or any(isinstance(x, bool) or not isinstance(x, int) for x in v):
                raise ConfigError(f"{here}: expected a list of integers")
            kw[k] = tuple(v)
        elif cur is None:
            kw[k] = None if v is None else _number(v, here)
        else:
            kw[k] = _value(v, here, cls in _RANGED)
    try:
        return replace(defaults, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> EngagementConfig:
    return _build(EngagementConfig, data, "config")


PRESETS = ("case1", "case2", "montecarlo", "case1_fixed_temperature", "case2_fixed_temperature")


def load_config(source: Union[str, Path]) -> EngagementConfig:
    """Load a YAML config file, or a bundled preset by name."""
    p = Path(source)
    if p.suffix in (".yaml", ".yml") or p.exists():
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
    elif str(source) in PRESETS:
        text = resources.files("metaguide").joinpath("presets").joinpath(f"{source}.yaml").read_text()
    else:
        raise ConfigError(f"no config file or preset named {source!r}")
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {source}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: EngagementConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
