"""Scenario configuration: vehicle model, wind, maneuver, planner, controller and simulation."""

import copy
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..aero import AeroModel, default_model, load_model, model_from_dict
from ..dynamics import ConstantWind, PiecewiseConstantWind
from ..mpc import MpcConfig

MANEUVERS = ("hover_step", "straight_line", "loiter", "window_traverse", "aerobatic")


def wind_from_spec(spec):
    """Constant vector, {"kind": "constant", "value"} or {"kind": "piecewise", "times", "values"}."""
    if spec is None:
        return ConstantWind()
    if isinstance(spec, (list, tuple, np.ndarray)):
        return ConstantWind(np.asarray(spec, dtype=float).reshape(3))
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return ConstantWind(np.asarray(spec.get("value", [0, 0, 0]), dtype=float).reshape(3))
    if kind == "piecewise":
        return PiecewiseConstantWind(spec["times"], spec["values"])
    raise ValueError(f"unknown wind kind {kind!r}")


@dataclass
class ScenarioConfig:
    name: str
    maneuver: dict
    model: AeroModel = field(default_factory=default_model)
    wind: object = None                   # wind spec (see wind_from_spec)
    planner: dict = field(default_factory=dict)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    sim_dt: float = 1e-3
    control_rate: float = 100.0
    duration: float = None                # defaults to the planned trajectory length
    wind_compensation: bool = True
    rate_time_constant: float = 0.03      # body-rate loop lag, s
    rate_accel_limit: float = None        # rad/s^2 slew clamp, None = off
    noise: dict = field(default_factory=dict)   # {"position": std, "velocity": std}
    seed: int = 0

    def __post_init__(self):
        kind = self.maneuver.get("kind")
        if kind not in MANEUVERS:
            raise ValueError(f"unknown maneuver kind {kind!r}")
        if self.sim_dt <= 0 or self.control_rate <= 0:
            raise ValueError("sim dt and control rate must be positive")
        if self.duration is not None and self.duration < 0:
            raise ValueError("duration must be nonnegative")
        ratio = 1.0 / (self.sim_dt * self.control_rate)
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("control rate must divide the simulation rate")
        if abs(self.mpc.dt - 1.0 / self.control_rate) > 1e-12:
            raise ValueError("MPC dt must equal the control period")

    @property
    def substeps(self):
        return int(round(1.0 / (self.sim_dt * self.control_rate)))

    @property
    def control_dt(self):
        return 1.0 / self.control_rate

    def wind_field(self):
        return wind_from_spec(self.wind)

    def with_overrides(self, wind=None, seed=None, horizon=None, compensation=None):
        cfg = copy.deepcopy(self)
        if wind is not None:
            cfg.wind = np.asarray(wind, dtype=float).reshape(3).tolist()
        if seed is not None:
            cfg.seed = int(seed)
        if horizon is not None:
            cfg.mpc.N = int(horizon)
            if cfg.mpc.N < 1:
                raise ValueError("horizon must be at least 1")
        if compensation is not None:
            cfg.wind_compensation = bool(compensation)
        return cfg

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d)
        aero = d.pop("aero", None)
        if isinstance(aero, str):
            path = aero if os.path.isabs(aero) else os.path.join(base_dir, aero)
            if not os.path.exists(path):
                raise FileNotFoundError(f"aero model file {path} not found")
            model = load_model(path)
        elif isinstance(aero, dict):
            model = model_from_dict(aero)
        else:
            model = default_model()
        control_rate = float(d.pop("control_rate", 100.0))
        mpc_d = dict(d.pop("mpc", {}))
        mpc_d.setdefault("dt", 1.0 / control_rate)
        d.pop("notes", None)
        known = {"name", "maneuver", "wind", "planner", "sim_dt", "duration",
                 "wind_compensation", "rate_time_constant", "rate_accel_limit", "noise", "seed"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scenario keys {sorted(extra)}")
        return cls(model=model, mpc=MpcConfig.from_dict(mpc_d), control_rate=control_rate, **d)


def load_scenario(path):
    with open(path) as f:
        d = json.load(f)
    return ScenarioConfig.from_dict(d, os.path.dirname(os.path.abspath(path)))


def builtin_scenarios():
    """Names of the scenario files shipped with the package."""
    here = os.path.join(os.path.dirname(os.path.dirname(__file__)), "scenarios")
    return sorted(f[:-5] for f in os.listdir(here) if f.endswith(".json"))


def builtin_path(name):
    here = os.path.join(os.path.dirname(os.path.dirname(__file__)), "scenarios")
    return os.path.join(here, name if name.endswith(".json") else name + ".json")
