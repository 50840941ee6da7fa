"""Strict JSON configuration documents for the command-line tool.

Unknown keys are rejected everywhere so a typo cannot silently fall back to
a default.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigurationError, InvalidArgumentError
from .harness import TABLE1_SCENARIOS, GridOptions
from .selection import MechanismSpec, mechanism_from_dict
from .simulate import ScenarioConfig

DEFAULT_SEED = 20240101


def load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return data


def _strict(data: dict, allowed, where: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    return data


def _positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
    return value


def _prob(value, name, lo_open=True, hi_open=True):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    ok = ok and (value > 0 if lo_open else value >= 0) and (value < 1 if hi_open else value <= 1)
    if not ok:
        raise ConfigurationError(f"{name} out of range: {value!r}")
    return float(value)


def grid_options(data: Optional[dict], base: GridOptions = GridOptions()) -> GridOptions:
    if data is None:
        return base
    _strict(data, {"n_alpha", "n_beta", "lrt_threshold", "early_stop"}, "grid")
    early = data.get("early_stop", base.early_stop)
    if not isinstance(early, bool):
        raise ConfigurationError("grid.early_stop must be a boolean")
    return GridOptions(
        n_alpha=_positive_int(data.get("n_alpha", base.n_alpha), "grid.n_alpha"),
        n_beta=_positive_int(data.get("n_beta", base.n_beta), "grid.n_beta"),
        lrt_threshold=_prob(data.get("lrt_threshold", base.lrt_threshold), "grid.lrt_threshold"),
        early_stop=early,
    )


def scenario_from(data: Optional[dict], seed: Optional[int] = None, **overrides) -> ScenarioConfig:
    data = dict(data or {})
    data.update(overrides)
    if seed is not None:
        data["seed"] = seed
    return ScenarioConfig.from_dict(data)


def mechanism_from(data: dict) -> MechanismSpec:
    try:
        return mechanism_from_dict(data)
    except InvalidArgumentError as exc:
        raise ConfigurationError(str(exc)) from None


@dataclass(frozen=True)
class FitConfig:
    """Real-data fit. The full grid is swept by default so every point is reported."""

    data: Optional[str] = None
    grid: GridOptions = GridOptions(early_stop=False)

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        _strict(data, {"data", "grid"}, "fit config")
        path = data.get("data")
        if path is not None and not isinstance(path, str):
            raise ConfigurationError("data must be a file path")
        return cls(path, grid_options(data.get("grid"), cls.grid))


@dataclass(frozen=True)
class CalibrationSettings:
    target_rate: float = 0.70
    tolerance: float = 0.01
    pilot_replicates: int = 200

    @classmethod
    def pick(cls, data: dict) -> "CalibrationSettings":
        return cls(
            _prob(data.get("target_rate", 0.70), "target_rate", hi_open=False),
            _prob(data.get("tolerance", 0.01), "tolerance"),
            _positive_int(data.get("pilot_replicates", 200), "pilot_replicates"),
        )


_CAL_KEYS = {"target_rate", "tolerance", "pilot_replicates"}


@dataclass(frozen=True)
class CalibrateConfig:
    scenario: ScenarioConfig
    mechanisms: tuple
    calibration: CalibrationSettings

    @classmethod
    def from_dict(cls, data: dict, seed: Optional[int] = None) -> "CalibrateConfig":
        _strict(data, {"scenario", "mechanisms"} | _CAL_KEYS, "calibrate config")
        mechs = data.get("mechanisms")
        if not isinstance(mechs, list) or not mechs:
            raise ConfigurationError("mechanisms must be a nonempty list")
        return cls(scenario_from(data.get("scenario"), seed), tuple(mechanism_from(m) for m in mechs),
                   CalibrationSettings.pick(data))


@dataclass(frozen=True)
class ScenarioRunConfig:
    scenario: ScenarioConfig
    mechanism: MechanismSpec
    n_replicates: int
    calibrate: bool
    calibration: CalibrationSettings
    grid: GridOptions

    @classmethod
    def from_dict(cls, data: dict, seed: Optional[int] = None) -> "ScenarioRunConfig":
        _strict(data, {"scenario", "mechanism", "n_replicates", "calibrate", "grid"} | _CAL_KEYS, "scenario config")
        if "mechanism" not in data:
            raise ConfigurationError("scenario config needs a mechanism")
        calibrate = data.get("calibrate", True)
        if not isinstance(calibrate, bool):
            raise ConfigurationError("calibrate must be a boolean")
        return cls(
            scenario_from(data.get("scenario"), seed),
            mechanism_from(data["mechanism"]),
            _positive_int(data.get("n_replicates", 1000), "n_replicates"),
            calibrate,
            CalibrationSettings.pick(data),
            grid_options(data.get("grid")),
        )


def _heterogeneity(value, where):
    if not isinstance(value, list) or len(value) != 3:
        raise ConfigurationError(f"{where} must be [sigma0_2, sigma1_2, rho01]")
    return tuple(float(v) for v in value)


@dataclass(frozen=True)
class Table1Config:
    seed: int = DEFAULT_SEED
    m: int = 30
    n_replicates: int = 1000
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    alpha_sig: float = 0.05
    grid: GridOptions = field(default_factory=GridOptions)
    scenario: dict = field(default_factory=dict)
    heterogeneity: tuple = TABLE1_SCENARIOS

    KEYS = {"seed", "m", "n_replicates", "alpha_sig", "grid", "scenario", "heterogeneity"} | _CAL_KEYS

    @classmethod
    def from_dict(cls, data: dict, seed: Optional[int] = None) -> "Table1Config":
        _strict(data, cls.KEYS, "table1 config")
        base = dict(data.get("scenario") or {})
        fixed = {"lambda_", "m", "seed", "sigma0_2", "sigma1_2", "rho01"}
        _strict(base, {f.name for f in fields(ScenarioConfig)} - fixed | {"lambda"}, "table1 scenario")
        het = data.get("heterogeneity")
        het = cls.heterogeneity if het is None else tuple(_heterogeneity(h, "heterogeneity entry") for h in het)
        cfg = cls(
            seed=int(seed if seed is not None else data.get("seed", DEFAULT_SEED)),
            m=_positive_int(data.get("m", 30), "m"),
            n_replicates=_positive_int(data.get("n_replicates", 1000), "n_replicates"),
            calibration=CalibrationSettings.pick(data),
            alpha_sig=_prob(data.get("alpha_sig", 0.05), "alpha_sig"),
            grid=grid_options(data.get("grid")),
            scenario=base,
            heterogeneity=het,
        )
        cfg.scenarios()  # fail on bad scenario values before any work starts
        return cfg

    def scenarios(self) -> list:
        return [
            scenario_from(self.scenario, self.seed, m=self.m, sigma0_2=s0, sigma1_2=s1, rho01=r)
            for s0, s1, r in self.heterogeneity
        ]


@dataclass(frozen=True)
class Figure1Config:
    seed: int = DEFAULT_SEED
    n_replicates: int = 200
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    alpha_sig: float = 0.05
    scenario: dict = field(default_factory=lambda: {"sigma0_2": 2.0, "sigma1_2": 3.0, "rho01": 0.0})

    KEYS = {"seed", "n_replicates", "alpha_sig", "scenario"} | _CAL_KEYS

    @classmethod
    def from_dict(cls, data: dict, seed: Optional[int] = None) -> "Figure1Config":
        _strict(data, cls.KEYS, "figure1 config")
        scen = dict(cls().scenario)
        scen.update(data.get("scenario") or {})
        cfg = cls(
            seed=int(seed if seed is not None else data.get("seed", DEFAULT_SEED)),
            n_replicates=_positive_int(data.get("n_replicates", 200), "n_replicates"),
            calibration=CalibrationSettings.pick(data),
            alpha_sig=_prob(data.get("alpha_sig", 0.05), "alpha_sig"),
            scenario=scen,
        )
        cfg.scenario_config()
        return cfg

    def scenario_config(self) -> ScenarioConfig:
        return scenario_from(self.scenario, self.seed)
