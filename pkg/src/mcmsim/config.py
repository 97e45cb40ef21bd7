"""Scenario configuration: a YAML key-value tree with explicit defaults.

Every physical parameter defaults to its calibrated value; a config file only
lists overrides. Unknown keys and out-of-range values raise ``ConfigError``
naming the offending key path.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .atomic import (
    DEFAULT_HIDE_SHIFT_MHZ,
    DEFAULT_HIDE_SHIFT_REL_STD,
    DEFAULT_PHASE_OFFSET,
    AtomicConstants,
    ImagingParams,
    default_imaging,
)
from .imaging import DEFAULT_THRESHOLD, CameraModel
from .qubits import (
    DEFAULT_RABI_HZ,
    DETUNING_JITTER_HZ,
    ECHO_DEPHASING_RATE,
    GRADIENT_HZ_PER_SITE,
    MOT_DEPHASING_RATE,
    PULSE_DEPOLARIZATION,
)
from .rearrange import DEFAULT_MOVE_LOSS, MoveTimingModel
from .sequence import SequenceError, parse_sequence

CONFIG_VERSION = 1
SCENARIOS = ("table1", "fig2", "fig3", "fig4", "fig5", "custom")
MAX_SEED = 2**64 - 1


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class Physics:
    """Everything a trial needs besides the sequence and the array layout."""

    constants: AtomicConstants = AtomicConstants()
    camera: CameraModel = CameraModel()
    imaging: tuple = ()  # (name, value) overrides applied to both imaged states
    threshold: float = DEFAULT_THRESHOLD
    hide_mean_mhz: float = DEFAULT_HIDE_SHIFT_MHZ
    hide_rel_std: float = DEFAULT_HIDE_SHIFT_REL_STD
    # "static": one per-site shift map for the whole run; "per_trial": redrawn each trial
    hide_disorder: str = "static"
    phase_offset: float = DEFAULT_PHASE_OFFSET
    echo_dephasing_rate: float = ECHO_DEPHASING_RATE
    mot_dephasing_rate: float = MOT_DEPHASING_RATE
    pulse_depolarization: float = PULSE_DEPOLARIZATION
    rabi_hz: float = DEFAULT_RABI_HZ
    gradient_hz_per_site: float = GRADIENT_HZ_PER_SITE
    jitter_hz: float = DETUNING_JITTER_HZ
    move_loss_prob: float = DEFAULT_MOVE_LOSS
    timing: MoveTimingModel = MoveTimingModel()
    total_hold_s: float = 0.6
    # Drops every incoherent channel acting on qubit coherence (dephasing,
    # pulse depolarization, hidden-site scattering and excess decoherence).
    ideal: bool = False

    def imaging_params(self, state: int, duration: float | None = None, overrides=()) -> ImagingParams:
        kw = dict(self.imaging)
        kw.update(dict(overrides))
        if duration is not None:
            kw["duration_s"] = duration
        if self.ideal:
            kw["hidden_excess_decoherence"] = 0.0
        return default_imaging(state, **kw)

    def with_ideal(self) -> Physics:
        return replace(self, ideal=True)


@dataclass(frozen=True)
class ArrayLayout:
    rows: int = 7
    cols: int = 10
    layout: str = "checkerboard"
    fill: float = 0.5
    sub_origin: tuple = (2, 3)
    sub_dims: tuple = (3, 4)
    sub_fill: float = 0.99

    @property
    def dims(self) -> tuple[int, int]:
        return (self.rows, self.cols)


@dataclass
class ScenarioConfig:
    scenario: str = "custom"
    seed: int = 0
    trials: int | None = None  # per run; scenario default when None
    block_size: int = 128
    workers: int = 1
    array: ArrayLayout = ArrayLayout()
    physics: Physics = Physics()
    n_phases: int = 12
    params: dict = field(default_factory=dict)
    sequence: tuple = ()
    write_frames: bool = False

    def to_dict(self) -> dict:
        p = self.physics
        return {
            "version": CONFIG_VERSION,
            "scenario": self.scenario,
            "seed": self.seed,
            "trials": self.trials,
            "block_size": self.block_size,
            "array": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.array).items()},
            "constants": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(p.constants).items()},
            "imaging": dict(p.imaging),
            "camera": asdict(p.camera),
            "noise": {k: getattr(p, k) for k in _NOISE_KEYS},
            "hiding": {"mean_shift_mhz": p.hide_mean_mhz, "rel_std": p.hide_rel_std, "phase_offset": p.phase_offset,
                       "disorder": p.hide_disorder},
            "readout": {"threshold": p.threshold},
            "refill": {"move_loss_prob": p.move_loss_prob, **asdict(p.timing), "total_hold_s": p.total_hold_s},
            "scan": {"n_phases": self.n_phases},
            "params": dict(self.params),
        }


_NOISE_KEYS = ("echo_dephasing_rate", "mot_dephasing_rate", "pulse_depolarization", "rabi_hz",
               "gradient_hz_per_site", "jitter_hz", "ideal")
_TOP_KEYS = {"version", "scenario", "seed", "trials", "block_size", "workers", "array", "constants",
             "imaging", "camera", "noise", "hiding", "readout", "refill", "scan", "params", "sequence",
             "output"}


def _section(data: dict, key: str) -> dict:
    value = data.get(key)
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(key, "expected a mapping")
    return value


def _check_keys(section: dict, allowed, prefix: str):
    for k in section:
        if k not in allowed:
            raise ConfigError(f"{prefix}.{k}", "unknown key")


def _number(value, key: str, lo=-math.inf, hi=math.inf, integer=False, lo_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(key, "expected an integer")
    if not math.isfinite(value) and not (value == math.inf and hi == math.inf):
        raise ConfigError(key, "must be finite")
    if value < lo or value > hi or (lo_open and value == lo):
        raise ConfigError(key, f"out of range: {value}")
    return int(value) if integer else float(value)


def _build(cls, values: dict, prefix: str, base=None):
    names = {f.name: f for f in fields(cls)}
    _check_keys(values, names, prefix)
    kw = {}
    for k, v in values.items():
        default = getattr(base if base is not None else cls(), k)
        if isinstance(default, tuple):
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{prefix}.{k}", "expected a list")
            as_int = bool(default) and isinstance(default[0], int)
            kw[k] = tuple(_number(x, f"{prefix}.{k}", integer=as_int) for x in v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{prefix}.{k}", "expected true/false")
            kw[k] = v
        elif isinstance(default, str):
            kw[k] = str(v)
        else:
            kw[k] = _number(v, f"{prefix}.{k}", integer=isinstance(default, int))
    try:
        return replace(base if base is not None else cls(), **kw)
    except ValueError as exc:
        raise ConfigError(prefix, str(exc)) from None


def config_from_dict(data: dict | None, scenario: str | None = None) -> ScenarioConfig:
    data = dict(data or {})
    _check_keys(data, _TOP_KEYS, "config")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported version {version}")
    scen = scenario or data.get("scenario", "custom")
    if scen not in SCENARIOS:
        raise ConfigError("scenario", f"unknown scenario {scen!r}")

    array = _build(ArrayLayout, _section(data, "array"), "array")
    if array.layout not in ("checkerboard", "subarray", "uniform"):
        raise ConfigError("array.layout", f"unknown layout {array.layout!r}")
    if array.rows < 1 or array.cols < 1:
        raise ConfigError("array", "rows and cols must be positive")
    for k in ("fill", "sub_fill"):
        if not 0 <= getattr(array, k) <= 1:
            raise ConfigError(f"array.{k}", "must be in [0, 1]")

    constants = _build(AtomicConstants, _section(data, "constants"), "constants")
    camera = _build(CameraModel, _section(data, "camera"), "camera")
    if camera.background_std <= 0:
        raise ConfigError("camera.background_std", "must be positive")

    imaging = _section(data, "imaging")
    allowed_imaging = {f.name for f in fields(ImagingParams)} - {"target_state"}
    _check_keys(imaging, allowed_imaging, "imaging")
    imaging = {k: _number(v, f"imaging.{k}", lo=0) for k, v in imaging.items()}
    try:
        default_imaging(1, **imaging)
    except ValueError as exc:
        raise ConfigError("imaging", str(exc)) from None

    noise = _section(data, "noise")
    _check_keys(noise, _NOISE_KEYS, "noise")
    noise_kw = {}
    for k, v in noise.items():
        if k == "ideal":
            if not isinstance(v, bool):
                raise ConfigError("noise.ideal", "expected true/false")
            noise_kw[k] = v
        else:
            noise_kw[k] = _number(v, f"noise.{k}", lo=0)
    if "pulse_depolarization" in noise_kw and noise_kw["pulse_depolarization"] >= 1:
        raise ConfigError("noise.pulse_depolarization", "must be below 1")

    hiding = _section(data, "hiding")
    _check_keys(hiding, {"mean_shift_mhz", "rel_std", "phase_offset", "disorder"}, "hiding")
    disorder = hiding.get("disorder", "static")
    if disorder not in ("static", "per_trial"):
        raise ConfigError("hiding.disorder", "expected 'static' or 'per_trial'")
    readout = _section(data, "readout")
    _check_keys(readout, {"threshold"}, "readout")
    refill = _section(data, "refill")
    timing_keys = {f.name for f in fields(MoveTimingModel)}
    _check_keys(refill, timing_keys | {"move_loss_prob", "total_hold_s"}, "refill")
    timing = _build(MoveTimingModel, {k: v for k, v in refill.items() if k in timing_keys}, "refill")

    physics = Physics(
        constants=constants,
        camera=camera,
        imaging=tuple(sorted(imaging.items())),
        threshold=_number(readout.get("threshold", DEFAULT_THRESHOLD), "readout.threshold"),
        hide_mean_mhz=_number(hiding.get("mean_shift_mhz", DEFAULT_HIDE_SHIFT_MHZ), "hiding.mean_shift_mhz",
                              lo=0, lo_open=True),
        hide_rel_std=_number(hiding.get("rel_std", DEFAULT_HIDE_SHIFT_REL_STD), "hiding.rel_std", lo=0),
        phase_offset=_number(hiding.get("phase_offset", DEFAULT_PHASE_OFFSET), "hiding.phase_offset"),
        hide_disorder=disorder,
        move_loss_prob=_number(refill.get("move_loss_prob", DEFAULT_MOVE_LOSS), "refill.move_loss_prob", 0, 1),
        timing=timing,
        total_hold_s=_number(refill.get("total_hold_s", 0.6), "refill.total_hold_s", lo=0, lo_open=True),
        **noise_kw,
    )

    scan = _section(data, "scan")
    _check_keys(scan, {"n_phases"}, "scan")
    n_phases = _number(scan.get("n_phases", 12), "scan.n_phases", lo=1, integer=True)
    output = _section(data, "output")
    _check_keys(output, {"frames"}, "output")

    seed = _number(data.get("seed", 0), "seed", 0, MAX_SEED, integer=True)
    trials = data.get("trials")
    if trials is not None:
        trials = _number(trials, "trials", lo=0, integer=True)
    sequence = ()
    if "sequence" in data:
        try:
            sequence = parse_sequence(data["sequence"])
        except (SequenceError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError("sequence", str(exc)) from None
    if scen == "custom" and not sequence:
        raise ConfigError("sequence", "the custom scenario needs a sequence")
    params = _section(data, "params")
    return ScenarioConfig(
        scenario=scen, seed=seed, trials=trials,
        block_size=_number(data.get("block_size", 128), "block_size", lo=1, integer=True),
        workers=_number(data.get("workers", 1), "workers", lo=1, integer=True),
        array=array, physics=physics, n_phases=n_phases, params=dict(params), sequence=sequence,
        write_frames=bool(output.get("frames", False)),
    )


def load_config(path: str | Path | None, scenario: str | None = None) -> ScenarioConfig:
    if path is None:
        return config_from_dict({}, scenario)
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    return config_from_dict(data, scenario)


def check_params(params: dict, defaults: dict[str, Any], scenario: str) -> dict:
    """Merge scenario parameters over their defaults, rejecting unknown keys."""
    _check_keys(params, defaults, f"params[{scenario}]")
    out = dict(defaults)
    out.update(params)
    return out
