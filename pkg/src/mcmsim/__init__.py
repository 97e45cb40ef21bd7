"""Monte Carlo simulator for site-selective mid-circuit measurement in
optical tweezer arrays of two-level nuclear-spin qubits."""
from .atomic import (
    AtomicConstants,
    ImagingParams,
    default_imaging,
    light_shift_phase,
    raman_loss_budget,
)
from .config import ConfigError, ScenarioConfig, config_from_dict, load_config
from .engine import Experiment, ExperimentLog, run_experiment
from .scenarios import RunLog, run_scenario

__version__ = "0.1.0"

__all__ = [
    "AtomicConstants", "ConfigError", "Experiment", "ExperimentLog", "ImagingParams", "RunLog",
    "ScenarioConfig", "config_from_dict", "default_imaging", "light_shift_phase", "load_config",
    "raman_loss_budget", "run_experiment", "run_scenario",
]
