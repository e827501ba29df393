"""Simulator for SDN controllers that hand packet processing to external applications."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("exopipe")
except PackageNotFoundError:  # editable installs during dev
    __version__ = "0.0.0"

# Re-export the stable API surface
from .broker import Broker, FilterPredicate
from .clock import MS, NS, S, US, Simulator
from .config import ConfigError, Scenario, ScenarioConfig, load_config
from .controller import Controller, FilterPlacement, NbLatencyModel, PipelineMode
from .fabric import Network
from .harness import build_testbed, calibrate, emit_csv, run_scenario
from .topology import TopologySpec, build_fat_tree

__all__ = [
    "Broker",
    "FilterPredicate",
    "Simulator",
    "NS",
    "US",
    "MS",
    "S",
    "ConfigError",
    "Scenario",
    "ScenarioConfig",
    "load_config",
    "Controller",
    "FilterPlacement",
    "NbLatencyModel",
    "PipelineMode",
    "Network",
    "build_testbed",
    "calibrate",
    "emit_csv",
    "run_scenario",
    "TopologySpec",
    "build_fat_tree",
    "__version__",
]
