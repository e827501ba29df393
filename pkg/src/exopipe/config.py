"""Scenario configuration: dataclass defaults plus an INI file loader.

Durations accept ``ns``, ``us``, ``ms`` or ``s`` suffixes (a bare number is
seconds); capacities accept ``bit``, ``kbit``, ``Mbit`` or ``Gbit`` (a bare
number is bits/sec). See ``docs/topology.md`` for every key.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

from .clock import MS, NS, S, US
from .controller import INSTALL_CHANNELS, BrokerSettings, FilterPlacement, NbLatencyModel, PipelineMode
from .extapps import MATCH_GRANULARITIES, AppConfig
from .topology import TopologySpec

__all__ = [
    "HarnessError",
    "ConfigError",
    "Scenario",
    "ScenarioConfig",
    "parse_duration",
    "parse_capacity",
    "load_config",
    "config_from_parser",
    "field_names",
]


class HarnessError(RuntimeError):
    pass


class ConfigError(HarnessError, ValueError):
    pass


class Scenario(str, Enum):
    PING = "ping"
    THROUGHPUT = "throughput"
    FILTER = "filter"


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: Scenario = Scenario.PING
    mode: PipelineMode = PipelineMode.INTERNAL
    placement: FilterPlacement = FilterPlacement.CLIENT_SIDE
    repetitions: int = 500
    duration: int = 150 * S
    n_conns: Tuple[int, ...] = (1, 2, 4, 8, 16)
    seed: int = 0
    host_pair: Tuple[int, int] = (1, 4)
    ping_interval: int = 1 * S
    ping_timeout: int = 1 * S
    filter_pings: int = 50
    topology: TopologySpec = field(default_factory=TopologySpec)
    latency: NbLatencyModel = field(default_factory=NbLatencyModel)
    broker: BrokerSettings = field(default_factory=BrokerSettings)
    apps: AppConfig = field(default_factory=AppConfig)

    def validate(self) -> "ScenarioConfig":
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if min(self.duration, self.ping_interval, self.ping_timeout) <= 0:
            raise ConfigError("duration, ping_interval and ping_timeout must be > 0")
        if not self.n_conns or min(self.n_conns) < 1:
            raise ConfigError("n_conns needs at least one value, all >= 1")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("seed must be a u64")
        if self.host_pair[0] == self.host_pair[1] or min(self.host_pair) < 1:
            raise ConfigError("host_pair needs two distinct 1-based host indices")
        if self.filter_pings < 0:
            raise ConfigError("filter_pings must be >= 0")
        if self.broker.partitions < 1:
            raise ConfigError("broker partitions must be >= 1")
        return self


_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?|\.\d+)\s*(ns|us|ms|s)?\s*$")
_CAPACITY = re.compile(r"^\s*(\d+(?:\.\d+)?|\.\d+)\s*(bit|kbit|mbit|gbit)?\s*$", re.IGNORECASE)
_DURATION_UNITS = {"ns": NS, "us": US, "ms": MS, "s": S, None: S}
_CAPACITY_UNITS = {"bit": 1, "kbit": 10**3, "mbit": 10**6, "gbit": 10**9, None: 1}


def parse_duration(text: str) -> int:
    """``"10ms"`` -> 10_000_000 (virtual nanoseconds)."""
    m = _DURATION.match(str(text))
    if not m:
        raise ConfigError(f"not a duration: {text!r}")
    value = Fraction(m.group(1)) * _DURATION_UNITS[m.group(2)]
    if value.denominator != 1:
        raise ConfigError(f"duration {text!r} is finer than 1 ns")
    return int(value)


def parse_capacity(text: str) -> int:
    """``"100Mbit"`` -> 100_000_000 (bits/sec)."""
    m = _CAPACITY.match(str(text))
    if not m:
        raise ConfigError(f"not a capacity: {text!r}")
    unit = m.group(2).lower() if m.group(2) else None
    value = Fraction(m.group(1)) * _CAPACITY_UNITS[unit]
    if value <= 0 or value.denominator != 1:
        raise ConfigError(f"capacity {text!r} must be a positive whole number of bits/sec")
    return int(value)


def _int(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise ConfigError(f"not an integer: {text!r}") from None


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "yes", "true", "on"):
        return True
    if lowered in ("0", "no", "false", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(_int(part) for part in text.replace(" ", "").split(",") if part)


def _pair(text: str) -> Tuple[int, int]:
    values = _ints(text)
    if len(values) != 2:
        raise ConfigError(f"expected two comma-separated integers, got {text!r}")
    return values[0], values[1]


def _choice(*allowed: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in allowed:
            raise ConfigError(f"{value!r} is not one of {', '.join(allowed)}")
        return value
    return parse


def _enum(kind: type) -> Callable[[str], Enum]:
    def parse(text: str) -> Enum:
        try:
            return kind(text.strip().lower())
        except ValueError:
            allowed = ", ".join(member.value for member in kind)
            raise ConfigError(f"{text!r} is not one of {allowed}") from None
    return parse


_SCHEMA: Dict[str, Dict[str, Callable[[str], Any]]] = {
    "topology": {
        "k": _int,
        "sites": _int,
        "hosts_per_edge": _int,
        "link_latency": parse_duration,
        "link_capacity": parse_capacity,
        "host_latency": parse_duration,
        "host_capacity": parse_capacity,
        "intersite_latency": parse_duration,
        "intersite_capacity": parse_capacity,
    },
    "latency": {
        "rest_install_delay": parse_duration,
        "rpc_packet_out_delay": parse_duration,
        "internal_processing_delay": parse_duration,
        "rpc_install_delay": parse_duration,
    },
    "broker": {
        "broker_delay": parse_duration,
        "topic": str.strip,
        "partitions": _int,
        "persist_dir": str.strip,
    },
    "apps": {
        "hard_timeout": parse_duration,
        "idle_timeout": parse_duration,
        "priority": _int,
        "match_granularity": _choice(*MATCH_GRANULARITIES),
        "bidirectional": _bool,
        "sweep_period": parse_duration,
        "processing_delay": parse_duration,
        "install_channel": _choice(*INSTALL_CHANNELS),
        "max_poll_records": _int,
        "flood_suppression_window": parse_duration,
    },
    "scenario": {
        "scenario": _enum(Scenario),
        "mode": _enum(PipelineMode),
        "placement": _enum(FilterPlacement),
        "repetitions": _int,
        "duration": parse_duration,
        "n_conns": _ints,
        "seed": _int,
        "host_pair": _pair,
        "ping_interval": parse_duration,
        "ping_timeout": parse_duration,
        "filter_pings": _int,
    },
}


def _section(parser: configparser.ConfigParser, name: str) -> Dict[str, Any]:
    if not parser.has_section(name):
        return {}
    schema = _SCHEMA[name]
    values: Dict[str, Any] = {}
    for key, raw in parser.items(name):
        if key not in schema:
            raise ConfigError(f"[{name}] has no key {key!r}")
        try:
            values[key] = schema[key](raw)
        except ConfigError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from None
    return values


def config_from_parser(parser: configparser.ConfigParser,
                       base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    unknown = [s for s in parser.sections() if s not in _SCHEMA]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    cfg = base or ScenarioConfig()
    try:
        cfg = replace(
            cfg,
            topology=replace(cfg.topology, **_section(parser, "topology")),
            latency=replace(cfg.latency, **_section(parser, "latency")),
            broker=replace(cfg.broker, **_section(parser, "broker")),
            apps=replace(cfg.apps, **_section(parser, "apps")),
            **_section(parser, "scenario"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path: Union[str, Path, None] = None, base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    """Defaults overlaid with ``path`` (when given); raises :class:`ConfigError`."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        try:
            with path.open("r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_parser(parser, base)


def field_names() -> Dict[str, Tuple[str, ...]]:
    """Known keys per section, for documentation and error messages."""
    return {section: tuple(keys) for section, keys in _SCHEMA.items()}

