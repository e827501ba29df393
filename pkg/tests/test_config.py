"""INI loading, unit parsing and validation."""

from __future__ import annotations

import pytest

from exopipe.clock import MS, S, US
from exopipe.config import (
    ConfigError,
    Scenario,
    ScenarioConfig,
    field_names,
    load_config,
    parse_capacity,
    parse_duration,
)
from exopipe.controller import FilterPlacement, PipelineMode


@pytest.mark.parametrize("text,ns", [
    ("10ms", 10 * MS),
    ("50us", 50 * US),
    ("2", 2 * S),
    ("1.5s", 1500 * MS),
    ("7ns", 7),
    (" 0 ms ", 0),
])
def test_parse_duration(text: str, ns: int) -> None:
    assert parse_duration(text) == ns


@pytest.mark.parametrize("text", ["", "ten ms", "1.5ns", "-1s", "3 min"])
def test_bad_durations(text: str) -> None:
    with pytest.raises(ConfigError):
        parse_duration(text)


def test_parse_capacity() -> None:
    assert parse_capacity("100Mbit") == 100_000_000
    assert parse_capacity("1gbit") == 10**9
    assert parse_capacity("2.5kbit") == 2500
    with pytest.raises(ConfigError):
        parse_capacity("0")


def test_defaults_without_a_file() -> None:
    cfg = load_config()
    assert cfg == ScenarioConfig()
    assert cfg.latency.rest_install_delay == 10 * MS
    assert cfg.broker.broker_delay == 2 * MS
    assert cfg.apps.hard_timeout == 10 * S
    assert (cfg.topology.k, cfg.topology.sites) == (4, 1)


def test_file_overrides(tmp_path) -> None:
    path = tmp_path / "run.ini"
    path.write_text(
        "[scenario]\nscenario = throughput\nmode = External\nplacement = server\nn_conns = 1, 10\n"
        "[topology]\nk = 2\nsites = 5\nintersite_latency = 5ms\n"
        "[latency]\nrest_install_delay = 20ms\n"
        "[apps]\nbidirectional = no\ninstall_channel = rpc\n"
    )
    cfg = load_config(path)
    assert cfg.scenario is Scenario.THROUGHPUT
    assert cfg.mode is PipelineMode.EXTERNAL
    assert cfg.placement is FilterPlacement.SERVER_SIDE
    assert cfg.n_conns == (1, 10)
    assert (cfg.topology.k, cfg.topology.sites, cfg.topology.intersite_latency) == (2, 5, 5 * MS)
    assert cfg.latency.rest_install_delay == 20 * MS
    assert cfg.latency.rpc_packet_out_delay == 1 * MS
    assert not cfg.apps.bidirectional
    assert cfg.apps.install_channel == "rpc"


@pytest.mark.parametrize("body", [
    "[nonsense]\nx = 1\n",
    "[topology]\nradix = 4\n",
    "[scenario]\nmode = sideways\n",
    "[scenario]\nrepetitions = 0\n",
    "[scenario]\nhost_pair = 3, 3\n",
    "[apps]\nmatch_granularity = l7\n",
    "[apps]\npriority = 70000\n",
    "[latency]\nrest_install_delay = soon\n",
    "no section header\n",
])
def test_invalid_files(tmp_path, body: str) -> None:
    path = tmp_path / "bad.ini"
    path.write_text(body)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_file(tmp_path) -> None:
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_field_names_cover_sections() -> None:
    names = field_names()
    assert set(names) == {"topology", "latency", "broker", "apps", "scenario"}
    assert "rest_install_delay" in names["latency"]
