"""End-to-end scenarios, metric output and calibration."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import replace
from typing import List

import pytest

from exopipe.clock import MS, S
from exopipe.config import ConfigError, Scenario, ScenarioConfig
from exopipe.controller import FilterPlacement, PipelineMode
from exopipe.harness import (
    CSV_HEADER,
    CalibrationOutOfBand,
    MetricSample,
    attach_processor,
    build_testbed,
    calibrate,
    emit_csv,
    rtt_from_trace,
    run_filter_placement,
    run_many,
    run_scenario,
    run_scenario1,
    run_scenario2,
)
from exopipe.topology import TopologySpec


def _ping(mode: PipelineMode, repetitions: int = 3) -> ScenarioConfig:
    return replace(ScenarioConfig(), scenario=Scenario.PING, mode=mode, repetitions=repetitions)


@pytest.mark.parametrize("mode,rtt_ms", [(PipelineMode.INTERNAL, 6.4), (PipelineMode.EXTERNAL, 24.4)])
def test_ping_rtt_per_mode(mode: PipelineMode, rtt_ms: float) -> None:
    samples = run_scenario1(_ping(mode))
    assert [s.metric for s in samples] == ["rtt"] * 3
    assert all(s.value == pytest.approx(rtt_ms) for s in samples)
    # request and reply are punted by all three switches
    assert dict(samples[0].meta)["punts"] == "6"


def test_ping_leaves_broker_empty_in_internal_mode() -> None:
    cfg = _ping(PipelineMode.INTERNAL, 1)
    tb = build_testbed(cfg)
    run_scenario1(cfg, testbed=tb)
    assert sum(len(t) for t in tb.broker.topics.values()) == 0


def test_external_ping_publishes_every_punt() -> None:
    cfg = _ping(PipelineMode.EXTERNAL, 2)
    tb = build_testbed(cfg)
    run_scenario1(cfg, testbed=tb)
    assert len(tb.broker.topic("packets")) == tb.controller.counters.packet_ins == 12


def test_trace_rtts_match_samples() -> None:
    cfg = _ping(PipelineMode.EXTERNAL, 2)
    tb = build_testbed(cfg)
    samples = run_scenario1(cfg, testbed=tb)
    assert [r / MS for r in rtt_from_trace(tb.sim.trace)] == [s.value for s in samples]


def test_latency_accounting_from_the_trace() -> None:
    cfg = _ping(PipelineMode.EXTERNAL, 1)
    tb = build_testbed(cfg)
    run_scenario1(cfg, testbed=tb)
    punts = [ev.time for ev in tb.sim.trace_of("switch.punt")]
    outs = [ev.time for ev in tb.sim.trace_of("switch.packet_out")]
    assert [out - punt for punt, out in zip(punts, outs)] == [4 * MS] * 6


def test_late_replies_count_as_lost() -> None:
    cfg = replace(_ping(PipelineMode.INTERNAL, 2), ping_timeout=5 * MS)
    samples = run_scenario1(cfg)
    assert [s.metric for s in samples] == ["ping_lost"]
    assert samples[0].value == 2


def test_runs_are_deterministic() -> None:
    cfg = _ping(PipelineMode.EXTERNAL, 2)
    assert run_scenario(cfg) == run_scenario(cfg)


@pytest.mark.parametrize("mode", list(PipelineMode))
def test_throughput_with_expiring_rules(mode: PipelineMode) -> None:
    cfg = replace(ScenarioConfig(), scenario=Scenario.THROUGHPUT, mode=mode, n_conns=(1, 10))
    samples = run_scenario2(cfg)
    expiries = [s for s in samples if s.metric == "expiries"]
    throughput = [s for s in samples if s.metric == "throughput"]
    assert [s.value for s in expiries] == [14, 14]
    assert all(0 < s.value < 100_000_000 for s in throughput)
    assert throughput[0].value == pytest.approx(throughput[1].value)
    assert dict(throughput[1].meta)["n_conns"] == "10"


def test_external_throughput_is_lower() -> None:
    base = replace(ScenarioConfig(), scenario=Scenario.THROUGHPUT, n_conns=(1,))
    internal = run_scenario2(replace(base, mode=PipelineMode.INTERNAL))[0].value
    external = run_scenario2(replace(base, mode=PipelineMode.EXTERNAL))[0].value
    assert external < internal


def _filter_cfg() -> ScenarioConfig:
    return replace(ScenarioConfig(), scenario=Scenario.FILTER, filter_pings=10,
                   topology=TopologySpec(k=2, sites=2))


def test_filter_placements_process_the_same_events() -> None:
    cfg = _filter_cfg()
    runs = {p: run_filter_placement(cfg, p) for p in FilterPlacement}
    processed = {p: Counter(run.processed) for p, run in runs.items()}
    assert processed[FilterPlacement.CLIENT_SIDE] == processed[FilterPlacement.SERVER_SIDE]
    assert processed[FilterPlacement.SERVER_SIDE] == processed[FilterPlacement.CONTROLLER_SIDE]

    client = runs[FilterPlacement.CLIENT_SIDE]
    server = runs[FilterPlacement.SERVER_SIDE]
    controller = runs[FilterPlacement.CONTROLLER_SIDE]
    assert client.appended > server.appended == controller.appended == len(server.processed)
    assert len(client.processed) == client.lldp_packet_ins
    assert controller.topic_sizes["packets.arp"] == 0


def test_filter_compare_samples() -> None:
    samples = run_scenario(_filter_cfg())
    assert {dict(s.meta)["placement"] for s in samples} == {"client", "server", "controller"}
    assert all(s.mode == "external" for s in samples)


def test_parallel_runs_keep_input_order() -> None:
    configs = [_ping(PipelineMode.INTERNAL, 1), _ping(PipelineMode.EXTERNAL, 1)]
    assert run_many(configs, parallel=True) == run_many(configs)


def test_scenario_mismatch_rejected() -> None:
    with pytest.raises(ConfigError):
        run_scenario2(_ping(PipelineMode.INTERNAL))


def test_unknown_processor_rejected() -> None:
    tb = build_testbed(_ping(PipelineMode.INTERNAL))
    with pytest.raises(ConfigError):
        attach_processor(tb, "firewall")


def test_bad_host_pair_is_a_config_error() -> None:
    with pytest.raises(ConfigError):
        run_scenario1(replace(_ping(PipelineMode.INTERNAL), host_pair=(1, 99)))


def test_metric_values_must_be_finite() -> None:
    with pytest.raises(ValueError):
        MetricSample("ping", "internal", 0, "rtt", "ms", -1.0)
    with pytest.raises(ValueError):
        MetricSample("ping", "internal", 0, "rtt", "ms", float("nan"))


def test_emit_csv(tmp_path, capsys) -> None:
    samples = [
        MetricSample("ping", "internal", 0, "rtt", "ms", 6.4, (("dst", "h4"), ("src", "h1"))),
        MetricSample("ping", "internal", 1, "rtt", "ms", 6.6),
    ]
    path = tmp_path / "out" / "ping.csv"
    summary = emit_csv(samples, path)
    rows = list(csv.DictReader(path.open()))
    assert tuple(rows[0]) == CSV_HEADER
    assert rows[0]["value"] == "6.400"
    assert rows[0]["meta"] == "dst=h4;src=h1;"
    assert summary["ping/internal/rtt"]["n"] == 2
    assert summary["ping/internal/rtt"]["mean"] == pytest.approx(6.5)
    assert '"ping/internal/rtt"' in capsys.readouterr().out


def test_calibration_band() -> None:
    latency = calibrate((24, 35), repetitions=2)
    assert latency.rest_install_delay == 10 * MS
    with pytest.raises(CalibrationOutOfBand):
        calibrate((1, 2), repetitions=1)
    with pytest.raises(ConfigError):
        calibrate((5, 5))


def test_expiry_is_exact_in_a_testbed() -> None:
    cfg = replace(ScenarioConfig(), mode=PipelineMode.INTERNAL)
    tb = build_testbed(cfg)
    attach_processor(tb, "reactive_forwarding")
    tb.network.host_ping("h1", tb.topology.host(4).ip, 1)
    installed = tb.controller.install_log[0][1].install_time
    tb.run(until=installed + 10 * S - 1)
    assert len(tb.network.installed_rules()) == 6
    tb.run(until=installed + 10 * S)
    assert tb.network.installed_rules() == []
    assert {ev.data["reason"] for ev in tb.sim.trace_of("flow.removed")} == {"HARD_TIMEOUT"}


def test_five_hundred_repetitions_gap_matches_the_latency_model() -> None:
    rtts, punts = {}, {}
    for mode in PipelineMode:
        cfg = _ping(mode, 500)
        tb = build_testbed(cfg)
        samples = run_scenario1(cfg, testbed=tb)
        assert len(samples) == 500
        rtts[mode] = rtt_from_trace(tb.sim.trace)
        punts[mode] = len(tb.sim.trace_of("switch.punt"))

    cfg = ScenarioConfig()
    per_punt = (cfg.broker.broker_delay + cfg.apps.processing_delay
                + cfg.latency.rpc_packet_out_delay - cfg.latency.internal_processing_delay)
    assert punts[PipelineMode.INTERNAL] == punts[PipelineMode.EXTERNAL] == 6 * 500
    internal, external = rtts[PipelineMode.INTERNAL], rtts[PipelineMode.EXTERNAL]
    assert len(internal) == len(external) == 500
    assert {e - i for i, e in zip(internal, external)} == {6 * per_punt}
    assert 24 <= sum(external) / len(external) / MS <= 35


def _throughputs(mode: PipelineMode, cfg: ScenarioConfig) -> List[float]:
    cfg = replace(cfg, scenario=Scenario.THROUGHPUT, mode=mode, n_conns=(1, 2, 4, 8, 16))
    return [s.value for s in run_scenario2(cfg) if s.metric == "throughput"]


def test_internal_throughput_is_never_below_external() -> None:
    internal = _throughputs(PipelineMode.INTERNAL, ScenarioConfig())
    external = _throughputs(PipelineMode.EXTERNAL, ScenarioConfig())
    assert len(internal) == len(external) == 5
    assert all(i >= e for i, e in zip(internal, external))


def test_throughput_gap_closes_with_internal_level_delays() -> None:
    base = ScenarioConfig()
    latency = replace(base.latency, rest_install_delay=0,
                      rpc_packet_out_delay=base.latency.internal_processing_delay)
    cfg = replace(base, latency=latency, broker=replace(base.broker, broker_delay=0))
    internal = _throughputs(PipelineMode.INTERNAL, cfg)
    external = _throughputs(PipelineMode.EXTERNAL, cfg)
    assert external == pytest.approx(internal)


@pytest.mark.parametrize("cfg", [
    _ping(PipelineMode.EXTERNAL, 3),
    replace(ScenarioConfig(), scenario=Scenario.THROUGHPUT, mode=PipelineMode.EXTERNAL, n_conns=(1, 4)),
    _filter_cfg(),
], ids=["ping", "throughput", "filter"])
def test_identical_runs_write_identical_csv(tmp_path, cfg: ScenarioConfig) -> None:
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_csv(run_scenario(cfg), first, echo=False)
    emit_csv(run_scenario(cfg), second, echo=False)
    assert first.read_bytes() == second.read_bytes()
