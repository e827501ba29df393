"""Scenario harness: builds testbeds, runs the experiments and writes metrics.

Three experiments are provided. The ping scenario measures round-trip time
when every switch on the path punts and the packet processor only returns
the packet. The throughput scenario runs long-lived flows under reactive
forwarding with expiring rules. The filter comparison replays one mixed
trace under the three filter placements.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .broker import Broker, FilterPredicate
from .clock import MS, S, Simulator, TraceEvent
from .config import ConfigError, HarnessError, Scenario, ScenarioConfig
from .controller import Controller, FilterPlacement, NbLatencyModel, PipelineMode
from .envelope import EventType, PacketEventEnvelope
from .extapps import (
    AppConfig,
    DiscoveredTopology,
    ExternalApp,
    InternalReactiveForwarding,
    InternalTopologyDiscovery,
    LldpSweeper,
    PathReturnApp,
    PathReturnProcessor,
    ReactiveForwardingApp,
    TopologyDiscoveryApp,
)
from .fabric import Network
from .netproto import ETH_TYPE_LLDP
from .topology import HostInfo, InvalidParam, TopologyGraph, build_topology
from .traffic import mixed_stream, replay, trace_end

__all__ = [
    "HarnessError",
    "ConfigError",
    "CalibrationOutOfBand",
    "IoError",
    "Scenario",
    "ScenarioConfig",
    "MetricSample",
    "Testbed",
    "FilterRun",
    "PROCESSOR_BUILDERS",
    "CSV_HEADER",
    "build_testbed",
    "attach_processor",
    "run_scenario1",
    "run_scenario2",
    "run_filter_placement",
    "run_filter_compare",
    "run_scenario",
    "run_many",
    "rtt_from_trace",
    "summarize",
    "emit_csv",
    "calibrate",
]

LOG = logging.getLogger(__name__)

CSV_HEADER = ("scenario", "mode", "repetition", "metric", "unit", "value", "meta")


class CalibrationOutOfBand(HarnessError):
    pass


class IoError(HarnessError):
    pass


@dataclass(frozen=True)
class MetricSample:
    scenario: str
    mode: str
    repetition: int
    metric: str
    unit: str
    value: float
    meta: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not math.isfinite(self.value) or self.value < 0:
            raise ValueError(f"metric value must be finite and >= 0, got {self.value}")

    def meta_str(self) -> str:
        return "".join(f"{k}={v};" for k, v in sorted(self.meta))

    def row(self) -> Dict[str, str]:
        return {
            "scenario": self.scenario,
            "mode": self.mode,
            "repetition": str(self.repetition),
            "metric": self.metric,
            "unit": self.unit,
            "value": f"{self.value:.3f}",
            "meta": self.meta_str(),
        }


def _meta(**items: object) -> Tuple[Tuple[str, str], ...]:
    return tuple(sorted((k, str(v)) for k, v in items.items()))


# ----- testbed ----------------------------------------------------------------------

@dataclass
class Testbed:
    cfg: ScenarioConfig
    sim: Simulator
    topology: TopologyGraph
    network: Network
    broker: Broker
    controller: Controller
    ground_truth: DiscoveredTopology
    apps: List[ExternalApp] = field(default_factory=list)
    processors: List[object] = field(default_factory=list)

    def host(self, index: int) -> HostInfo:
        try:
            return self.topology.host(index)
        except InvalidParam as exc:
            raise ConfigError(str(exc)) from exc

    def run(self, until: Optional[int] = None) -> int:
        return self.sim.run(until)


def build_testbed(cfg: ScenarioConfig, *, mode: Optional[PipelineMode] = None,
                  placement: Optional[FilterPlacement] = None, tracing: bool = True) -> Testbed:
    mode = PipelineMode(mode or cfg.mode)
    try:
        topology = build_topology(cfg.topology)
    except InvalidParam as exc:
        raise ConfigError(f"[topology] {exc}") from exc
    sim = Simulator(tracing=tracing)
    network = Network(sim, topology)
    broker = Broker(broker_delay=cfg.broker.broker_delay,
                    persist_dir=Path(cfg.broker.persist_dir) if cfg.broker.persist_dir else None)
    controller = Controller(
        sim, network, broker,
        mode=mode,
        placement=(placement or cfg.placement) if mode is PipelineMode.EXTERNAL else None,
        latency=cfg.latency,
        settings=cfg.broker,
    )
    return Testbed(cfg, sim, topology, network, broker, controller, DiscoveredTopology.from_graph(topology))


def _reactive(tb: Testbed, apps: AppConfig, **kwargs):
    if tb.controller.mode is PipelineMode.INTERNAL:
        return InternalReactiveForwarding(tb.ground_truth, apps)
    return ReactiveForwardingApp(tb.controller, tb.broker, tb.ground_truth, cfg=apps, **kwargs)


def _path_return(tb: Testbed, apps: AppConfig, **kwargs):
    if tb.controller.mode is PipelineMode.INTERNAL:
        return PathReturnProcessor(tb.ground_truth)
    return PathReturnApp(tb.controller, tb.broker, tb.ground_truth, cfg=apps, **kwargs)


def _discovery(tb: Testbed, apps: AppConfig, **kwargs):
    if tb.controller.mode is PipelineMode.INTERNAL:
        return InternalTopologyDiscovery()
    return TopologyDiscoveryApp(tb.controller, tb.broker, cfg=apps, **kwargs)


PROCESSOR_BUILDERS: Dict[str, Callable[..., object]] = {
    "reactive_forwarding": _reactive,
    "path_return": _path_return,
    "topology_discovery": _discovery,
}


def attach_processor(tb: Testbed, name: str, apps: Optional[AppConfig] = None, **kwargs) -> object:
    """Build ``name`` for the testbed's mode: an internal processor or a started external app."""
    if name not in PROCESSOR_BUILDERS:
        raise ConfigError(f"unknown packet processor {name!r}; choose from {sorted(PROCESSOR_BUILDERS)}")
    built = PROCESSOR_BUILDERS[name](tb, apps or tb.cfg.apps, **kwargs)
    if isinstance(built, ExternalApp):
        built.start()
        tb.apps.append(built)
    else:
        tb.controller.register_internal_processor(built)
        tb.processors.append(built)
    return built


def _require(cfg: ScenarioConfig, scenario: Scenario) -> ScenarioConfig:
    if Scenario(cfg.scenario) is not scenario:
        raise ConfigError(f"config is for scenario {cfg.scenario.value}, not {scenario.value}")
    return cfg.validate()


# ----- scenario 1: ping response time ---------------------------------------------------

def run_scenario1(cfg: ScenarioConfig, testbed: Optional[Testbed] = None) -> List[MetricSample]:
    """One ping per repetition with empty flow tables and a no-install processor."""
    cfg = _require(cfg, Scenario.PING)
    tb = testbed or build_testbed(cfg)
    attach_processor(tb, "path_return")
    src, dst = tb.host(cfg.host_pair[0]), tb.host(cfg.host_pair[1])
    mode = tb.controller.mode.value
    LOG.info("scenario 1 (%s): %d pings %s -> %s", mode, cfg.repetitions, src.name, dst.name)

    samples: List[MetricSample] = []
    lost = 0
    for rep in range(cfg.repetitions):
        tb.network.clear_flow_tables()
        punts_before = tb.network.counters.punted
        (rtt,) = tb.network.host_ping(src.name, dst.ip, 1, interval=cfg.ping_interval,
                                         timeout=cfg.ping_timeout, first_seq=rep % 0xFFFF + 1)
        if rtt is None:
            lost += 1
            continue
        samples.append(MetricSample(
            "ping", mode, rep, "rtt", "ms", rtt / MS,
            _meta(src=src.name, dst=dst.name, punts=tb.network.counters.punted - punts_before),
        ))
    if lost:
        samples.append(MetricSample("ping", mode, cfg.repetitions, "ping_lost", "count", float(lost),
                                    _meta(src=src.name, dst=dst.name)))
    return samples


def rtt_from_trace(trace: Iterable[TraceEvent], host: Optional[str] = None) -> List[int]:
    """Recompute RTTs from ``ping.request``/``ping.reply`` event times."""
    sent: Dict[Tuple[str, int], int] = {}
    rtts: List[int] = []
    for event in trace:
        if host is not None and event.data.get("host") != host:
            continue
        key = (event.data.get("host"), event.data.get("seq"))
        if event.kind == "ping.request":
            sent[key] = event.time
        elif event.kind == "ping.reply" and key in sent:
            rtts.append(event.time - sent.pop(key))
    return rtts


# ----- scenario 2: throughput under expiring rules ----------------------------------------

def run_scenario2(cfg: ScenarioConfig) -> List[MetricSample]:
    """Bulk flows per connection count, each on a fresh testbed with reactive forwarding."""
    cfg = _require(cfg, Scenario.THROUGHPUT)
    samples: List[MetricSample] = []
    for rep, n_conns in enumerate(cfg.n_conns):
        tb = build_testbed(cfg)
        attach_processor(tb, "reactive_forwarding")
        removed: List[object] = []
        tb.controller.on_flow_removed(removed.append)
        src, dst = tb.host(cfg.host_pair[0]), tb.host(cfg.host_pair[1])
        result = tb.network.host_bulk_flows(src.name, dst.name, n_conns, cfg.duration)
        mode = tb.controller.mode.value
        meta = _meta(
            n_conns=n_conns,
            expiries=result.expiries,
            stall_ms=f"{result.stall_time / MS:.3f}",
            hard_timeout_s=f"{cfg.apps.hard_timeout / S:g}",
            install_channel=cfg.apps.install_channel,
        )
        samples.append(MetricSample("throughput", mode, rep, "throughput", "bits/sec", result.throughput, meta))
        samples.append(MetricSample("throughput", mode, rep, "expiries", "count", float(result.expiries), meta))
        LOG.info("scenario 2 (%s) n=%d: %.0f bit/s, %d expiries, flow_removed=%d",
                 mode, n_conns, result.throughput, result.expiries, len(removed))
    return samples


# ----- filter placement comparison -----------------------------------------------------------

@dataclass
class FilterRun:
    placement: FilterPlacement
    appended: int
    delivered: int
    processed: List[PacketEventEnvelope]
    lldp_packet_ins: int
    topic_sizes: Dict[str, int]


def run_filter_placement(cfg: ScenarioConfig, placement: FilterPlacement,
                         predicate: Optional[FilterPredicate] = None) -> FilterRun:
    """Replay the mixed trace with one discovery app filtering on ``predicate`` (LLDP by default)."""
    predicate = predicate or FilterPredicate.of(EventType.LLDP)
    tb = build_testbed(cfg, mode=PipelineMode.EXTERNAL, placement=placement)
    app = attach_processor(tb, "topology_discovery", predicate=predicate)
    sweeper = LldpSweeper(tb.controller, period=0)
    hosts = [h.name for h in tb.topology.ordered_hosts()]
    events = list(mixed_stream(hosts, cfg.filter_pings, cfg.seed))
    replay(tb.network, events, on_sweep=sweeper.sweep)
    tb.run(until=trace_end(events) + 1 * S)
    lldp_punts = sum(1 for ev in tb.sim.trace_of("switch.punt") if ev.data["ethertype"] == ETH_TYPE_LLDP)
    return FilterRun(
        placement=FilterPlacement(placement),
        appended=sum(len(t) for t in tb.broker.topics.values()),
        delivered=app.delivered,
        processed=list(app.processed),
        lldp_packet_ins=lldp_punts,
        topic_sizes={name: len(t) for name, t in sorted(tb.broker.topics.items())},
    )


def run_filter_compare(cfg: ScenarioConfig) -> List[MetricSample]:
    cfg = _require(cfg, Scenario.FILTER)
    samples: List[MetricSample] = []
    for rep, placement in enumerate(FilterPlacement):
        run = run_filter_placement(cfg, placement)
        meta = _meta(placement=placement.value, predicate="lldp", lldp_packet_ins=run.lldp_packet_ins)
        for metric, value in (("records_appended", run.appended),
                              ("records_delivered", run.delivered),
                              ("records_processed", len(run.processed))):
            samples.append(MetricSample("filter", "external", rep, metric, "count", float(value), meta))
        LOG.info("filter %s: appended=%d delivered=%d processed=%d", placement.value,
                 run.appended, run.delivered, len(run.processed))
    return samples


# ----- dispatch ------------------------------------------------------------------------------

_RUNNERS: Dict[Scenario, Callable[[ScenarioConfig], List[MetricSample]]] = {
    Scenario.PING: run_scenario1,
    Scenario.THROUGHPUT: run_scenario2,
    Scenario.FILTER: run_filter_compare,
}


def run_scenario(cfg: ScenarioConfig) -> List[MetricSample]:
    return _RUNNERS[Scenario(cfg.scenario)](cfg)


def run_many(configs: Sequence[ScenarioConfig], *, parallel: bool = False) -> List[MetricSample]:
    """Run independent configurations, optionally one simulation per thread; output keeps input order."""
    if not parallel or len(configs) < 2:
        return [s for cfg in configs for s in run_scenario(cfg)]
    with ThreadPoolExecutor(max_workers=len(configs)) as pool:
        results = list(pool.map(run_scenario, configs))
    return [s for batch in results for s in batch]


# ----- output ----------------------------------------------------------------------------------

def summarize(samples: Iterable[MetricSample]) -> Dict[str, Dict[str, float]]:
    """mean/min/max/p50/p99 per (scenario, mode, metric)."""
    groups: Dict[str, List[float]] = {}
    for s in samples:
        groups.setdefault(f"{s.scenario}/{s.mode}/{s.metric}", []).append(s.value)
    summary: Dict[str, Dict[str, float]] = {}
    for key, values in groups.items():
        arr = np.asarray(values, dtype=float)
        summary[key] = {
            "n": int(arr.size),
            "mean": round(float(arr.mean()), 3),
            "min": round(float(arr.min()), 3),
            "max": round(float(arr.max()), 3),
            "p50": round(float(np.percentile(arr, 50)), 3),
            "p99": round(float(np.percentile(arr, 99)), 3),
        }
    return summary


def emit_csv(samples: Sequence[MetricSample], path: Path, *, echo: bool = True) -> Dict[str, Dict[str, float]]:
    """Write samples in insertion order and print the summary as JSON."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(CSV_HEADER), lineterminator="\n")
            writer.writeheader()
            for sample in samples:
                writer.writerow(sample.row())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    summary = summarize(samples)
    if echo:
        print(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# ----- calibration -------------------------------------------------------------------------------

def calibrate(target_band: Tuple[float, float], cfg: Optional[ScenarioConfig] = None,
              repetitions: int = 5) -> NbLatencyModel:
    """Check that External-mode ping RTT under ``cfg.latency`` lands in the band (ms)."""
    low, high = target_band
    if not low < high:
        raise ConfigError(f"band low {low} must be below high {high}")
    cfg = replace(cfg or ScenarioConfig(), scenario=Scenario.PING, mode=PipelineMode.EXTERNAL,
                  repetitions=repetitions)
    rtts = [s.value for s in run_scenario1(cfg) if s.metric == "rtt"]
    if not rtts:
        raise CalibrationOutOfBand("every calibration ping was lost")
    mean = float(np.mean(rtts))
    if not low <= mean <= high:
        raise CalibrationOutOfBand(f"external mean RTT {mean:.3f} ms outside [{low}, {high}] ms")
    LOG.info("calibration ok: external mean RTT %.3f ms within [%s, %s] ms", mean, low, high)
    return cfg.latency
