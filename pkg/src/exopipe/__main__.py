"""Command-line entry point: ``exopipe run|calibrate|topo|serve``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .clock import save_trace
from .config import ConfigError, Scenario, ScenarioConfig, load_config
from .controller import FilterPlacement, PipelineMode
from .harness import (
    CalibrationOutOfBand,
    IoError,
    MetricSample,
    build_testbed,
    calibrate,
    emit_csv,
    run_many,
    run_scenario1,
)
from .topology import InvalidParam, TopologySpec, build_topology

LOG = logging.getLogger("exopipe")

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3


def _modes(text: str) -> Tuple[PipelineMode, ...]:
    try:
        modes = tuple(PipelineMode(part.strip().lower()) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"modes are internal and/or external, got {text!r}") from None
    if not modes:
        raise argparse.ArgumentTypeError("at least one mode is required")
    return modes


def _band(text: str) -> Tuple[float, float]:
    try:
        low, high = (float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"band is LOW,HIGH in ms, got {text!r}") from None
    return low, high


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError(f"seed must be a u64, got {text}")
    return value


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="exopipe", description="Externalized packet-processing simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a scenario and write metrics as CSV")
    run.add_argument("--scenario", choices=[s.value for s in Scenario], default=None)
    run.add_argument("--mode", type=_modes, default=None, help="internal, external or internal,external")
    run.add_argument("--placement", choices=[p.value for p in FilterPlacement], default=None)
    run.add_argument("--config", type=Path, default=None, help="INI file, see docs/topology.md")
    run.add_argument("--seed", type=_u64, default=None)
    run.add_argument("--repetitions", type=int, default=None)
    run.add_argument("--out", type=Path, default=None, help="CSV path (default results/<scenario>.csv)")
    run.add_argument("--trace", type=Path, default=None, help="JSON-lines event trace (ping scenario only)")
    run.add_argument("--parallel", action="store_true", help="one simulation per thread")

    cal = sub.add_parser("calibrate", help="Check the external ping RTT against a target band")
    cal.add_argument("--band", type=_band, default=(24.0, 35.0), help="LOW,HIGH in ms")
    cal.add_argument("--config", type=Path, default=None)
    cal.add_argument("--repetitions", type=int, default=5)

    topo = sub.add_parser("topo", help="Build the configured topology and describe it")
    topo.add_argument("--k", type=int, default=None)
    topo.add_argument("--sites", type=int, default=None)
    topo.add_argument("--config", type=Path, default=None)
    topo.add_argument("--dump", action="store_true", help="print the edge list")

    serve = sub.add_parser("serve", help="Run the live-socket controller on loopback")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--sb-port", type=int, default=6653)
    serve.add_argument("--nb-port", type=int, default=8181)
    serve.add_argument("--event-port", type=int, default=9092)
    serve.add_argument("--placement", choices=[p.value for p in FilterPlacement], default="client")
    serve.add_argument("--config", type=Path, default=None)
    return parser.parse_args(argv)


def _run_configs(args: argparse.Namespace) -> List[ScenarioConfig]:
    cfg = load_config(args.config)
    overrides = {}
    if args.scenario is not None:
        overrides["scenario"] = Scenario(args.scenario)
    if args.placement is not None:
        overrides["placement"] = FilterPlacement(args.placement)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.repetitions is not None:
        overrides["repetitions"] = args.repetitions
    cfg = replace(cfg, **overrides).validate()
    modes = args.mode or (cfg.mode,)
    if cfg.scenario is Scenario.FILTER:
        modes = (PipelineMode.EXTERNAL,)
    return [replace(cfg, mode=mode) for mode in modes]


def cmd_run(args: argparse.Namespace) -> int:
    configs = _run_configs(args)
    scenario = configs[0].scenario
    if args.trace is not None and scenario is not Scenario.PING:
        raise ConfigError("--trace is only supported for the ping scenario")
    out = args.out or Path("results") / f"{scenario.value}.csv"

    if args.trace is None:
        samples = run_many(configs, parallel=args.parallel)
    else:
        samples: List[MetricSample] = []
        for cfg in configs:
            tb = build_testbed(cfg, tracing=True)
            samples.extend(run_scenario1(cfg, testbed=tb))
            path = args.trace
            if len(configs) > 1:
                path = path.with_name(f"{path.stem}-{cfg.mode.value}{path.suffix}")
            try:
                save_trace(path, tb.sim.trace)
            except OSError as exc:
                raise IoError(f"cannot write {path}: {exc}") from exc
    emit_csv(samples, out)
    LOG.info("wrote %d samples to %s", len(samples), out)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = replace(load_config(args.config), scenario=Scenario.PING)
    latency = calibrate(args.band, cfg, repetitions=args.repetitions)
    print(json.dumps({"band_ms": list(args.band), "latency_ns": vars(latency)}, indent=2))
    return EXIT_OK


def cmd_topo(args: argparse.Namespace) -> int:
    spec: TopologySpec = load_config(args.config).topology
    if args.k is not None:
        spec = replace(spec, k=args.k)
    if args.sites is not None:
        spec = replace(spec, sites=args.sites)
    try:
        graph = build_topology(spec)
    except InvalidParam as exc:
        raise ConfigError(str(exc)) from exc
    if args.dump:
        for line in graph.edge_list():
            print(line)
    else:
        print(json.dumps({
            "k": spec.k,
            "sites": spec.sites,
            "switches": len(graph.switches),
            "hosts": len(graph.hosts),
            "links": len(graph.links),
            "connected": graph.is_connected(),
        }, indent=2))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .live import LivePorts, run

    settings = replace(load_config(args.config).broker, broker_delay=0)
    run(LivePorts(args.host, args.sb_port, args.nb_port, args.event_port),
        FilterPlacement(args.placement), settings)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "calibrate": cmd_calibrate,
    "topo": cmd_topo,
    "serve": cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationOutOfBand as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (IoError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
