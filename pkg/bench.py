"""Reproduction sweep: ping RTT, flow throughput and filter placement, both modes."""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List

from exopipe.clock import S
from exopipe.config import Scenario, ScenarioConfig, load_config
from exopipe.controller import PipelineMode
from exopipe.harness import emit_csv, run_many

MODES = (PipelineMode.INTERNAL, PipelineMode.EXTERNAL)


def sweep_configs(base: ScenarioConfig, scenario: Scenario) -> List[ScenarioConfig]:
    cfg = replace(base, scenario=scenario)
    if scenario is Scenario.FILTER:
        return [replace(cfg, mode=PipelineMode.EXTERNAL)]
    return [replace(cfg, mode=mode) for mode in MODES]


def run(base: ScenarioConfig, out_dir: Path, parallel: bool) -> Dict[str, object]:
    summary: Dict[str, object] = {}
    records: List[Dict[str, object]] = []
    for scenario in Scenario:
        t0 = time.time()
        samples = run_many(sweep_configs(base, scenario), parallel=parallel)
        path = out_dir / f"{scenario.value}.csv"
        stats = emit_csv(samples, path, echo=False)
        elapsed = time.time() - t0
        summary[scenario.value] = stats
        records.append({"scenario": scenario.value, "csv": str(path), "samples": len(samples),
                        "elapsed_s": round(elapsed, 3)})

    rtt = {mode.value: summary["ping"].get(f"ping/{mode.value}/rtt", {}).get("mean") for mode in MODES}
    if None not in rtt.values():
        summary["rtt_gap_ms"] = round(rtt["external"] - rtt["internal"], 3)

    timestamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    log_path = out_dir / f"bench_{timestamp}.jsonl"
    with log_path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
        fh.write(json.dumps({"type": "summary", **summary}) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run every exopipe scenario in both pipeline modes")
    parser.add_argument("--config", type=Path, default=None, help="INI file overriding the defaults")
    parser.add_argument("--repetitions", type=int, default=None, help="pings per mode (default 500)")
    parser.add_argument("--duration", type=float, default=None, help="bulk flow duration in seconds")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", type=Path, default=Path("results"))
    parser.add_argument("--parallel", action="store_true", help="run the two modes on separate threads")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    base = load_config(args.config)
    overrides: Dict[str, object] = {}
    if args.repetitions is not None:
        overrides["repetitions"] = args.repetitions
    if args.duration is not None:
        overrides["duration"] = int(args.duration * S)
    if args.seed is not None:
        overrides["seed"] = args.seed
    base = replace(base, **overrides).validate()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    run(base, args.out_dir, args.parallel)


if __name__ == "__main__":
    main()
