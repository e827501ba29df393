"""Aggregate metric CSVs into one summary table."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Iterable

import pandas as pd


def load(paths: Iterable[Path]) -> pd.DataFrame:
    frames = [pd.read_csv(path, dtype={"meta": str}, keep_default_na=False) for path in paths]
    if not frames:
        return pd.DataFrame(columns=["scenario", "mode", "repetition", "metric", "unit", "value", "meta"])
    return pd.concat(frames, ignore_index=True)


def summarize(df: pd.DataFrame) -> pd.DataFrame:
    if df.empty:
        return pd.DataFrame()
    grouped = df.groupby(["scenario", "mode", "metric", "unit"])["value"]
    table = grouped.agg(
        n="count",
        mean="mean",
        min="min",
        max="max",
        p50=lambda v: v.quantile(0.50),
        p99=lambda v: v.quantile(0.99),
    )
    return table.round(3).reset_index()


def mode_gap(table: pd.DataFrame, metric: str = "rtt") -> pd.DataFrame:
    """External mean minus internal mean per scenario for ``metric``."""
    rows = table[table["metric"] == metric]
    if rows.empty:
        return pd.DataFrame()
    wide = rows.pivot_table(index="scenario", columns="mode", values="mean")
    if not {"internal", "external"} <= set(wide.columns):
        return pd.DataFrame()
    wide["gap"] = (wide["external"] - wide["internal"]).round(3)
    return wide.reset_index()


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Score exopipe metric CSVs")
    parser.add_argument("paths", nargs="+", type=Path)
    parser.add_argument("--gap", action="store_true", help="also print the external-internal RTT gap")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    table = summarize(load(args.paths))
    table.to_csv(sys.stdout, index=False)
    if args.gap:
        gap = mode_gap(table)
        if not gap.empty:
            sys.stdout.write("\n")
            gap.to_csv(sys.stdout, index=False)


if __name__ == "__main__":
    main()
