"""Benchmark report generation: aligned text table with CSV and JSON twins."""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from bioslim.bench import BenchRow, Mode
from bioslim.config import logger
from bioslim.utils import format_bytes, format_reduction, reduction_pct, write_json

REPORT_COLUMNS = [
    "task",
    "hardware",
    "mode",
    "latency_s",
    "speedup",
    "energy_kwh",
    "energy_reduction_pct",
    "accuracy",
    "accuracy_metric",
    "image_size",
    "model_bytes",
]
GROUP = ["task", "hardware"]


@dataclass
class BenchReport:
    rows: List[BenchRow]
    table: pd.DataFrame

    def text(self) -> str:
        df = self.table
        view = pd.DataFrame(
            {
                "task": df["task"],
                "hardware": df["hardware"],
                "mode": df["mode"],
                "latency(s)": [
                    f"{lat:.4f}" + (f" ({s:.2f}x)" if pd.notna(s) else "")
                    for lat, s in zip(df["latency_s"], df["speedup"])
                ],
                # printed in 1e-3 kWh like the published tables
                "energy(1e-3 kWh)": [
                    f"{e * 1e3:.6f} {format_reduction(r if pd.notna(r) else None)}".rstrip()
                    for e, r in zip(df["energy_kwh"], df["energy_reduction_pct"])
                ],
                "accuracy": [
                    "N/A" if pd.isna(a) else f"{a:.3f} {m or ''}".rstrip()
                    for a, m in zip(df["accuracy"], df["accuracy_metric"])
                ],
                "image size": df["image_size"],
                "model": [format_bytes(None if pd.isna(b) else int(b)) for b in df["model_bytes"]],
            }
        )
        return view.to_string(index=False) + "\n"

    def write(self, out_dir) -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "txt": out / "report.txt",
            "csv": out / "report.csv",
            "json": out / "report.json",
        }
        paths["txt"].write_text(self.text())
        self.table.to_csv(paths["csv"], index=False)
        self.table.to_json(paths["json"], orient="records", indent=2)
        write_json(out / "bench_rows.json", [row.model_dump(mode="json") for row in self.rows])
        logger.info("✅ report written", out_dir=str(out), rows=len(self.rows))
        return paths


def _image_size(shape: Sequence[int]) -> str:
    spatial = list(shape[2:]) if len(shape) > 2 else list(shape)
    return "x".join(str(n) for n in spatial)


def make_report(rows: Sequence[BenchRow]) -> BenchReport:
    rows = list(rows)
    if not rows:
        raise ValueError("a report needs at least one row")

    table = pd.DataFrame(
        {
            "task": [r.task for r in rows],
            "hardware": [r.hardware for r in rows],
            "mode": [Mode(r.mode).value for r in rows],
            "latency_s": [r.latency.mean_s for r in rows],
            "energy_kwh": [r.energy.kwh for r in rows],
            "accuracy": [np.nan if r.accuracy is None else r.accuracy for r in rows],
            "accuracy_metric": [r.accuracy_metric for r in rows],
            "image_size": [_image_size(r.image_shape) for r in rows],
            "model_bytes": pd.array([r.model_bytes for r in rows], dtype="Int64"),
        }
    )

    # the last fp32 row of each group is its baseline
    baselines = table[table["mode"] == Mode.FP32.value].groupby(GROUP).last()
    reductions, speedups = [], []
    for _, row in table.iterrows():
        key = (row["task"], row["hardware"])
        if key not in baselines.index or row["mode"] == Mode.FP32.value:
            reductions.append(np.nan)
            speedups.append(np.nan)
            continue
        base = baselines.loc[key]
        pct = reduction_pct(base["energy_kwh"], row["energy_kwh"])
        reductions.append(np.nan if pct is None else pct)
        speedups.append(base["latency_s"] / row["latency_s"] if row["latency_s"] > 0 else np.nan)

    table["energy_reduction_pct"] = reductions
    table["speedup"] = speedups
    return BenchReport(rows=rows, table=table[REPORT_COLUMNS])
