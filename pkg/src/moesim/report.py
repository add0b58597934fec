"""CSV and plot-data writers for run, sweep and ablation results.

Run CSV columns (fixed order, see ``RUN_COLUMNS``): one row per
(chunk, layer) followed by one aggregate row whose chunk and layer are
``all``. Aggregate ``tokens`` is the prompt length, ``ept`` is total energy
over that, every other numeric column is the column sum.
"""
from __future__ import annotations

import csv
import json

from .bench import RunReport, SweepResult
from .devicesim import STAGES

RUN_COLUMNS = ["mode", "chunk", "layer", "tokens", "latency", "energy_compute", "energy_comm", "ept",
               "cpu_cycles", "launches", "padded_rows", "dropped_tokens", "packed_tokens"] + \
              [f"t_{s}" for s in STAGES]
SWEEP_COLUMNS = ["axis", "value", "status", "latency_per_token", "ept", "launches", "padded_rows",
                 "dropped_tokens", "cpu_cycles", "error"]
ABLATION_COLUMNS = ["mode", "ttft", "latency_per_token", "ept", "cpu_cycles", "launches", "padded_rows",
                    "dropped_tokens"]


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".10g")
    return v


def aggregate_row(report: RunReport) -> dict:
    agg = report.aggregate
    row = {
        "mode": report.config.mode, "chunk": "all", "layer": "all", "tokens": agg.tokens,
        "latency": agg.ttft, "energy_compute": agg.energy_compute, "energy_comm": agg.energy_comm,
        "ept": agg.ept, "cpu_cycles": agg.cpu_cycles, "launches": agg.launches,
        "padded_rows": agg.padded_rows, "dropped_tokens": agg.dropped_tokens,
        "packed_tokens": agg.packed_tokens,
    }
    for s in STAGES:
        row[f"t_{s}"] = agg.breakdown.get(s, 0.0)
    return row


def _write(path, columns, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: _fmt(row.get(k, "")) for k in columns})
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def report_csv(report: RunReport, path) -> None:
    _write(path, RUN_COLUMNS, report.rows + [aggregate_row(report)])


def sweep_csv(result: SweepResult, path) -> None:
    _write(path, SWEEP_COLUMNS, result.summary())


def ablation_rows(reports: dict) -> list[dict]:
    rows = []
    for mode, rep in reports.items():
        a = rep.aggregate
        rows.append({"mode": mode, "ttft": a.ttft, "latency_per_token": a.latency_per_token, "ept": a.ept,
                     "cpu_cycles": a.cpu_cycles, "launches": a.launches, "padded_rows": a.padded_rows,
                     "dropped_tokens": a.dropped_tokens})
    return rows


def ablation_csv(reports: dict, path) -> None:
    _write(path, ABLATION_COLUMNS, ablation_rows(reports))


def report_document(report: RunReport) -> dict:
    """Everything in a run report except the raw activations, JSON-ready."""
    return {
        "config": report.config.to_dict(),
        "aggregate": aggregate_row(report),
        "chunks": [{"chunk": i, "tokens": m.tokens, "latency": m.ttft, "ept": m.ept,
                    "cpu_cycles": m.cpu_cycles} for i, m in enumerate(report.chunk_metrics)],
        "capacity_plan": report.capacity_summary,
        "placement_plan": report.placement_summary,
        "calibration": None if report.overlap is None else
        {"K": report.overlap.k, "per_layer": report.overlap.per_layer,
         "median": report.overlap.median, "mean": report.overlap.mean},
    }


def report_plotdata(report: RunReport, path, sweep: SweepResult | None = None) -> dict:
    agg = report.aggregate
    doc = {
        "mode": report.config.mode,
        "stage_breakdown": {s: agg.breakdown.get(s, 0.0) for s in STAGES},
        "device_busy": dict(sorted(agg.busy.items())),
        "chunk_latency": [m.ttft for m in report.chunk_metrics],
        "layer_padded_rows": _per_layer(report, "padded_rows"),
        "layer_dropped_tokens": _per_layer(report, "dropped_tokens"),
    }
    if sweep is not None:
        doc["sweep"] = sweep_series(sweep)
    _dump(doc, path)
    return doc


def sweep_series(result: SweepResult) -> dict:
    ok = [r for r in result.summary() if r["status"] == "ok"]
    return {"axis": result.axis, "values": [r["value"] for r in ok],
            "latency_per_token": [r["latency_per_token"] for r in ok], "ept": [r["ept"] for r in ok],
            "launches": [r["launches"] for r in ok]}


def _per_layer(report: RunReport, key: str) -> list:
    out = [0] * report.config.num_layers
    for row in report.rows:
        out[row["layer"]] += row[key]
    return out


def _dump(doc, path):
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_json(doc, path) -> None:
    _dump(doc, path)
