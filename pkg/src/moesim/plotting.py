"""Figures written next to the CSV reports (Agg backend, PNG)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .devicesim import STAGES  # noqa: E402

STAGE_COLORS = {"attention_stub": "#8da0cb", "router": "#fc8d62", "pack": "#e78ac3",
                "expert_ffn": "#66c2a5", "scatter": "#a6d854"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def stage_breakdown_figure(reports: dict, path) -> None:
    """Stacked per-stage busy time for one or more runs keyed by label."""
    labels = list(reports)
    fig, ax = plt.subplots(figsize=(max(4, 1.3 * len(labels) + 2), 4))
    bottom = [0.0] * len(labels)
    for stage in STAGES:
        vals = [reports[k].aggregate.breakdown.get(stage, 0.0) / reports[k].aggregate.tokens for k in labels]
        ax.bar(labels, vals, bottom=bottom, label=stage, color=STAGE_COLORS[stage])
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_ylabel("busy time per token")
    ax.legend(fontsize=8, frameon=False)
    ax.tick_params(axis="x", rotation=30)
    _save(fig, path)


def sweep_figure(result, path) -> None:
    ok = [r for r in result.summary() if r["status"] == "ok"]
    fig, ax1 = plt.subplots(figsize=(5, 3.5))
    xs = [str(r["value"]) for r in ok]
    ax1.plot(xs, [r["latency_per_token"] for r in ok], "o-", color="k", label="latency / token")
    ax1.set_xlabel(result.axis)
    ax1.set_ylabel("latency per token")
    ax2 = ax1.twinx()
    ax2.plot(xs, [r["ept"] for r in ok], "s--", color="tab:green", label="EPT")
    ax2.set_ylabel("energy per token", color="tab:green")
    _save(fig, path)


def ablation_figure(reports: dict, path) -> None:
    labels = list(reports)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
    metrics = [("latency per token", lambda a: a.latency_per_token), ("energy per token", lambda a: a.ept),
               ("CPU cycles (proxy)", lambda a: a.cpu_cycles)]
    for ax, (title, fn) in zip(axes, metrics):
        ax.bar(labels, [fn(reports[k].aggregate) for k in labels], color="0.55")
        ax.set_title(title, fontsize=10)
        ax.tick_params(axis="x", rotation=45, labelsize=8)
    _save(fig, path)
