"""Run outputs: the event log, the summary document, and figures.

summary.json is written with sorted keys and a fixed float policy so that two
runs of the same scenario and seed produce byte-identical files. Figures are
rendered alongside for human eyes and are not part of that guarantee.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from . import metrics
from .metrics import EVENT_FIELDS, EventRow, Recorder


def write_events_csv(events: Sequence[EventRow], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVENT_FIELDS)
        for row in events:
            writer.writerow(row.as_tuple())
    return path


def write_summary_json(summary: Dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(summary, sort_keys=True, indent=2)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(payload)
        fh.write("\n")
    return path


def _use_agg():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_figures(rec: Recorder, horizon_s: float, out_dir: Path) -> List[Path]:
    """Queue evolution and the delay histogram; returns the written paths."""
    plt = _use_agg()
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    series: Dict[str, List[tuple]] = {}
    for row in rec.events:
        if row.kind == "queue":
            series.setdefault(f"{row.rid}.{row.lid}", []).append((row.time, int(row.value)))
    fig, ax = plt.subplots(figsize=(8, 4))
    if series:
        for label in sorted(series):
            pts = series[label]
            ax.step([t for t, _ in pts], [q for _, q in pts], where="post", label=label)
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("stopped vehicles")
    ax.set_title("Queue length by lane")
    ax.set_xlim(0, horizon_s)
    fig.tight_layout()
    p = out_dir / "queues.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)

    delays = list(metrics.vehicle_delays(rec, horizon_s).values())
    fig, ax = plt.subplots(figsize=(6, 4))
    if delays:
        ax.hist(delays, bins=24, color="#4878a8", edgecolor="black")
    ax.set_xlabel("delay vs free flow [s]")
    ax.set_ylabel("vehicles")
    ax.set_title("Per-vehicle delay")
    fig.tight_layout()
    p = out_dir / "delays.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)
    return written


def render_compare_figure(
    labels: Sequence[str], mean_delays: Sequence[Optional[float]], out_dir: Path
) -> Path:
    plt = _use_agg()
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(labels))
    ax.bar(xs, [0.0 if d is None else d for d in mean_delays], color="#4878a8")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=15, ha="right")
    ax.set_ylabel("mean delay [s]")
    ax.set_title("Controller comparison")
    fig.tight_layout()
    p = out_dir / "compare.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    return p
