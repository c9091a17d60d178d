"""Matplotlib figure rendering for solve reports and training logs.

All functions write PNG files (Agg backend, no display) and return the paths
written, so the CLI can list them next to the JSON-lines reports they
illustrate.  Instances without coordinates (explicit-matrix ATSP) simply get
no tour plot.
"""

from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigurationError
from .instances import ProblemInstance, ProblemKind

_DPI = 120


def plot_tour(instance: ProblemInstance, route, path, title: Optional[str] = None):
    """Draw one solution over the instance's coordinates.

    TSP/ATSP routes are closed back to their first node; CVRP walks are split
    at the depot and each vehicle trip gets its own color.
    """
    if instance.coords is None:
        raise ConfigurationError(
            f"instance {instance.instance_id()} has no coordinates to plot")
    coords = np.asarray(instance.coords)
    route = np.asarray(route, dtype=np.int64)
    fig, ax = plt.subplots(figsize=(5, 5))
    if instance.kind is ProblemKind.CVRP:
        depot_stops = np.flatnonzero(route == 0)
        cmap = plt.get_cmap("tab10")
        trip = 0
        for a, b in zip(depot_stops[:-1], depot_stops[1:]):
            seg = route[a:b + 1]
            if len(seg) < 3:
                continue
            xy = coords[seg]
            ax.plot(xy[:, 0], xy[:, 1], "-", lw=1.2, color=cmap(trip % 10),
                    label=f"trip {trip}")
            trip += 1
        ax.plot(coords[1:, 0], coords[1:, 1], "o", ms=4, color="black", zorder=3)
        ax.plot(coords[0, 0], coords[0, 1], "s", ms=9, color="red", zorder=4,
                label="depot")
        if trip <= 8:
            ax.legend(fontsize=7, loc="upper right")
    else:
        closed = np.append(route, route[0])
        xy = coords[closed]
        ax.plot(xy[:, 0], xy[:, 1], "-o", lw=1.2, ms=4)
    ax.set_title(title or instance.instance_id(), fontsize=9)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    path = Path(path)
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_gap_histogram(gaps: Sequence[float], path, title: str = "optimality gap"):
    gaps = np.asarray([g for g in gaps if g is not None], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if len(gaps):
        ax.hist(gaps, bins=min(30, max(5, len(gaps) // 5)), edgecolor="black",
                linewidth=0.5)
        ax.axvline(float(gaps.mean()), color="red", ls="--", lw=1,
                   label=f"mean {gaps.mean():.3f}%")
        ax.legend(fontsize=8)
    ax.set_xlabel("gap (%)")
    ax.set_ylabel("instances")
    ax.set_title(title, fontsize=9)
    path = Path(path)
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_curve(records: Sequence[dict], path, title: str = "training"):
    """Mean tour length per epoch from training-log records (the JSON-lines
    file written by training, or EpochStats.to_record() dicts)."""
    epochs, lengths = [], []
    for rec in records:
        if rec.get("event", "epoch") == "epoch" and "mean_length" in rec:
            epochs.append(rec["epoch"])
            lengths.append(rec["mean_length"])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if epochs:
        ax.plot(epochs, lengths, "-o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean length")
    ax.set_title(title, fontsize=9)
    path = Path(path)
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def render_report_figures(reports, instances: Sequence[ProblemInstance],
                          out_prefix) -> List[Path]:
    """Standard figure set for a batch of solve reports: a gap histogram
    (when gaps exist) plus tour plots for the best- and worst-gap instances
    that carry coordinates.  Files land at ``<out_prefix>-<name>.png``."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    by_id = {inst.instance_id(): inst for inst in instances}
    written: List[Path] = []

    gaps = [rep.gap for rep in reports if rep.gap is not None]
    if gaps:
        written.append(plot_gap_histogram(
            gaps, out_prefix.with_name(out_prefix.name + "-gaps.png")))

    drawable = [rep for rep in reports
                if rep.instance_id in by_id and by_id[rep.instance_id].coords is not None]
    if drawable:
        if all(rep.gap is not None for rep in drawable):
            ordered = sorted(drawable, key=lambda r: r.gap)
        else:
            ordered = drawable
        picks = [("best", ordered[0])]
        if len(ordered) > 1:
            picks.append(("worst", ordered[-1]))
        for tag, rep in picks:
            inst = by_id[rep.instance_id]
            gap_txt = "" if rep.gap is None else f"  gap {rep.gap:.3f}%"
            written.append(plot_tour(
                inst, rep.route,
                out_prefix.with_name(f"{out_prefix.name}-tour-{tag}.png"),
                title=f"{rep.instance_id}  len {rep.length:.4f}{gap_txt}"))
    return written


def render_training_figures(records: Sequence[dict], out_prefix) -> List[Path]:
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    return [plot_training_curve(
        records, out_prefix.with_name(out_prefix.name + "-curve.png"))]
