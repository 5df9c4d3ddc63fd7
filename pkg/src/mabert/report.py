"""Result tables, plot-data files and figures.

Everything written here is a pure function of its inputs (no timestamps, no
wall-clock fields), so repeated runs produce identical bytes.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .fileio import atomic_write  # noqa: E402
from .training import MetricsReport  # noqa: E402

# matplotlib otherwise stamps its version into the PNG
_PNG_META = {"Software": None}


@dataclass(frozen=True)
class Entry:
    airport: str
    method: str
    report: MetricsReport


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def csv_bytes(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode()


def comparison_table(entries: Sequence[Entry]) -> tuple[list[str], list[list]]:
    """Wide table: one row per (airport, task, metric), one column per method.

    The ``best`` column names the method with the lowest value in the row
    (first listed method wins ties). Methods keep their first-seen order.
    """
    if not entries:
        raise ValueError("no reports to tabulate")
    methods: list[str] = []
    cells: dict[tuple[str, str, str], dict[str, float]] = {}
    for e in entries:
        if e.method not in methods:
            methods.append(e.method)
        for metric, value in e.report.metrics().items():
            if metric == "loss":
                continue
            cells.setdefault((e.airport, e.report.task, metric), {})[e.method] = value
    rows = []
    for (airport, task, metric), vals in cells.items():
        present = [m for m in methods if vals.get(m) is not None]
        best = min(present, key=lambda m: vals[m]) if present else ""
        rows.append([airport, task, metric] + [vals.get(m) for m in methods] + [best])
    return ["airport", "task", "metric"] + methods + ["best"], rows


def write_table(path: str | Path, entries: Sequence[Entry]) -> int:
    """Write the comparison table; returns the number of data rows."""
    header, rows = comparison_table(entries)
    atomic_write(path, csv_bytes(header, rows))
    return len(rows)


def write_xy(path: str | Path, xs: Sequence, ys: Sequence, names: tuple[str, str] = ("x", "y")) -> None:
    """Two-column plot-data file."""
    if len(xs) != len(ys):
        raise ValueError("x and y lengths differ")
    atomic_write(path, csv_bytes(names, zip(xs, ys)))


def write_curve(path: str | Path, curve: Sequence[tuple[int, float, float | None]]) -> None:
    """Loss curve, one row per epoch."""
    atomic_write(path, csv_bytes(["epoch", "train_loss", "val_loss"], curve))


def plot_curves(path: str | Path, curves: dict[str, Sequence[tuple[int, float, float | None]]], title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for label, curve in curves.items():
        ep = [c[0] for c in curve]
        ax.plot(ep, [c[1] for c in curve], label=f"{label} train")
        val = [(c[0], c[2]) for c in curve if c[2] is not None]
        if val:
            ax.plot(*zip(*val), linestyle="--", label=f"{label} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (normalized MSE)")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save_fig(fig, path)


def plot_xy(path: str | Path, series: dict[str, tuple[Sequence, Sequence]], xlabel: str, ylabel: str, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save_fig(fig, path)


def _save_fig(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=_PNG_META)
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def emit_report(
    out_dir: str | Path,
    entries: Sequence[Entry],
    curves: dict[str, Sequence[tuple[int, float, float | None]]] | None = None,
    prefix: str = "report",
) -> list[Path]:
    """Write the comparison table (if any entries) plus loss-curve data and figures.

    Returns the written paths in a stable order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not entries and not curves:
        raise ValueError("nothing to report")
    written = []
    if entries:
        written.append(out / f"{prefix}_table.csv")
        write_table(written[0], entries)
    for label, curve in (curves or {}).items():
        p = out / f"{prefix}_curve_{label}.csv"
        write_curve(p, curve)
        written.append(p)
        for split, col in (("train", 1), ("val", 2)):
            pts = [(c[0], c[col]) for c in curve if c[col] is not None]
            if pts:
                p = out / f"{prefix}_curve_{label}_{split}.xy.csv"
                write_xy(p, *zip(*pts), names=("epoch", f"{split}_loss"))
                written.append(p)
    if curves:
        p = out / f"{prefix}_curves.png"
        plot_curves(p, curves)
        written.append(p)
    return written
