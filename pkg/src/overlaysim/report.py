"""CSV emission and parsing, text tables, plot-data series and optional figures."""

from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
from typing import Iterable, Sequence, TextIO

from .metrics import CSV_COLUMNS, FLOAT_COLUMNS, ExperimentResult
from .topology import PlacementMode

log = logging.getLogger(__name__)

PLOT_METRICS = {
    "throughput_gbps": "Throughput (Gb/s)",
    "user_cpu_pct": "User CPU (%)",
    "ctx_per_gb": "Context switches per Gb",
    "intr_per_gb": "Interrupts per Gb",
}
MISSING = "NaN"


class ReportError(ValueError):
    pass


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(results: Iterable[ExperimentResult], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        row = r.row()
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def csv_text(results: Iterable[ExperimentResult]) -> str:
    buf = io.StringIO()
    write_csv(results, buf)
    return buf.getvalue()


def _parse_row(raw: dict, where: str) -> ExperimentResult:
    try:
        vals = {}
        for c in CSV_COLUMNS:
            v = raw[c]
            if c in FLOAT_COLUMNS:
                vals[c] = float(v) if v != "" else None
            elif c in ("pairs", "upcalls", "seed"):
                vals[c] = int(v)
            else:
                vals[c] = v
        PlacementMode.parse(vals["mode"])
    except (KeyError, ValueError) as exc:
        raise ReportError(f"{where}: bad value ({exc})") from None
    return ExperimentResult(**vals)


def read_rows(fh: TextIO, name: str = "<csv>") -> list[tuple[ExperimentResult, dict]]:
    """Parsed results paired with their raw string fields."""
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ReportError(f"{name}: expected columns {','.join(CSV_COLUMNS)}")
    return [(_parse_row(raw, f"{name}:{i + 2}"), raw) for i, raw in enumerate(reader)]


def read_csv(path) -> list[ExperimentResult]:
    with open(path, newline="") as fh:
        return [r for r, _raw in read_rows(fh, str(path))]


def merge(paths: Sequence) -> list[tuple[ExperimentResult, dict]]:
    """Combine CSVs keyed by (mode, pairs); a later file replaces earlier rows."""
    merged: dict[tuple[str, int], tuple[ExperimentResult, dict]] = {}
    origin: dict[tuple[str, int], str] = {}
    for path in paths:
        with open(path, newline="") as fh:
            rows = read_rows(fh, str(path))
        for result, raw in rows:
            key = (result.mode, result.pairs)
            if key in merged and origin[key] != str(path):
                log.warning("%s pairs=%d from %s replaces the row from %s",
                            key[0], key[1], path, origin[key])
            merged[key] = (result, raw)
            origin[key] = str(path)
    return sorted(merged.values(), key=lambda rr: (_mode_order(rr[0].mode), rr[0].pairs))


def _mode_order(mode: str) -> int:
    return list(PlacementMode).index(PlacementMode.parse(mode))


def format_table(results: Iterable[ExperimentResult]) -> str:
    header = ("mode", "pairs", "Gb/s", "ctx/s", "intr/s", "ctx/Gb", "intr/Gb", "user%", "upcalls")
    rows = []
    for r in results:
        def num(v, spec):
            return "-" if v is None else format(v, spec)
        rows.append((r.mode, str(r.pairs), num(r.throughput_gbps, ".2f"), num(r.ctx_per_s, ".0f"),
                     num(r.intr_per_s, ".0f"), num(r.ctx_per_gb, ".1f"), num(r.intr_per_gb, ".1f"),
                     num(r.user_cpu_pct, ".2f"), str(r.upcalls)))
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    for row in rows:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def write_plot_data(rows: Sequence[tuple[ExperimentResult, dict]], out_dir) -> list[Path]:
    """One file per metric; a block per mode of ``pairs value`` lines.

    Values are copied verbatim from the CSV; an empty cell becomes NaN.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in PLOT_METRICS:
        blocks = []
        for mode in PlacementMode:
            pts = [(r.pairs, raw[metric] or MISSING) for r, raw in rows if r.mode == mode.value]
            if pts:
                blocks.append(f"# mode {mode.value}\n" + "".join(f"{p} {v}\n" for p, v in pts))
        path = out_dir / f"{metric}.dat"
        path.write_text(f"# {metric}: pairs value\n" + "\n\n".join(blocks))
        written.append(path)
    return written


def render_figures(results: Sequence[ExperimentResult], out_dir) -> list[Path]:
    """PNG line charts of the plotted metrics against pair count."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric, label in PLOT_METRICS.items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for mode in PlacementMode:
            pts = [(r.pairs, getattr(r, metric)) for r in results
                   if r.mode == mode.value and getattr(r, metric) is not None]
            if pts:
                xs, ys = zip(*sorted(pts))
                ax.plot(xs, ys, marker="o", label=mode.value)
        ax.set_xlabel("Container pairs")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        if ax.lines:
            ax.legend()
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
