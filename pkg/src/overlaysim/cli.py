"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or config failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from .calibration import CalibrationError, calibrate
from .config import ConfigError, ExperimentConfig, load_config
from .pcap import write_overlay_pcap
from .report import (ReportError, csv_text, format_table, merge, read_rows, render_figures,
                     write_plot_data)
from .topology import PlacementMode, build_topology
from .workload import run_experiment

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("overlaysim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _calibrated(config: ExperimentConfig) -> tuple[ExperimentConfig, dict | None]:
    t = config.calibration
    if t.direct_gbps is None and t.overlay_gbps is None and t.dpu_gbps is None:
        return config, None
    cal = calibrate(config)
    log.info("calibrated multipliers %s", cal.multipliers)
    return dataclasses.replace(config, cost=cal.cost), {
        "multipliers": cal.multipliers, "achieved_gbps": cal.achieved}


def _execute(config: ExperimentConfig, runs, args) -> int:
    config, calibration = _calibrated(config)
    out = config.output_dir
    results = []
    traces: dict[str, str] = {}
    for run in (config.run_config(r.mode, r.pairs) for r in runs):
        label = f"{run.mode.value} pairs={run.pairs}"
        log.info("running %s", label)
        try:
            if config.output.trace or args.trace:
                buf = io.StringIO()
                results.append(run_experiment(run, trace=buf))
                traces[f"trace-{run.mode.value}-{run.pairs}.csv"] = buf.getvalue()
            else:
                results.append(run_experiment(run))
        except Exception as exc:
            raise RuntimeError(f"run {label} failed: {exc}") from exc
    text = csv_text(results)
    table = format_table(results)
    _atomic_write(out / config.output.csv, text)
    if config.output.table:
        _atomic_write(out / (Path(config.output.csv).stem + ".txt"), table)
    breakdown = {f"{r.mode}:{r.pairs}": r.breakdown for r in results}
    _atomic_write(out / "breakdown.json", json.dumps(breakdown, indent=2, sort_keys=True) + "\n")
    if calibration is not None:
        # flat, so a later config can point cost_model at it directly
        _atomic_write(out / "calibrated_cost_model.json",
                      json.dumps(config.cost.to_dict(), indent=2, sort_keys=True) + "\n")
        _atomic_write(out / "calibration.json",
                      json.dumps(calibration, indent=2, sort_keys=True) + "\n")
    for name, body in traces.items():
        _atomic_write(out / name, body)
    if config.output.figures or args.figures:
        write_plot_data(read_rows(io.StringIO(text)), out / "plots")
        render_figures(results, out / "plots")
    sys.stdout.write(table)
    print(f"wrote {out / config.output.csv}", file=sys.stderr)
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args.config)
    runs = list(config.runs())
    if len(runs) != 1:
        raise ConfigError(f"run needs exactly one mode and pair count (config has {len(runs)} "
                          "points; use sweep)")
    return _execute(config, runs, args)


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    return _execute(config, list(config.runs()), args)


def cmd_pcap(args) -> int:
    config = load_config(args.config)
    try:
        mode = PlacementMode.parse(args.mode) if args.mode else config.modes[0]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    pairs = args.pairs if args.pairs is not None else config.pairs[0]
    if not mode.encapsulates:
        raise UsageError(f"pcap export needs an overlay mode; {mode.value} encapsulates nothing")
    if args.k < 1 or pairs < 1:
        raise UsageError("-k and --pairs must be positive")
    topo = build_topology(config.run_config(mode, pairs))
    out = Path(args.output)
    tmp = out.with_name(f".{out.name}.partial")
    try:
        n = write_overlay_pcap(tmp, topo, args.k, config.workload.segment_bytes,
                               config.engine.tick_us)
        os.replace(tmp, out)
    finally:
        if tmp.exists():
            tmp.unlink()
    print(f"wrote {n} records to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    for p in args.csv:
        if not Path(p).is_file():
            raise UsageError(f"{p}: no such file")
    rows = merge(args.csv)
    results = [r for r, _raw in rows]
    out = Path(args.output_dir)
    write_plot_data(rows, out)
    if args.figures:
        render_figures(results, out)
    sys.stdout.write(format_table(results))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="overlaysim", description="Container overlay network placement simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn, help_ in (("run", cmd_run, "run a single experiment"),
                            ("sweep", cmd_sweep, "run every mode and pair count in a config")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config")
        sp.add_argument("--figures", action="store_true",
                        help="also write plot-data files and PNG charts under <output>/plots")
        sp.add_argument("--trace", action="store_true", help="write a per-tick pool trace per run")
        sp.set_defaults(func=fn)
    sp = sub.add_parser("pcap", help="export tunnel frames as a pcap capture")
    sp.add_argument("config")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("-k", type=int, default=10, help="frames per flow (default 10)")
    sp.add_argument("--mode")
    sp.add_argument("--pairs", type=int)
    sp.set_defaults(func=cmd_pcap)
    sp = sub.add_parser("report", help="merge result CSVs into a table and plot-data files")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("-o", "--output-dir", default="plots")
    sp.add_argument("--figures", action="store_true", help="also render PNG charts")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"overlaysim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ReportError) as exc:
        print(f"overlaysim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CalibrationError, RuntimeError, OSError, ValueError) as exc:
        print(f"overlaysim: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is still a runtime failure
        print(f"overlaysim: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
