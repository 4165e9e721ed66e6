"""Command-line experiment runner.

    gbpcal run CONFIG [--output DIR] [--plot]
    gbpcal sweep CONFIG --axis {dropout,outlier_frac,comm_range} --values V [V ...]
    gbpcal mrclam CONFIG
    gbpcal defaults SCENARIO

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
``GBPCAL_OUTPUT_DIR`` overrides the configured output directory.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .experiments import SUMMARY_METRICS, run_experiment, run_mrclam_experiment

OUTPUT_ENV = "GBPCAL_OUTPUT_DIR"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("gbpcal")


def _fmt_cell(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return "" if v is None else str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt_cell(r[c]) for c in columns])


def write_summary(path, exp, summary, extra=None):
    doc = {"scenario": exp.scenario, "seeds": list(exp.seeds), "final": summary}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def print_table(summary, out=sys.stdout):
    head = f"{'run':<34}" + "".join(f"{m:>18}" for m in SUMMARY_METRICS)
    print(head, file=out)
    for label, entry in summary.items():
        cells = []
        for m in SUMMARY_METRICS:
            s = entry[m]
            cells.append(f"{'-':>18}" if s["mean"] is None else f"{s['mean']:>10.4f}±{s['std']:<7.4f}")
        print(f"{label:<34}" + "".join(cells), file=out)


def render_plot(csv_path, png_path):
    """ATE-versus-iteration figure per run label (needs the ``plot`` extra)."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("--plot needs matplotlib; install the 'plot' extra") from exc
    series = {}
    with open(csv_path) as fh:
        for row in csv.DictReader(fh):
            label = row["solver"] if "value" not in row else f"{row['solver']} {row['axis']}={row['value']}"
            series.setdefault(label, {}).setdefault(int(row["seed"]), []).append(float(row["ate_twb_m"]))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, per_seed in series.items():
        n = min(len(v) for v in per_seed.values())
        mean = [sum(v[i] for v in per_seed.values()) / len(per_seed) for i in range(n)]
        ax.plot(range(1, n + 1), mean, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("RMSE ATE of T_WB (m)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def _output_dir(exp, override):
    d = Path(override or os.environ.get(OUTPUT_ENV) or exp.output)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _progress(label, seed, rec):
    log.info("%s seed %s: ate_twb %.4f m", label, seed, rec.ate_twb_m)


def _execute(args, exp, stem, runner):
    out = _output_dir(exp, args.output)
    columns, rows, summary = runner()
    csv_path = out / f"{stem}.csv"
    write_csv(csv_path, columns, rows)
    write_summary(out / f"{stem}_summary.json", exp, summary)
    print_table(summary)
    if args.plot:
        render_plot(csv_path, out / f"{stem}.png")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_run(args, exp):
    if exp.scenario == "mrclam":
        return cmd_mrclam(args, exp)
    return _execute(args, exp, exp.scenario, lambda: run_experiment(exp, progress=_progress))


def cmd_sweep(args, exp):
    try:
        values = [float(v) for v in args.values]
    except ValueError as exc:
        raise cfgmod.ConfigError("--values", str(exc)) from None
    exp = cfgmod.with_sweep(exp, args.axis, values)
    stem = f"{exp.scenario}_sweep_{args.axis}"
    return _execute(args, exp, stem, lambda: run_experiment(exp, progress=_progress))


def cmd_mrclam(args, exp):
    m = exp.mrclam
    missing = [d for d in m.datasets if not (Path(m.path) / d).is_dir()]
    if missing:
        raise cfgmod.ConfigError("mrclam.path", f"dataset directories not found under {m.path}: {', '.join(missing)}")
    return _execute(args, exp, "mrclam", lambda: run_mrclam_experiment(exp, progress=_progress))


def cmd_defaults(args):
    if args.scenario not in cfgmod.SCENARIOS:
        raise cfgmod.ConfigError("scenario", f"unknown scenario {args.scenario!r}")
    sys.stdout.write(cfgmod.dumps(cfgmod.loads(f"[experiment]\nscenario = {args.scenario}\n")))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gbpcal", description="Distributed GBP localisation and auto-calibration experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every finished run")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("config", help="INI experiment file")
        sp.add_argument("--output", help=f"output directory (overrides config and ${OUTPUT_ENV})")
        sp.add_argument("--plot", action="store_true", help="also render a PNG (needs matplotlib)")

    common(sub.add_parser("run", help="run the configured scenario"))
    sw = sub.add_parser("sweep", help="sweep one parameter")
    common(sw)
    sw.add_argument("--axis", required=True, choices=cfgmod.AXES)
    sw.add_argument("--values", required=True, nargs="+", help="values; 'inf' is allowed")
    common(sub.add_parser("mrclam", help="MR.CLAM sliding-window runs"))
    d = sub.add_parser("defaults", help="print the resolved default config of a scenario")
    d.add_argument("scenario")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.verb == "defaults":
            return cmd_defaults(args)
        exp = cfgmod.load(args.config)
        return {"run": cmd_run, "sweep": cmd_sweep, "mrclam": cmd_mrclam}[args.verb](args, exp)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report any failure as exit 1
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
