"""Command-line front end.

Grammar: ``copasmeta <subcommand> [--config PATH] [--out DIR] [--seed N] [--jobs K]``.

Exit codes: 0 success, 1 usage or configuration error, 2 input-data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .config import (
    DEFAULT_SEED,
    CalibrateConfig,
    Figure1Config,
    FitConfig,
    ScenarioRunConfig,
    Table1Config,
    load_json,
)
from .copas import build_grid, fallback_point, grid_sensitivity, grid_to_csv, grid_to_json
from .errors import (
    CalibrationInfeasibleError,
    ConfigurationError,
    DataError,
    EmptyReportError,
    EstimationError,
    LRTError,
)
from .harness import (
    TABLE1_ROWS,
    effective_mechanism,
    calibrate_cell,
    compute_metrics,
    emit_figure_data,
    run_replicates,
    table1_csv,
)
from .model_core import fit_random_effects, read_studies_csv
from .selection import (
    Significance,
    calibrate_rate,
    mechanism_to_dict,
    pilot_populations,
)
from .table1 import comparison_text, evaluate, run_table1

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "COPASMETA_OUT"

log = logging.getLogger("copasmeta")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> dict:
    return load_json(args.config) if args.config else {}


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


def _g(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    return f"{float(x):.17g}"


# ---------------------------------------------------------------------------
# fit / grid
# ---------------------------------------------------------------------------


def _fit_inputs(args):
    cfg = FitConfig.from_dict(_config(args))
    path = args.data or cfg.data
    if path is None:
        raise UsageError("no data file: pass --data or set 'data' in the config")
    return cfg, read_studies_csv(path)


def cmd_fit(args) -> int:
    cfg, sample = _fit_inputs(args)
    out = _out_dir(args)
    re_fit = fit_random_effects(sample)
    if not re_fit.converged:
        raise EstimationError("random-effects fit did not converge")
    grid = build_grid(sample, cfg.grid.n_alpha, cfg.grid.n_beta)
    result = grid_sensitivity(sample, grid, cfg.grid.lrt_threshold, early_stop=cfg.grid.early_stop)
    _write(out / "grid.csv", grid_to_csv(result, sample))
    _write(out / "grid.json", grid_to_json(result))

    print(f"studies: {sample.m}")
    print(f"unadjusted ML estimate: {re_fit.theta_hat:.6g} (se {re_fit.se_theta:.6g}, tau2 {re_fit.tau2_hat:.6g})")
    chosen, note = result.chosen, ""
    if chosen is None:
        chosen = fallback_point(result)
        note = " [fallback: no grid point passes the selection-bias test]"
    if chosen is None:
        print("adjusted estimate: unavailable (no grid point could be fitted)")
    else:
        f = result.points[chosen].fit
        lo, hi = f.ci()
        print(f"adjusted estimate: {f.theta_hat:.6g} (se {f.se_theta:.6g}, 95% CI {lo:.6g} to {hi:.6g}) "
              f"at grid point {chosen}{note}")
    errors = {pt.error for pt in result.points}
    if len(errors) == 1 and None not in errors:
        print(f"all {len(result.points)} grid points failed: {errors.pop()}")
        return EXIT_NUMERIC if sample.m >= 4 else EXIT_OK
    print("grid point  p_small   p_large   theta_hat     lrt_p")
    for i, pt in enumerate(result.points):
        p = pt.params
        theta = f"{pt.fit.theta_hat:10.5g}" if pt.fit is not None else f"{'-':>10}"
        lrt = f"{pt.lrt_p:9.4g}" if math.isfinite(pt.lrt_p) else f"{'-':>9}"
        flag = " *" if i == result.chosen else ""
        extra = f"  ({pt.error})" if pt.error and pt.error != "skipped" else ""
        print(f"{i:10d}  {pt.pub_prob_smallest:7.4f}  {p.p_large if p.p_large is not None else math.nan:7.4f}  "
              f"{theta}  {lrt}{flag}{extra}")
    if sample.m >= 4 and not any(pt.fit is not None for pt in result.points):
        raise EstimationError("no grid point could be fitted")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg, sample = _fit_inputs(args)
    out = _out_dir(args)
    grid = build_grid(sample, cfg.grid.n_alpha, cfg.grid.n_beta)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "beta", "p_small", "p_large"])
    for p in grid:
        w.writerow([_g(p.alpha), _g(p.beta), _g(p.p_small), _g(p.p_large)])
    _write(out / "grid_params.csv", buf.getvalue())
    print(f"{len(grid)} grid points written")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulation subcommands
# ---------------------------------------------------------------------------


def _calibration_record(cal=None, spec=None, error=None) -> dict:
    if cal is None:
        rec = {"mechanism": mechanism_to_dict(spec), "achieved_rate": None, "iterations": None,
               "achievable": None, "error": str(error)}
        if isinstance(error, CalibrationInfeasibleError) and error.achievable is not None:
            rec["achievable"] = list(error.achievable)
        return rec
    return {"mechanism": mechanism_to_dict(cal.spec), "achieved_rate": cal.achieved_rate,
            "iterations": cal.iterations, "achievable": list(cal.achievable), "error": None}


def cmd_calibrate(args) -> int:
    cfg = CalibrateConfig.from_dict(_config(args), args.seed)
    out = _out_dir(args)
    s = cfg.calibration
    pilots = pilot_populations(cfg.scenario, s.pilot_replicates)
    records, failed = [], 0
    for spec in cfg.mechanisms:
        eff = effective_mechanism(spec, cfg.scenario)
        try:
            cal = calibrate_rate(eff, cfg.scenario, s.target_rate, s.tolerance, s.pilot_replicates, pilots)
            if eff is not spec:
                cal = replace(cal, spec=replace(cal.spec, rho_sel=spec.rho_sel))
            records.append(_calibration_record(cal))
            print(f"{spec.kind}: {cal.spec.free_param:.6g} -> rate {cal.achieved_rate:.4f}")
        except CalibrationInfeasibleError as exc:
            failed += 1
            records.append(_calibration_record(spec=spec, error=exc))
            print(f"{spec.kind}: infeasible ({exc})", file=sys.stderr)
    doc = {"master_seed": cfg.scenario.seed, "scenario": cfg.scenario.to_dict(),
           "target_rate": s.target_rate, "tolerance": s.tolerance, "calibrations": records}
    _write(out / "calibration.json", json.dumps(doc, indent=2))
    return EXIT_NUMERIC if failed else EXIT_OK


REPLICATE_COLUMNS = ["replicate", "theta_adj", "ci_low", "ci_high", "m_published", "converged",
                     "chosen_grid_point", "failure_kind", "fallback", "selection_redraws"]


def cmd_scenario(args) -> int:
    cfg = ScenarioRunConfig.from_dict(_config(args), args.seed)
    out = _out_dir(args)
    spec = cfg.mechanism
    cal_rec = None
    if cfg.calibrate:
        s = cfg.calibration
        eff = effective_mechanism(spec, cfg.scenario)
        cal = calibrate_rate(eff, cfg.scenario, s.target_rate, s.tolerance, s.pilot_replicates)
        spec = replace(cal.spec, rho_sel=spec.rho_sel) if eff is not spec else cal.spec
        cal = replace(cal, spec=spec)
        cal_rec = _calibration_record(cal)
    results = run_replicates(cfg.scenario, spec, cfg.n_replicates, cfg.grid, args.jobs)
    report = compute_metrics(results, cfg.scenario.theta_true)

    buf = io.StringIO()
    buf.write(f"# master_seed={cfg.scenario.seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPLICATE_COLUMNS)
    for i, r in enumerate(results):
        w.writerow([i, _g(r.theta_adj), _g(r.ci_low), _g(r.ci_high), r.m_published, int(r.converged),
                    "" if r.chosen_grid_point is None else r.chosen_grid_point, r.failure_kind or "",
                    int(r.fallback), r.selection_redraws])
    _write(out / "replicates.csv", buf.getvalue())
    doc = {"master_seed": cfg.scenario.seed, "scenario": cfg.scenario.to_dict(),
           "mechanism": mechanism_to_dict(spec), "calibration": cal_rec,
           "n_replicates": cfg.n_replicates, "theta_true": cfg.scenario.theta_true,
           "report": {k: (v if not isinstance(v, float) or math.isfinite(v) else None)
                      for k, v in asdict(report).items()}}
    _write(out / "report.json", json.dumps(doc, indent=2))
    print(f"mse {report.mse:.5f}  bias {report.bias:.5f}  cp {report.cp:.3f}  m_bar {report.m_bar:.2f}  "
          f"failed {report.n_failed}  fallback {report.n_fallback}")
    if report.unreliable:
        print("warning: more than 5% of replicates failed; metrics are unreliable", file=sys.stderr)
    return EXIT_OK


def cmd_table1(args) -> int:
    cfg = Table1Config.from_dict(_config(args), args.seed)
    out = _out_dir(args)

    def progress(cell):
        if cell.report is None:
            print(f"{cell.heterogeneity} {cell.row}: unavailable ({cell.error})", file=sys.stderr)
        else:
            r = cell.report
            print(f"{cell.heterogeneity} {cell.row}: mse {r.mse:.5f} bias {r.bias:.5f} cp {r.cp:.3f} m_bar {r.m_bar:.1f}")

    cells = run_table1(cfg, args.jobs, progress)
    _write(out / "table1.csv", table1_csv(cells, cfg.seed))
    checks = evaluate(cells, cfg.calibration.target_rate)
    _write(out / "comparison.txt", comparison_text(cells, checks, cfg.seed))
    cal = [_calibration_record(c.calibration) if c.calibration is not None
           else {"row": c.row, "error": c.error} for c in cells]
    _write(out / "calibration.json", json.dumps({"master_seed": cfg.seed, "cells": cal}, indent=2))
    print(f"{sum(ch.passed for ch in checks)} of {len(checks)} checks passed")
    return EXIT_OK


FIGURE_PANELS = (("copas_rho0", "copas_rho0"), ("copas_rho0.9", "copas_rho0.9"),
                 ("significance", "significance"), ("standardized", "standardized"))


def cmd_figure1(args) -> int:
    cfg = Figure1Config.from_dict(_config(args), args.seed)
    out = _out_dir(args)
    scenario = cfg.scenario_config()
    s = cfg.calibration
    pilots = pilot_populations(scenario, s.pilot_replicates)
    header = f"# master_seed={scenario.seed}\n"
    for row in TABLE1_ROWS:
        cal = calibrate_cell(scenario, row, s.target_rate, s.tolerance, pilots, cfg.alpha_sig)
        data = emit_figure_data(scenario, cal.spec, cfg.n_replicates, label=row)
        _write(out / f"figure1_{row}.csv", header + data.raw_csv())
        _write(out / f"figure1_{row}_binned.csv", header + data.binned_csv())
        pub = data.published.mean()
        cut = f", cutoff {data.cutoff:.4f}" if isinstance(cal.spec, Significance) else ""
        print(f"{row}: {data.standardized.size} studies, published fraction {pub:.3f}{cut}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="copasmeta", description="Copas selection-model sensitivity analysis and simulation study.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True, jobs=True):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or the current directory)")
        if seed:
            p.add_argument("--seed", type=int, help=f"master seed override (default {DEFAULT_SEED})")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("fit", help="sensitivity analysis of a study CSV (study_id,effect,se)")
    common(p, seed=False, jobs=False)
    p.add_argument("--data", help="study CSV (overrides 'data' in the config)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("grid", help="write the (alpha, beta) grid for a study CSV")
    common(p, seed=False, jobs=False)
    p.add_argument("--data", help="study CSV (overrides 'data' in the config)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("calibrate", help="calibrate mechanisms to a publication rate")
    common(p, jobs=False)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("scenario", help="Monte-Carlo evaluation of one scenario and mechanism")
    common(p)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("table1", help="reproduce the full results table")
    common(p)
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser("figure1", help="export the selection histogram data")
    common(p, jobs=False)
    p.set_defaults(func=cmd_figure1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        parser.error("--seed must be a 64-bit unsigned integer")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, LRTError, CalibrationInfeasibleError, EmptyReportError,
            FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
