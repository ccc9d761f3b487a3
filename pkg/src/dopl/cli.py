"""Command-line interface: ``verify``, ``simulate``, ``estimate``, ``montecarlo``, ``identify``.

Exit status is 0 on success, 1 for usage errors, 2 for data or validation
errors and 3 for numerical failures.  Failures print one line to stderr of
the form ``error code=<n> kind=<kind> message=<json string>``.
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
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .errors import DataError, EstimationError, IdentificationError, SingularParameterError
from .model import Params

log = logging.getLogger("dopl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- reports ---------------------------------------------------------------------


@dataclass
class Table:
    name: str
    columns: list
    rows: list


@dataclass
class Report:
    """Config echo plus named tables; rendered without timestamps so output is reproducible."""

    command: str
    config: dict
    tables: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def render(self, fmt: str) -> str:
        if fmt == "text":
            return self._text()
        if fmt == "csv":
            return self._csv()
        if fmt == "json-lines":
            return self._jsonl()
        raise UsageError(f"unknown format {fmt!r}")

    def _text(self):
        out = [f"dopl {__version__} {self.command}", "config:"]
        out += [f"  {k} = {_fmt_value(v)}" for k, v in self.config.items()]
        if self.summary:
            out.append("result:")
            out += [f"  {k} = {_fmt_value(v)}" for k, v in self.summary.items()]
        for t in self.tables:
            out.append(f"{t.name}:")
            cells = [[str(c) for c in t.columns]] + [[_fmt_value(v) for v in row] for row in t.rows]
            widths = [max(len(r[j]) for r in cells) for j in range(len(t.columns))]
            out += ["  " + "  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
        return "\n".join(out) + "\n"

    def _csv(self):
        buf = io.StringIO()
        for k, v in self.config.items():
            buf.write(f"# {k}={_fmt_value(v)}\n")
        for k, v in self.summary.items():
            buf.write(f"# result.{k}={_fmt_value(v)}\n")
        w = csv.writer(buf, lineterminator="\n")
        for t in self.tables:
            w.writerow(["table"] + list(t.columns))
            for row in t.rows:
                w.writerow([t.name] + [_fmt_value(v) for v in row])
        return buf.getvalue()

    def _jsonl(self):
        lines = [json.dumps({"type": "config", "command": self.command, **_jsonable(self.config)}, sort_keys=True)]
        if self.summary:
            lines.append(json.dumps({"type": "result", **_jsonable(self.summary)}, sort_keys=True))
        for t in self.tables:
            for row in t.rows:
                rec = {"type": t.name, **_jsonable(dict(zip(t.columns, row)))}
                lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"


def _fmt_value(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}" if abs(v) >= 1e-3 or v == 0 else f"{v:.3e}"
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt_value(x) for x in np.ravel(v))
    return str(v)


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, (np.floating, np.integer)):
            v = v.item()
        if isinstance(v, float) and not math.isfinite(v):
            v = None if math.isnan(v) else ("inf" if v > 0 else "-inf")
        out[k] = v
    return out


def _emit(report: Report, args):
    text = report.render(args.format)
    if getattr(args, "out", None):
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _check_output(path):
    if path is None:
        return
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise DataError(f"output directory does not exist: {parent}")
    if not os.access(parent, os.W_OK):
        raise DataError(f"output directory is not writable: {parent}")


def _check_input(path):
    if not os.path.isfile(path):
        raise DataError(f"input file not found: {path}")


# -- configs ------------------------------------------------------------------------


def _dgp_from_args(args):
    from .simulate import load_dgp_config, reference_design

    if args.config and args.design:
        raise UsageError("give either --config or --design, not both")
    if args.config:
        _check_input(args.config)
        cfg = load_dgp_config(args.config, seed=args.seed)
    elif args.design == "reference":
        if args.n is None:
            raise UsageError("--design reference needs --n")
        cfg = reference_design(args.n, heterogeneity=args.heterogeneity, seed=args.seed)
    else:
        raise UsageError("a data-generating process is required: --config FILE or --design reference")
    if args.config and args.n is not None:
        cfg = replace(cfg, n=args.n)
    return cfg


def _gmm_setup(args, Q, K):
    from .gmm import GmmOptions, InstrumentSpec

    gnorm = args.gamma_norm if args.gamma_norm is not None else min(2, Q)
    lnorm = args.lambda_norm if args.lambda_norm is not None else min(2, Q - 1)
    opts = GmmOptions(gamma_norm=gnorm, lambda_norm=lnorm, multistart=args.multistart, seed=args.seed)
    inst = InstrumentSpec(args.instruments, args.blocks, rescale=args.rescale)
    return inst, opts


def _gmm_config(args, inst, opts):
    return {
        "instruments": inst.kind, "blocks": inst.blocks, "rescale": inst.rescale,
        "gamma_norm": opts.gamma_norm, "lambda_norm": opts.lambda_norm,
        "multistart": opts.multistart, "seed": opts.seed,
    }


def _dgp_config(cfg):
    p = cfg.params
    return {
        "n": cfg.n, "T": cfg.T, "Q": p.Q, "K": p.K, "beta": p.beta, "gamma": p.gamma, "lambda": p.lam,
        "heterogeneity": cfg.heterogeneity, "y_init": cfg.y_init, "error_dist": cfg.error_dist, "seed": cfg.seed,
    }


# -- commands ---------------------------------------------------------------------


def cmd_verify(args) -> Report:
    from .moments import moment_count
    from .oracle import random_design, valid_space_dimension, validity_check

    rep = validity_check(args.Q, args.T, args.draws, args.seed, K=args.K)
    params, x = random_design(args.Q, args.T, args.K, np.random.default_rng([args.seed, 1]))
    rank = valid_space_dimension(args.Q, args.T, 1, x, params) if not args.no_rank else None
    expected = moment_count(args.Q, args.T)
    ok = rep.max_abs <= args.tol and (rank is None or rank == expected)
    summary = {
        "functions_per_initial_condition": rep.functions, "max_abs_conditional_mean": rep.max_abs,
        "worst_case": f"draw {rep.worst[0]} {rep.worst[1]} alpha={rep.worst[2]:.6g}" if rep.worst else "none",
        "valid_space_dimension": "skipped" if rank is None else rank,
        "expected_dimension": expected, "status": "pass" if ok else "fail",
    }
    config = {"Q": args.Q, "T": args.T, "K": args.K, "draws": args.draws, "seed": args.seed, "tol": args.tol}
    report = Report("verify", config, summary=summary)
    report.ok = ok
    return report


def cmd_simulate(args) -> Report:
    from .panel_csv import write_panel_csv
    from .simulate import gen_panel

    if not args.out:
        raise UsageError("simulate needs --out for the dataset CSV")
    _check_output(args.out)
    cfg = _dgp_from_args(args)
    data, x0 = gen_panel(cfg, return_x0=True)
    write_panel_csv(data, args.out, x0=x0)
    counts = np.bincount(data.y.ravel(), minlength=data.Q + 1)[1:]
    rows = [[q + 1, int(c), c / data.y.size] for q, c in enumerate(counts)]
    report = Report("simulate", {**_dgp_config(cfg), "out": args.out},
                    [Table("level_shares", ["level", "count", "share"], rows)])
    args.out = args.report
    return report


def cmd_estimate(args) -> Report:
    from .gmm import gmm_estimate, j_statistic
    from .panel_csv import read_panel_csv

    _check_input(args.data)
    _check_output(args.out)
    data = read_panel_csv(args.data)
    inst, opts = _gmm_setup(args, data.Q, data.K)
    est = gmm_estimate(data, inst=inst, options=opts)
    th = est.theta_hat
    se = est.se
    pinned = {f"gamma{opts.gamma_norm}", f"lambda{opts.lambda_norm}"}
    names = th.names()
    rows = [[nm, v, ("pinned" if nm in pinned else s)] for nm, v, s in zip(names, th.vector(), se)]
    jt = j_statistic(est)
    summary = {
        "n": data.n, "T": data.T, "Q": data.Q, "K": data.K, "moment_dim": est.moment_dim,
        "converged": est.converged,
        "J": jt.J if jt.available else "unavailable", "J_dof": jt.dof,
        "J_pvalue": jt.p_value if jt.available else "unavailable",
    }
    if est.notes:
        summary["notes"] = "; ".join(est.notes)
    stages = [[s.stage, s.objective, s.converged, s.iterations] for s in est.weighting_trace]
    config = {"data": args.data, **_gmm_config(args, inst, opts)}
    return Report("estimate", config, [Table("parameter", ["name", "estimate", "se"], rows),
                                       Table("stage", ["stage", "objective", "converged", "iterations"], stages)],
                  summary)


def _mc_worker(job):
    cfg, rep_seed, inst, opts = job
    from .gmm import gmm_estimate
    from .simulate import gen_panel

    data = gen_panel(cfg.with_seed(rep_seed))
    try:
        est = gmm_estimate(data, inst=inst, options=opts)
    except (EstimationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    return est.theta_hat.vector(), None


def replication_seeds(seed: int, reps: int) -> list[int]:
    """Independent 63-bit seeds, one per replication."""
    children = np.random.SeedSequence(seed).spawn(reps)
    return [int(c.generate_state(1, np.uint64)[0] >> np.uint64(1)) for c in children]


def summarize(estimates, truth, mae: str = "median") -> dict:
    """Median, MAE (median or mean absolute error about ``truth``) and IQR, per column."""
    est = np.asarray(estimates, dtype=float)
    err = np.abs(est - truth)
    q75, q25 = np.percentile(est, [75, 25], axis=0)
    return {
        "Median": np.median(est, axis=0),
        "MAE": np.median(err, axis=0) if mae == "median" else err.mean(axis=0),
        "IQR": q75 - q25,
    }


def cmd_montecarlo(args) -> Report:
    _check_output(args.out)
    cfg = _dgp_from_args(args)
    inst, opts = _gmm_setup(args, cfg.Q, cfg.K)
    truth = cfg.params.normalized(opts.gamma_norm, opts.lambda_norm)
    seeds = replication_seeds(args.seed, args.reps)
    jobs = [(cfg, s, inst, opts) for s in seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_mc_worker, jobs))
    else:
        results = [_mc_worker(j) for j in jobs]
    good = [r for r, _ in results if r is not None]
    failures = [(i, msg) for i, (r, msg) in enumerate(results) if r is None]
    if not good:
        raise EstimationError("every replication failed: " + failures[0][1])
    names = truth.names()
    stats = summarize(good, truth.vector(), args.mae)
    rows = [["True", *truth.vector()]] + [[k, *v] for k, v in stats.items()]
    tables = [Table("summary", ["row", *names], rows)]
    if args.per_rep:
        tables.append(Table("replication", ["rep", *names],
                            [[i, *r] for i, (r, _) in enumerate(results) if r is not None]))
    summary = {"replications": args.reps, "succeeded": len(good), "failed": len(failures), "mae": args.mae}
    if failures:
        summary["failures"] = "; ".join(f"rep {i}: {m}" for i, m in failures)
    config = {**_dgp_config(cfg), "reps": args.reps, "workers": args.workers, **_gmm_config(args, inst, opts)}
    return Report("montecarlo", config, tables, summary)


def cmd_identify(args) -> Report:
    from .identification import build_law, default_cells, identify_all

    _check_input(args.config)
    _check_output(args.out)
    from .simulate import load_dgp_config

    cfg = load_dgp_config(args.config)
    p = cfg.params
    support = [float(v) for v in args.support.replace(",", " ").split()]
    if not support:
        raise UsageError("--support needs at least one value")
    rng = np.random.default_rng(args.seed)
    cells = default_cells(p.K, spread=args.spread)
    # mixing weights that differ across (y0, cell) so the fixed effect is correlated with both
    weights = rng.dirichlet(np.ones(len(support)), size=(p.Q, len(cells)))
    law = build_law(p, cells, support, weights=lambda y0, c, x: weights[y0 - 1, c], spec=cfg.spec)
    rec = identify_all(law, y0=args.y0)
    true = p.normalized(1, 1)
    rec = rec.normalized(1, 1)
    rows = [[nm, t, r, abs(r - t)] for nm, t, r in zip(true.names(), true.vector(), rec.vector())]
    err = max(row[3] for row in rows)
    config = {"config": args.config, "Q": p.Q, "K": p.K, "support": support, "seed": args.seed,
              "y0": args.y0, "spread": args.spread, "cells": len(cells)}
    return Report("identify", config, [Table("parameter", ["name", "true", "recovered", "abs_error"], rows)],
                  {"max_abs_error": err})


# -- parser ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_format(p):
    p.add_argument("--format", choices=["text", "csv", "json-lines"], default="text")
    p.add_argument("--out", help="write the report here instead of stdout")


def _add_dgp(p):
    p.add_argument("--config", help="DGP config file (key = value lines)")
    p.add_argument("--design", choices=["reference"], help="built-in design")
    p.add_argument("--n", type=int, help="number of units (overrides the config)")
    p.add_argument("--heterogeneity", action="store_true", help="reference design with correlated fixed effects")


def _add_gmm(p):
    p.add_argument("--instruments", default="efficient",
                   choices=["paper-differences", "initial-condition-indicators", "efficient"])
    p.add_argument("--blocks", default="pooled", choices=["pooled", "per_y0"])
    p.add_argument("--rescale", action="store_true", help="rescale conditional moments (difference instruments)")
    p.add_argument("--gamma-norm", type=int, help="1-based gamma entry pinned to 0 (default 2)")
    p.add_argument("--lambda-norm", type=int, help="1-based lambda entry pinned to 0 (default 2)")
    p.add_argument("--multistart", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dopl", description="Dynamic ordered logit with fixed effects.")
    parser.add_argument("--version", action="version", version=f"dopl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("verify", help="check moment validity and the dimension count by enumeration")
    p.add_argument("--Q", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--draws", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--no-rank", action="store_true", help="skip the exact rank computation")
    p.add_argument("--seed", type=int, required=True)
    _add_format(p)

    p = sub.add_parser("simulate", help="simulate a panel and write it as CSV")
    _add_dgp(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="dataset CSV path")
    p.add_argument("--report", help="write the simulation report here instead of stdout")
    p.add_argument("--format", choices=["text", "csv", "json-lines"], default="text")

    p = sub.add_parser("estimate", help="GMM estimation from a dataset CSV")
    p.add_argument("--data", required=True)
    _add_gmm(p)
    p.add_argument("--seed", type=int, required=True, help="seed for multistart perturbations")
    _add_format(p)

    p = sub.add_parser("montecarlo", help="seeded replications of simulate + estimate")
    _add_dgp(p)
    _add_gmm(p)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--mae", choices=["median", "mean"], default="median")
    p.add_argument("--per-rep", action="store_true", help="also list every replication")
    p.add_argument("--seed", type=int, required=True)
    _add_format(p)

    p = sub.add_parser("identify", help="recover parameters from an exact population law")
    p.add_argument("--config", required=True)
    p.add_argument("--support", default="-1 0 1", help="fixed-effect support points")
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--y0", type=int, default=1)
    p.add_argument("--seed", type=int, required=True, help="seed for the mixing weights")
    _add_format(p)
    return parser


COMMANDS = {
    "verify": cmd_verify, "simulate": cmd_simulate, "estimate": cmd_estimate,
    "montecarlo": cmd_montecarlo, "identify": cmd_identify,
}


def _fail(code, kind, message):
    sys.stderr.write(f"error code={code} kind={kind} message={json.dumps(str(message))}\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    if args.command is None:
        return _fail(EXIT_USAGE, "usage", "a subcommand is required")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    for name in ("seed", "reps", "workers", "draws", "n"):
        v = getattr(args, name, None)
        if v is not None and v < (1 if name in ("reps", "workers", "draws", "n") else 0):
            return _fail(EXIT_USAGE, "usage", f"--{name} out of range: {v}")
    try:
        report = COMMANDS[args.command](args)
        _emit(report, args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (DataError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (EstimationError, IdentificationError, SingularParameterError, ArithmeticError,
            np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except ValueError as exc:
        return _fail(EXIT_DATA, "validation", exc)
    if args.command == "verify" and not getattr(report, "ok", True):
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
