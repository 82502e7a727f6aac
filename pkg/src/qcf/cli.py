"""``qcf`` command line: fit, select, evaluate, infer, simulate.

Exit codes: 0 success, 2 input error, 3 estimation degeneracy. Failures
print a one-line JSON error record on stderr (and to ``error.json`` in the
output directory when one is given).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

THREADS_ENV = "QCF_NUM_THREADS"
EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE = 0, 2, 3

log = logging.getLogger("qcf")


def _apply_thread_env() -> int | None:
    """Pin BLAS thread pools from QCF_NUM_THREADS; must run before numpy loads."""
    val = os.environ.get(THREADS_ENV)
    if not val:
        return None
    n = int(val)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    return n


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _num(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _tau_dir(out: Path, tau: float) -> Path:
    return out / f"tau_{tau:g}"


def _load(args):
    from qcf.panel import load_panel

    x_cols = args.x_cols.split(",") if getattr(args, "x_cols", None) else None
    return load_panel(args.data, time_col=args.time_col, id_col=args.id_col, y_col=args.y_col, x_cols=x_cols, standardize=args.standardize)


def _metric_rows(label, tau, bundle):
    return [[label, tau, k, _num(v)] for k, v in bundle.as_dict().items()]


# ------------------------------------------------------------------ commands


def cmd_fit(args) -> int:
    from qcf.artifacts import save_result
    from qcf.estimator import fit_qcf
    from qcf.evaluation import QuantileFit, metric_bundle
    from qcf.selection import HyperGrid, select_hyperparams

    panel = _load(args)
    out = Path(args.out)
    rows = []
    for tau in args.tau:
        if args.grid:
            sel = select_hyperparams(panel, HyperGrid.parse(args.grid), tau)
            r, m, a = sel.r, sel.m, sel.ridge
        else:
            r, m, a = args.r, args.m, args.ridge
        res = fit_qcf(panel, tau, r, m, a, strict=args.strict)
        bundle = metric_bundle(QuantileFit(res.fitted(panel), tau), panel)
        save_result(res, _tau_dir(out, tau), extra={"metrics": bundle.as_dict(), "data": str(args.data),
                                                    "standardize": bool(args.standardize),
                                                    "standardization": panel.standardization})
        rows += _metric_rows("in_sample", tau, bundle)
        print(f"tau={tau:g} r={r} m={m} ridge={a:g} aqe={bundle.aqe:.6g} qhe={bundle.qhe:.6g} flags={len(res.flags)}")
    _write_csv(out / "metrics.csv", ["fit", "tau", "metric", "value"], rows)
    return EXIT_OK


def cmd_select(args) -> int:
    from qcf.selection import HyperGrid, select_hyperparams

    panel = _load(args)
    grid = HyperGrid.parse(args.grid) if args.grid else HyperGrid()
    rows, all_scores = [], []
    for tau in args.tau:
        sel = select_hyperparams(panel, grid, tau)
        rows.append([tau, sel.r, sel.m, sel.ridge, _num(sel.score)])
        all_scores += [[tau, *k, _num(v)] for k, v in sorted(sel.scores.items())]
        print(f"tau={tau:g} r={sel.r} m={sel.m} ridge={sel.ridge:g} score={sel.score:.6g}")
    if args.out:
        out = Path(args.out)
        _write_csv(out / "selection.csv", ["tau", "r", "m", "ridge", "score"], rows)
        _write_csv(out / "grid_scores.csv", ["tau", "r", "m", "ridge", "score"], all_scores)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from qcf.artifacts import load_result
    from qcf.evaluation import QuantileFit, metric_bundle, rolling_oos
    from qcf.selection import HyperGrid

    panel = _load(args)
    rows = []
    if args.window:
        hyper = HyperGrid.parse(args.grid) if args.grid else (args.r, args.m, args.ridge)
        for tau in args.tau:
            fit = rolling_oos(panel, args.window, tau, hyper)
            bundle = metric_bundle(fit, panel)
            rows += _metric_rows("rolling_oos", tau, bundle)
            print(f"tau={tau:g} window={args.window} " + " ".join(f"{k}={v:.6g}" for k, v in bundle.as_dict().items()))
    else:
        if not args.fit:
            raise _input_error("evaluate needs --fit or --window")
        res, man = load_result(args.fit)
        bundle = metric_bundle(QuantileFit(res.fitted(panel), res.tau), panel)
        rows += _metric_rows("saved_fit", res.tau, bundle)
        print(" ".join(f"{k}={v:.6g}" for k, v in bundle.as_dict().items()))
    if args.out:
        _write_csv(Path(args.out) / "metrics.csv", ["fit", "tau", "metric", "value"], rows)
    return EXIT_OK


def cmd_infer(args) -> int:
    from qcf.artifacts import load_result
    from qcf.inference import infer_theta

    panel = _load(args)
    res, _ = load_result(args.fit)
    k = args.factor - 1
    if not 0 <= k < res.r:
        raise _input_error(f"--factor must lie in 1..{res.r}")
    inf = infer_theta(res, panel, k, bandwidth_const=args.bandwidth_const, residuals=args.residuals)
    ci = inf.confidence_intervals(args.level)
    names = panel.characteristics or tuple(f"x{j + 1}" for j in range(panel.d))
    rows = [[names[j], *(_num(v) for v in (inf.theta[j], inf.se[j], inf.theta[j] / inf.se[j], ci[j, 0], ci[j, 1]))] for j in range(panel.d)]
    for row in rows:
        print(",".join(row))
    wald_rows = []
    if args.components:
        comps = [c - 1 for c in _ints(args.components)]
        w = inf.wald(comps)
        wald_rows.append([" ".join(names[c] for c in comps), w.dof, _num(w.statistic), _num(w.pvalue)])
        print(f"wald dof={w.dof} statistic={w.statistic:.6g} pvalue={w.pvalue:.6g}")
    if args.out:
        out = Path(args.out)
        _write_csv(out / "theta_inference.csv", ["characteristic", "theta", "se", "t", "ci_low", "ci_high"], rows)
        if wald_rows:
            _write_csv(out / "wald.csv", ["components", "dof", "statistic", "pvalue"], wald_rows)
        (out / "inference.json").write_text(json.dumps({"factor": args.factor, "bandwidth": inf.bandwidth, "n_obs": inf.n_obs, "flags": inf.flags}, indent=2))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from qcf.simulation import DGPConfig, ExperimentSpec, generate_dgp, run_benchmark

    if args.write_panel:
        from qcf.panel import write_panel

        N, T = args.sizes[0]
        panel, _ = generate_dgp(DGPConfig(N=N, T=T, setting=args.setting, seed=args.seed))
        write_panel(panel, args.write_panel)
        print(f"wrote {panel.n_obs} rows to {args.write_panel}")
        return EXIT_OK
    if args.config:
        spec = ExperimentSpec.from_config(args.config)
    else:
        cells = tuple((tau, n, t) for tau in args.tau for n, t in args.sizes)
        spec = ExperimentSpec(cells=cells, setting=args.setting, reps=args.reps, select_reps=min(args.select_reps, args.reps),
                              models=tuple(args.models.split(",")), grid=args.grid, seed=args.seed, jobs=args.jobs)
    result = run_benchmark(spec)
    result.write(args.out)
    for row in result.summary():
        print(",".join(str(row[k]) for k in ("tau", "N", "T", "model", "reps", "in_aqe", "oos_aqe", "in_qhe", "oos_qhe")))
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _sizes(text: str):
    out = []
    for part in text.split(","):
        n, _, t = part.strip().lower().partition("x")
        out.append((int(n), int(t)))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qcf", description="Quantile factor model with single-index characteristic loadings.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, required=True):
        sp.add_argument("--data", required=required, help="long-format CSV panel")
        sp.add_argument("--time-col", default="time")
        sp.add_argument("--id-col", default="id")
        sp.add_argument("--y-col", default="y")
        sp.add_argument("--x-cols", default=None, help="comma-separated characteristic columns (default: all others)")
        sp.add_argument("--standardize", action="store_true", help="z-score each characteristic")

    def hyper_args(sp):
        sp.add_argument("--tau", type=_floats, default=[0.5], help="comma-separated quantile levels")
        sp.add_argument("--r", type=int, default=1)
        sp.add_argument("--m", type=int, default=3)
        sp.add_argument("--ridge", type=float, default=0.0)
        sp.add_argument("--grid", default=None, help="selection grid, e.g. 'r=1,2;m=2,3;ridge=0,1e-3'")

    sp = sub.add_parser("fit", help="fit the model per tau and write artifacts")
    data_args(sp)
    hyper_args(sp)
    sp.add_argument("--strict", action="store_true", help="fail on unidentified index directions")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("select", help="choose (r, m, ridge) by last-period loss")
    data_args(sp)
    hyper_args(sp)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("evaluate", help="metrics for a saved fit or a rolling out-of-sample run")
    data_args(sp)
    hyper_args(sp)
    sp.add_argument("--fit", default=None, help="directory written by 'fit' for a single tau")
    sp.add_argument("--window", type=int, default=None, help="rolling window length")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("infer", help="standard errors and Wald test for an index direction")
    data_args(sp)
    sp.add_argument("--fit", required=True)
    sp.add_argument("--factor", type=int, default=1, help="1-based factor index")
    sp.add_argument("--components", default=None, help="1-based components for a joint Wald test of zero")
    sp.add_argument("--bandwidth-const", type=float, default=1.06)
    sp.add_argument("--residuals", choices=("index", "sieve"), default="index", help="residuals for the kernel density matrix")
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("simulate", help="Monte Carlo benchmark tables or a synthetic panel")
    sp.add_argument("--config", default=None, help="flat key = value experiment file")
    sp.add_argument("--tau", type=_floats, default=[0.05])
    sp.add_argument("--sizes", type=_sizes, default=[(200, 50)], help="comma-separated NxT")
    sp.add_argument("--setting", type=int, default=2, choices=(1, 2))
    sp.add_argument("--reps", type=int, default=50)
    sp.add_argument("--select-reps", type=int, default=50)
    sp.add_argument("--models", default="qcf,qfm")
    sp.add_argument("--grid", default="r=1,2,3;m=2,3,4;ridge=0,1e-3")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--jobs", type=int, default=None, help=f"worker processes (default ${THREADS_ENV} or 1)")
    sp.add_argument("--write-panel", default=None, help="write one synthetic panel CSV and exit")
    sp.add_argument("--out", default="simulation_out")
    sp.set_defaults(func=cmd_simulate)
    return p


def _input_error(msg):
    from qcf.errors import InputError

    return InputError(msg)


def _fail(code: int, exc: BaseException, out) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "error.json").write_text(json.dumps(record, indent=2))
    return code


def main(argv=None) -> int:
    threads = _apply_thread_env()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 0) is None:
        args.jobs = threads or 1
    for tau in getattr(args, "tau", []) or []:
        if not 0.0 < tau < 1.0:
            return _fail(EXIT_INPUT, ValueError(f"tau must lie in (0, 1), got {tau}"), getattr(args, "out", None))

    from qcf.errors import DegenerateEstimationError, InputError

    try:
        return args.func(args)
    except DegenerateEstimationError as exc:
        return _fail(EXIT_DEGENERATE, exc, getattr(args, "out", None))
    except (InputError, FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_INPUT, exc, getattr(args, "out", None))


if __name__ == "__main__":
    sys.exit(main())
