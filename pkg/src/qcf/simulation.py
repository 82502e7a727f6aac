"""Location-scale simulation design, the iterative quantile factor baseline,
and the replication runner for the AQE/QHE tables."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from qcf.panel import Panel
from qcf.qr import quantile_loss, solve_batch, solve_plain

log = logging.getLogger(__name__)

THETA_TILDE = {
    1: (
        np.array([3, 2, -1, -1, 1, 0.5, 0.5, 0.1, 0.1, 0.1]),
        np.array([2, 2, -1, 1, 0.5, -0.1, 0.1, 0.1, 0.05, 0.05]),
    ),
    2: (
        np.array([3, 2, -1, -1, 1.0]),
        np.array([2, -1, 1, -0.1, 0.1]),
    ),
}


def loading_1(w):
    return np.sin(w)


def loading_2(w):
    return 0.25 + 0.2 * np.cos(w)


@dataclass(frozen=True)
class DGPConfig:
    N: int = 200
    T: int = 50
    setting: int = 2
    seed: int | np.random.SeedSequence | None = 0
    error_scale: float = float(np.sqrt(0.5))
    d: int | None = None

    def __post_init__(self):
        if self.setting not in THETA_TILDE:
            raise ValueError(f"setting must be 1 or 2, got {self.setting}")
        expected = len(THETA_TILDE[self.setting][0])
        if self.d is not None and self.d != expected:
            raise ValueError(f"setting {self.setting} has d={expected}")
        if self.N < 1 or self.T < 2:
            raise ValueError("need N >= 1 and T >= 2")
        if not self.error_scale >= 0:
            raise ValueError("error_scale must be nonnegative")

    @property
    def dim(self) -> int:
        return len(THETA_TILDE[self.setting][0])


def orthonormal_thetas(setting: int) -> tuple[np.ndarray, np.ndarray]:
    t1, t2 = THETA_TILDE[setting]
    theta1 = t1 / np.linalg.norm(t1)
    t2s = t2 - (t2 @ theta1) * theta1
    return theta1, t2s / np.linalg.norm(t2s)


def normalized_factors(f1_raw, f2_raw) -> np.ndarray:
    """Scale f2 to norm sqrt(T), orthogonalize f1 against it, and rescale."""
    T = len(f1_raw)
    f2 = np.sqrt(T) * f2_raw / np.linalg.norm(f2_raw)
    f1s = f1_raw - (f1_raw @ f2 / T) * f2
    f1 = np.sqrt(T) * f1s / np.linalg.norm(f1s)
    return np.column_stack([f1, f2])


@dataclass
class GroundTruth:
    F: np.ndarray  # (T, 2)
    theta1: np.ndarray
    theta2: np.ndarray
    error_scale: float
    index1: np.ndarray = field(repr=False)  # x_it'theta1 aligned with panel rows
    index2: np.ndarray = field(repr=False)

    def error_quantile(self, tau: float) -> float:
        return float(self.error_scale * norm.ppf(tau))

    def active_factors(self, tau: float) -> int:
        return 1 if tau == 0.5 or self.error_scale == 0 else 2

    def quantile_surface(self, panel: Panel, tau: float) -> np.ndarray:
        """True conditional tau-quantile of every observation."""
        f = self.F[panel.time]
        q = f[:, 0] * loading_1(self.index1)
        if self.active_factors(tau) == 2:
            q = q + f[:, 1] * self.error_quantile(tau) * loading_2(self.index2)
        return q


def generate_dgp(cfg: DGPConfig) -> tuple[Panel, GroundTruth]:
    """y_it = f_t1 sin(x'theta1) + f_t2 (0.25 + 0.2 cos(x'theta2)) eps_it."""
    rng = np.random.default_rng(cfg.seed)
    N, T, d = cfg.N, cfg.T, cfg.dim
    F = normalized_factors(rng.standard_normal(T), np.abs(rng.standard_normal(T)))
    theta1, theta2 = orthonormal_thetas(cfg.setting)
    X = rng.standard_normal((T, N, d))
    eps = cfg.error_scale * rng.standard_normal((T, N))
    w1 = X @ theta1
    w2 = X @ theta2
    Y = F[:, [0]] * loading_1(w1) + F[:, [1]] * loading_2(w2) * eps
    tt, ii = np.meshgrid(np.arange(T), np.arange(N), indexing="ij")
    panel = Panel.from_arrays(tt.ravel(), ii.ravel(), Y.ravel(), X.reshape(T * N, d))
    # from_arrays sorts by (period, unit), which is already the row order here
    truth = GroundTruth(F=F, theta1=theta1, theta2=theta2, error_scale=cfg.error_scale, index1=w1.ravel(), index2=w2.ravel())
    return panel, truth


@dataclass
class QFMResult:
    F: np.ndarray  # (T, r)
    Lambda: np.ndarray  # (N, r)
    tau: float
    objective: float
    iterations: int
    converged: bool
    trace: list[float] = field(default_factory=list, repr=False)
    flags: list[str] = field(default_factory=list)

    @property
    def r(self) -> int:
        return self.F.shape[1]

    def fitted(self) -> np.ndarray:
        """N x T matrix of fitted quantiles."""
        return self.Lambda @ self.F.T

    def realize_factor(self, y) -> np.ndarray:
        if self.r == 0:
            return np.zeros(0)
        return solve_plain(self.Lambda, y, self.tau).coefficients


def _normalize_qfm(F, Lam):
    """Rotate so F'F/T = I and Lambda'Lambda is diagonal, descending."""
    T = F.shape[0]
    r = F.shape[1]
    if r == 0:
        return F, Lam
    U, s, Vt = np.linalg.svd(F @ Lam.T, full_matrices=False)
    F = np.sqrt(T) * U[:, :r]
    Lam = Vt[:r].T * (s[:r] / np.sqrt(T))
    lead = np.argmax(np.abs(F), axis=0)
    signs = np.sign(F[lead, np.arange(r)])
    signs[signs == 0] = 1.0
    return F * signs, Lam * signs


def qfm_baseline(Y, r: int, tau: float, max_iter: int = 100, tol: float = 1e-6) -> QFMResult:
    """Iterative quantile regression for the latent quantile factor model.

    Y is N x T. Alternates unit-by-unit regressions of y_i on F and
    period-by-period regressions of y_t on Lambda, starting from principal
    components of Y. Every half-step is an exact minimization, so the
    objective never increases.
    """
    Y = np.asarray(Y, dtype=float)
    N, T = Y.shape
    if r == 0:
        obj = float(quantile_loss(Y, tau).mean())
        return QFMResult(np.zeros((T, 0)), np.zeros((N, 0)), tau, obj, 0, True, [obj])
    if r > min(N, T):
        raise ValueError(f"r={r} exceeds min(N, T)")
    _, _, Vt = np.linalg.svd(Y, full_matrices=False)
    F = np.sqrt(T) * Vt[:r].T
    Lam = np.zeros((N, r))

    def loss(F_, L_):
        return float(quantile_loss(Y - L_ @ F_.T, tau).mean())

    trace = [loss(F, Lam)]
    flags: list[str] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Lam, ok_l = solve_batch(F, Y, tau)
        trace.append(loss(F, Lam))
        F, ok_f = solve_batch(Lam, Y.T, tau)
        trace.append(loss(F, Lam))
        if not (ok_l.all() and ok_f.all()) and "subproblem_not_converged" not in flags:
            flags.append("subproblem_not_converged")
        slack = 1e-9 * (1.0 + trace[-3])
        if (trace[-2] > trace[-3] + slack or trace[-1] > trace[-2] + slack) and "non_monotone" not in flags:
            flags.append("non_monotone")
        if abs(trace[-3] - trace[-1]) <= tol * max(trace[-1], 1e-12):
            converged = True
            break
    if not converged:
        flags.append("not_converged")
    F, Lam = _normalize_qfm(F, Lam)
    return QFMResult(F, Lam, tau, loss(F, Lam), it, converged, trace, flags)


def qfm_rank(Y, tau: float, kmax: int = 5, max_iter: int = 100) -> int:
    """Eigenvalue-ratio choice of the QFM rank from a kmax-factor fit.

    With the normalization F'F/T = I the loading second moments
    diag(Lambda'Lambda/N) play the role of eigenvalues; r is the position of
    the largest ratio between consecutive ones.
    """
    Y = np.asarray(Y, dtype=float)
    kmax = min(kmax, *Y.shape)
    if kmax < 2:
        return max(kmax, 0)
    fit = qfm_baseline(Y, kmax, tau, max_iter=max_iter)
    ev = np.sort(np.sum(fit.Lambda**2, axis=0) / Y.shape[0])[::-1]
    ev = np.maximum(ev, 1e-12 * max(ev[0], 1e-300))
    return int(np.argmax(ev[:-1] / ev[1:]) + 1)


# ---------------------------------------------------------------- benchmark

MODELS = ("qcf", "qcf_noridge", "qfm")


@dataclass
class ExperimentSpec:
    """Cells are (tau, N, T) triples. ``grid`` drives both QCF variants: the
    penalized one searches its positive ridge values, the unpenalized one
    fixes ridge = 0."""

    cells: tuple = ((0.05, 200, 50),)
    setting: int = 2
    reps: int = 50
    select_reps: int = 50
    models: tuple = ("qcf", "qfm")
    grid: object = None
    seed: int = 0
    error_scale: float = float(np.sqrt(0.5))
    qfm_kmax: int = 5
    qfm_r: int | None = None
    jobs: int = 1

    def __post_init__(self):
        from qcf.selection import HyperGrid

        if self.grid is None:
            self.grid = HyperGrid()
        elif isinstance(self.grid, str):
            self.grid = HyperGrid.parse(self.grid)
        self.cells = tuple((float(t), int(n), int(T)) for t, n, T in self.cells)
        self.models = tuple(self.models)
        bad = set(self.models) - set(MODELS)
        if bad:
            raise ValueError(f"unknown models {sorted(bad)}; choose from {MODELS}")
        if self.reps < 1 or self.select_reps < 0:
            raise ValueError("reps must be positive and select_reps nonnegative")

    @classmethod
    def from_config(cls, path) -> "ExperimentSpec":
        """Flat ``key = value`` file; '#' starts a comment.

        Keys: tau (list), sizes (list of NxT), setting, reps, select_reps,
        models (list), grid ('r=..;m=..;ridge=..'), seed, error_scale,
        qfm_kmax, qfm_r, jobs.
        """
        raw: dict[str, str] = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, val = line.partition("=")
                if not sep:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                raw[key.strip()] = val.strip()
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentSpec":
        raw = dict(raw)
        kw: dict = {}
        taus = [float(v) for v in raw.pop("tau", "0.05").split(",")]
        sizes = []
        for s in raw.pop("sizes", "200x50").split(","):
            n, _, t = s.strip().lower().partition("x")
            sizes.append((int(n), int(t)))
        kw["cells"] = tuple((tau, n, t) for tau in taus for n, t in sizes)
        for key, conv in (("setting", int), ("reps", int), ("select_reps", int), ("seed", int),
                          ("error_scale", float), ("qfm_kmax", int), ("qfm_r", int), ("jobs", int)):
            if key in raw:
                kw[key] = conv(raw.pop(key))
        if "models" in raw:
            kw["models"] = tuple(m.strip() for m in raw.pop("models").split(",") if m.strip())
        if "grid" in raw:
            kw["grid"] = raw.pop("grid")
        if raw:
            raise ValueError(f"unknown experiment keys {sorted(raw)}")
        return cls(**kw)


@dataclass
class RepRecord:
    tau: float
    N: int
    T: int
    rep: int
    model: str
    in_aqe: float = np.nan
    in_qhe: float = np.nan
    oos_aqe: float = np.nan
    oos_qhe: float = np.nan
    hyper: tuple = ()
    error: str = ""


def _qcf_rep(train, test_y, test_X, tau, hyper):
    from qcf.estimator import fit_qcf

    r, m, a = hyper
    res = fit_qcf(train, tau, r, m, a)
    q_in = res.fitted(train)
    _, q_out = res.predict(test_y, test_X)
    return q_in, q_out


def _qfm_rep(Y_train, y_test, tau, r):
    fit = qfm_baseline(Y_train, r, tau)
    q_in = fit.fitted()
    q_out = fit.Lambda @ fit.realize_factor(y_test)
    return q_in, q_out


def _hits(y, q, tau):
    return float(abs(np.mean(y < q) - tau)), float(np.mean(quantile_loss(y - q, tau)))


def _model_grid(grid, model):
    from qcf.selection import HyperGrid

    if model == "qcf_noridge":
        return HyperGrid(grid.r, grid.m, (0.0,))
    pos = tuple(a for a in grid.ridge if a > 0)
    return HyperGrid(grid.r, grid.m, pos or grid.ridge)


def run_rep(spec: ExperimentSpec, cell, rep: int, frozen: dict | None, seed_seq) -> list[RepRecord]:
    """One replication of one cell for every model.

    ``frozen`` maps model name to fixed hyperparameters; models missing from
    it are selected on the training periods of this replication.
    """
    from qcf.errors import QCFError
    from qcf.selection import select_hyperparams

    tau, N, T = cell
    panel, _ = generate_dgp(DGPConfig(N=N, T=T, setting=spec.setting, seed=seed_seq, error_scale=spec.error_scale))
    train = panel.select_periods(range(T - 1))
    sl = panel.period_slices()[T - 1]
    y_test, X_test = panel.y[sl], panel.X[sl]
    frozen = frozen or {}
    out = []
    for model in spec.models:
        rec = RepRecord(tau, N, T, rep, model)
        try:
            if model == "qfm":
                Y = train.response_matrix()
                r = frozen.get(model)
                if r is None:
                    r = spec.qfm_r if spec.qfm_r is not None else qfm_rank(Y, tau, spec.qfm_kmax)
                rec.hyper = (int(r),)
                q_in, q_out = _qfm_rep(Y, y_test, tau, int(r))
                y_in = Y
            else:
                hyper = frozen.get(model)
                if hyper is None:
                    sel = select_hyperparams(train, _model_grid(spec.grid, model), tau)
                    hyper = (sel.r, sel.m, sel.ridge)
                rec.hyper = tuple(hyper)
                q_in, q_out = _qcf_rep(train, y_test, X_test, tau, hyper)
                y_in = train.y
            rec.in_qhe, rec.in_aqe = _hits(y_in, q_in, tau)
            rec.oos_qhe, rec.oos_aqe = _hits(y_test, q_out, tau)
        except (QCFError, ValueError, np.linalg.LinAlgError) as exc:
            rec.error = f"{type(exc).__name__}: {exc}"
            log.warning("cell %s rep %d model %s failed: %s", cell, rep, model, exc)
        out.append(rec)
    return out


def _freeze(records: list[RepRecord], models) -> dict:
    from qcf.selection import frozen_hyperparams

    frozen = {}
    for model in models:
        hs = [r.hyper for r in records if r.model == model and not r.error and r.hyper]
        if not hs:
            continue
        if model == "qfm":
            frozen[model] = int(np.floor(np.mean([h[0] for h in hs]) + 0.5))
        else:
            frozen[model] = frozen_hyperparams(hs)
    return frozen


def _map(fn, args, jobs):
    if jobs <= 1:
        return [fn(*a) for a in args]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*args)))


@dataclass
class BenchmarkResult:
    spec: ExperimentSpec
    records: list[RepRecord]
    frozen: dict = field(default_factory=dict)

    def summary(self) -> list[dict]:
        """Per (cell, model) means over successful reps."""
        rows = []
        for cell in self.spec.cells:
            for model in self.spec.models:
                recs = [r for r in self.records if (r.tau, r.N, r.T) == cell and r.model == model]
                ok = [r for r in recs if not r.error]
                row = {"tau": cell[0], "N": cell[1], "T": cell[2], "model": model, "reps": len(ok), "failed": len(recs) - len(ok)}
                for key in ("in_aqe", "in_qhe", "oos_aqe", "oos_qhe"):
                    row[key] = float(np.mean([getattr(r, key) for r in ok])) if ok else float("nan")
                rows.append(row)
        return rows

    def table(self, metric: str) -> tuple[list[str], list[list]]:
        """One row per cell, in-sample then out-of-sample columns per model."""
        summ = {(s["tau"], s["N"], s["T"], s["model"]): s for s in self.summary()}
        header = ["tau", "N", "T"]
        header += [f"in_{m}" for m in self.spec.models] + [f"oos_{m}" for m in self.spec.models]
        rows = []
        for cell in self.spec.cells:
            row = list(cell)
            row += [summ[(*cell, m)][f"in_{metric}"] for m in self.spec.models]
            row += [summ[(*cell, m)][f"oos_{metric}"] for m in self.spec.models]
            rows.append(row)
        return header, rows

    def write(self, outdir) -> None:
        import csv
        import json
        from pathlib import Path

        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        for metric in ("aqe", "qhe"):
            header, rows = self.table(metric)
            with open(outdir / f"table_{metric}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
        with open(outdir / "replications.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "N", "T", "rep", "model", "in_aqe", "in_qhe", "oos_aqe", "oos_qhe", "hyper", "error"])
            for r in self.records:
                w.writerow([r.tau, r.N, r.T, r.rep, r.model, r.in_aqe, r.in_qhe, r.oos_aqe, r.oos_qhe, " ".join(map(str, r.hyper)), r.error])
        frozen = {f"{k[0]}/{k[1]}/{k[2]}": v for k, v in self.frozen.items()}
        summary = {"cells": self.summary(), "frozen_hyperparameters": frozen, "setting": self.spec.setting,
                   "reps": self.spec.reps, "select_reps": self.spec.select_reps, "seed": self.spec.seed}
        (outdir / "summary.json").write_text(json.dumps(summary, indent=2, default=list))


def run_benchmark(spec: ExperimentSpec) -> BenchmarkResult:
    """Replicate every cell; select hyperparameters in the first ``select_reps``
    reps, then reuse their rounded average for the rest."""
    root = np.random.SeedSequence(spec.seed)
    cell_seqs = root.spawn(len(spec.cells))
    records: list[RepRecord] = []
    frozen_all = {}
    for cell, cseq in zip(spec.cells, cell_seqs):
        seqs = cseq.spawn(spec.reps)
        n_sel = min(spec.select_reps, spec.reps)
        first = _map(run_rep, [(spec, cell, k, None, seqs[k]) for k in range(n_sel)], spec.jobs)
        recs = [r for batch in first for r in batch]
        frozen = _freeze(recs, spec.models) if n_sel else {}
        if n_sel == 0:
            frozen = None
        rest = _map(run_rep, [(spec, cell, k, frozen, seqs[k]) for k in range(n_sel, spec.reps)], spec.jobs)
        recs += [r for batch in rest for r in batch]
        records.extend(recs)
        frozen_all[cell] = frozen or {}
        log.info("cell %s done: %d records", cell, len(recs))
    return BenchmarkResult(spec, records, frozen_all)
