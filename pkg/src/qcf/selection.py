"""Joint choice of (r, m, ridge) by held-out quantile loss in the last period."""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from qcf.errors import DegenerateEstimationError, InputError
from qcf.estimator import estimate_psi, fit_from_psi
from qcf.evaluation import QuantileFit, aqe
from qcf.panel import Panel
from qcf.sieve import build_basis

log = logging.getLogger(__name__)

DEFAULT_R = (1, 2, 3, 4, 5)
DEFAULT_M = (1, 2, 3, 4)
DEFAULT_RIDGE = (0.0, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass(frozen=True)
class HyperGrid:
    r: tuple[int, ...] = DEFAULT_R
    m: tuple[int, ...] = DEFAULT_M
    ridge: tuple[float, ...] = DEFAULT_RIDGE

    def __post_init__(self):
        object.__setattr__(self, "r", tuple(sorted(set(int(v) for v in self.r))))
        object.__setattr__(self, "m", tuple(sorted(set(int(v) for v in self.m))))
        object.__setattr__(self, "ridge", tuple(sorted(set(float(v) for v in self.ridge))))
        if not (self.r and self.m and self.ridge):
            raise InputError("hyperparameter grid must be nonempty in every axis")
        if min(self.r) < 1 or min(self.m) < 1 or min(self.ridge) < 0:
            raise InputError("grid needs r >= 1, m >= 1, ridge >= 0")

    def points(self, d: int):
        """Valid (r, m, ridge) triples in lexicographic order; r <= C(m+d-1, d)."""
        for r, m, a in itertools.product(self.r, self.m, self.ridge):
            if r <= math.comb(m + d - 1, d):
                yield r, m, a

    @classmethod
    def parse(cls, text: str) -> "HyperGrid":
        """'r=1,2,3;m=2,3;ridge=0,1e-3' -> HyperGrid (missing keys keep defaults)."""
        kwargs = {}
        for part in filter(None, (p.strip() for p in text.split(";"))):
            key, _, vals = part.partition("=")
            key = key.strip()
            if key not in ("r", "m", "ridge", "a"):
                raise InputError(f"unknown grid axis {key!r}")
            conv = float if key in ("ridge", "a") else int
            kwargs["ridge" if key == "a" else key] = tuple(conv(v) for v in vals.split(",") if v.strip())
        return cls(**kwargs)


@dataclass
class SelectionResult:
    r: int
    m: int
    ridge: float
    score: float
    scores: dict = field(default_factory=dict, repr=False)
    skipped: list = field(default_factory=list, repr=False)


def holdout_score(result, panel: Panel, period: int) -> float:
    """AQE at one period after realizing the factor from that period's cross-section."""
    sl = panel.period_slices()[period]
    _, q = result.predict(panel.y[sl], panel.X[sl])
    qhat = np.full(panel.n_obs, np.nan)
    qhat[sl] = q
    return aqe(QuantileFit(qhat, result.tau), panel)


def select_hyperparams(panel: Panel, grid: HyperGrid, tau: float) -> SelectionResult:
    """Fit every grid point on periods 1..T-1 and score it at period T.

    Step 1 depends only on (m, ridge) and is shared across r. Ties go to the
    lexicographically smaller (r, m, ridge). Failing grid points are skipped
    with a warning.
    """
    if panel.T < 2:
        raise InputError("selection needs at least two periods")
    train = panel.select_periods(range(panel.T - 1))
    last = panel.T - 1
    psi_cache: dict = {}
    scores: dict = {}
    skipped: list = []
    for r, m, a in grid.points(panel.d):
        try:
            if (m, a) not in psi_cache:
                basis = build_basis(m, panel.d)
                psi_cache[(m, a)] = (basis, *estimate_psi(train, basis, tau, a))
            basis, Psi, step1_flags = psi_cache[(m, a)]
            if r > train.T:
                raise InputError(f"r={r} exceeds the training periods")
            res = fit_from_psi(train, Psi, basis, tau, r, a, step1_flags)
            if m >= 2 and any(f.endswith("theta_unidentified") for f in res.flags):
                raise DegenerateEstimationError("index unidentified")
            score = holdout_score(res, panel, last)
            if not np.isfinite(score):
                raise DegenerateEstimationError("non-finite holdout score")
        except (InputError, DegenerateEstimationError, np.linalg.LinAlgError) as exc:
            warnings.warn(f"grid point r={r} m={m} ridge={a} skipped: {exc}", RuntimeWarning, stacklevel=2)
            skipped.append(((r, m, a), str(exc)))
            continue
        scores[(r, m, a)] = score
    if not scores:
        raise DegenerateEstimationError("every grid point failed")
    best = min(scores, key=lambda k: (scores[k], k))
    log.info("selected r=%d m=%d ridge=%g (score %.6g)", *best, scores[best])
    return SelectionResult(*best, score=scores[best], scores=scores, skipped=skipped)


def frozen_hyperparams(selections) -> tuple[int, int, float]:
    """Rounded-mean (r, m) and mean ridge of earlier selections."""
    sel = list(selections)
    if not sel:
        raise ValueError("no selections to average")
    r = int(np.floor(np.mean([s[0] for s in sel]) + 0.5))
    m = int(np.floor(np.mean([s[1] for s in sel]) + 0.5))
    a = float(np.mean([s[2] for s in sel]))
    return r, m, a
