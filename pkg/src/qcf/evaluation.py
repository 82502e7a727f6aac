"""Quantile fit metrics (QHE, AQE, R^1 family) and the rolling-window
out-of-sample protocol."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from qcf.errors import InputError
from qcf.panel import Panel
from qcf.qr import quantile_loss

log = logging.getLogger(__name__)


@dataclass
class QuantileFit:
    """Fitted quantiles aligned with the rows of a panel; NaN marks rows without a fit."""

    qhat: np.ndarray
    tau: float

    def __post_init__(self):
        self.qhat = np.asarray(self.qhat, dtype=float)

    def _aligned(self, panel: Panel) -> np.ndarray:
        if self.qhat.shape != (panel.n_obs,):
            raise InputError(f"fit has {self.qhat.shape[0]} rows, panel has {panel.n_obs}")
        mask = ~np.isnan(self.qhat)
        if not mask.any():
            raise InputError("no fitted observations to evaluate")
        return mask


@dataclass
class MetricBundle:
    qhe: float
    aqe: float
    r1_total: float
    r1_timeseries: float
    r1_crosssection: float

    def as_dict(self) -> dict:
        return asdict(self)


def qhe(fit: QuantileFit, panel: Panel) -> float:
    """|share of y strictly below the fitted quantile - tau| over fitted rows."""
    mask = fit._aligned(panel)
    hits = panel.y[mask] < fit.qhat[mask]
    return float(abs(hits.mean() - fit.tau))


def aqe(fit: QuantileFit, panel: Panel) -> float:
    """Mean check loss over fitted rows."""
    mask = fit._aligned(panel)
    return float(quantile_loss(panel.y[mask] - fit.qhat[mask], fit.tau).mean())


def _grouped_r1(groups, loss_fit, loss_null, size):
    num = np.bincount(groups, weights=loss_fit, minlength=size)
    den = np.bincount(groups, weights=loss_null, minlength=size)
    present = np.bincount(groups, minlength=size) > 0
    ok = present & (den > 0)
    if np.any(present & ~ok):
        warnings.warn(f"{int(np.sum(present & ~ok))} slice(s) with zero null loss excluded from R^1", RuntimeWarning, stacklevel=3)
    r1 = np.full(size, np.nan)
    r1[ok] = 1.0 - num[ok] / den[ok]
    counts = np.bincount(groups, minlength=size)
    return r1, counts, ok


def r1_metrics(fit: QuantileFit, panel: Panel) -> tuple[float, float, float]:
    """(Total, Time Series, Cross Section) quantile R^1.

    Unfitted rows count as y = Q = 0 and so drop out of every sum. The time
    series measure weights unit-level R^1 by the number of evaluated periods.
    """
    mask = fit._aligned(panel)
    tau = fit.tau
    y = panel.y[mask]
    lf = quantile_loss(y - fit.qhat[mask], tau)
    l0 = quantile_loss(y, tau)
    den = l0.sum()
    total = 1.0 - lf.sum() / den if den > 0 else np.nan
    r1_i, T_i, ok_i = _grouped_r1(panel.unit[mask], lf, l0, panel.N)
    ts = float(np.sum(T_i[ok_i] * r1_i[ok_i]) / np.sum(T_i[ok_i])) if ok_i.any() else np.nan
    r1_t, _, ok_t = _grouped_r1(panel.time[mask], lf, l0, panel.T)
    cs = float(np.mean(r1_t[ok_t])) if ok_t.any() else np.nan
    return float(total), ts, cs


def metric_bundle(fit: QuantileFit, panel: Panel) -> MetricBundle:
    total, ts, cs = r1_metrics(fit, panel)
    return MetricBundle(qhe(fit, panel), aqe(fit, panel), total, ts, cs)


def rolling_oos(panel: Panel, window_len: int, tau: float, hyper, min_obs: int | None = None) -> QuantileFit:
    """Refit on each trailing window and realize the next period's factors.

    ``hyper`` is either a fixed (r, m, ridge) tuple or a HyperGrid, in which
    case selection runs inside every window. For each window ending at
    period t the model is fitted on periods t-window_len+1..t, the factor
    at t+1 is the cross-sectional quantile regression of y_{t+1} on the
    estimated loadings, and Q_{i,t+1} = f_{t+1}' lambda_{i,t+1}. Loadings use
    the characteristics stored on the t+1 rows.
    """
    from qcf.estimator import fit_qcf
    from qcf.selection import HyperGrid, select_hyperparams

    if window_len < 2:
        raise InputError("window length must be at least 2")
    if panel.T <= window_len:
        raise InputError(f"need more than {window_len} periods, panel has {panel.T}")
    qhat = np.full(panel.n_obs, np.nan)
    slices = panel.period_slices()
    for end in range(window_len - 1, panel.T - 1):
        window = panel.select_periods(range(end - window_len + 1, end + 1))
        target = slices[end + 1]
        if isinstance(hyper, HyperGrid):
            choice = select_hyperparams(window, hyper, tau)
            r, m, a = choice.r, choice.m, choice.ridge
        else:
            r, m, a = hyper
        need = r + 1 if min_obs is None else min_obs
        if target.stop - target.start < need:
            log.warning("period %s skipped: %d observations", panel.periods[end + 1], target.stop - target.start)
            continue
        try:
            res = fit_qcf(window, tau, r, m, a)
        except (InputError, np.linalg.LinAlgError) as exc:
            log.warning("window ending %s skipped: %s", panel.periods[end], exc)
            continue
        _, q = res.predict(panel.y[target], panel.X[target])
        qhat[target] = q
    return QuantileFit(qhat, tau)
