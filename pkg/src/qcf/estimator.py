"""Three-step estimation: per-period ridge quantile regression on the Hermite
basis, eigen-decomposition of the coefficient matrix, and index recovery
followed by a quantile refit of the loading functions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from qcf.errors import DegenerateEstimationError, InputError
from qcf.factors import FactorEstimate, extract_factors, normalize_signs
from qcf.index import loading_matrix, recover_indices, refit_loadings
from qcf.panel import Panel
from qcf.qr import quantile_loss, solve_penalized, solve_plain
from qcf.sieve import SieveBasis, basis_eval, build_basis

log = logging.getLogger(__name__)


@dataclass
class QCFResult:
    tau: float
    r: int
    m: int
    ridge: float
    basis: SieveBasis = field(repr=False)
    Psi: np.ndarray = field(repr=False)
    factors: FactorEstimate = field(repr=False)
    theta: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    recovery_degree: list = field(default_factory=list)
    b_recovered: np.ndarray | None = field(default=None, repr=False)
    periods: tuple = ()
    flags: list[str] = field(default_factory=list)

    @property
    def F(self) -> np.ndarray:
        return self.factors.F

    @property
    def Gamma(self) -> np.ndarray:
        return self.factors.Gamma

    def loadings(self, X) -> np.ndarray:
        """lambda_hat_k(x'theta_hat_k) for each row of X, shape (n, r)."""
        return loading_matrix(self.b, self.theta, X)

    def fitted(self, panel: Panel) -> np.ndarray:
        """In-sample quantiles f_hat_t' lambda_hat_it for the panel used in fitting."""
        if panel.T != self.F.shape[0]:
            raise InputError("panel periods do not match the fitted factors")
        return np.einsum("nk,nk->n", self.F[panel.time], self.loadings(panel.X))

    def realize_factor(self, y, X) -> np.ndarray:
        """Cross-sectional quantile regression of y on the estimated loadings."""
        L = self.loadings(X)
        return solve_plain(L, y, self.tau).coefficients

    def predict(self, y, X) -> tuple[np.ndarray, np.ndarray]:
        """Post-hoc factor realization for a new cross-section and the implied quantiles."""
        f = self.realize_factor(y, X)
        return f, self.loadings(X) @ f


def estimate_psi(panel: Panel, basis: SieveBasis, tau: float, ridge: float) -> tuple[np.ndarray, list[str]]:
    """Step 1: one penalized quantile regression per period, normalized by sum n_t."""
    H = basis_eval(basis, panel.X)
    Psi = np.zeros((panel.T, basis.M))
    n_norm = panel.n_obs
    flags: set[str] = set()
    for t, sl in enumerate(panel.period_slices()):
        sol = solve_penalized(H[sl], panel.y[sl], tau, ridge=ridge, n_norm=n_norm)
        Psi[t] = sol.coefficients
        for fl in sol.flags:
            flags.add(f"step1_{fl}")
    return Psi, sorted(flags)


def fit_from_psi(
    panel: Panel,
    Psi: np.ndarray,
    basis: SieveBasis,
    tau: float,
    r: int,
    ridge: float = 0.0,
    step1_flags=(),
) -> QCFResult:
    """Steps 2 and 3 given the Step 1 coefficient matrix."""
    if r > basis.M:
        raise InputError(f"r={r} exceeds the basis size M={basis.M}")
    if r > panel.T:
        raise InputError(f"r={r} exceeds the number of periods T={panel.T}")
    flags = list(step1_flags)
    est = extract_factors(Psi, r)
    theta, b_at, degrees, theta_flags = recover_indices(est.Gamma, basis)
    est = normalize_signs(est, theta[:, 0])
    flags.extend(est.flags)
    for k, fl in enumerate(theta_flags):
        flags.extend(f"factor{k + 1}_{f}" for f in fl)
    b, sol = refit_loadings(panel.y, panel.X, est.F[panel.time], theta, basis.m, tau, n_norm=panel.n_obs)
    flags.extend(f"refit_{f}" for f in sol.flags)
    return QCFResult(
        tau=tau,
        r=r,
        m=basis.m,
        ridge=ridge,
        basis=basis,
        Psi=Psi,
        factors=est,
        theta=theta,
        b=b,
        recovery_degree=degrees,
        b_recovered=b_at,
        periods=panel.periods,
        flags=flags,
    )


def fit_qcf(panel: Panel, tau: float, r: int, m: int, ridge: float = 0.0, strict: bool = False) -> QCFResult:
    """Fit the characteristics-augmented quantile factor model at level ``tau``.

    With ``strict`` an unidentified index direction (for m >= 2) raises
    DegenerateEstimationError instead of being flagged.
    """
    if not 0.0 < tau < 1.0:
        raise InputError(f"tau must lie in (0, 1), got {tau}")
    basis = build_basis(m, panel.d)
    Psi, step1_flags = estimate_psi(panel, basis, tau, ridge)
    res = fit_from_psi(panel, Psi, basis, tau, r, ridge, step1_flags)
    if strict and m >= 2 and any(f.endswith("theta_unidentified") for f in res.flags):
        raise DegenerateEstimationError(f"index direction unidentified: {res.flags}")
    log.debug("fitted tau=%s r=%d m=%d ridge=%g flags=%s", tau, r, m, ridge, res.flags)
    return res


def in_sample_loss(result: QCFResult, panel: Panel) -> float:
    return float(quantile_loss(panel.y - result.fitted(panel), result.tau).mean())
