"""Plug-in asymptotic covariance for the index directions and Wald tests.

The density-weighted design matrix of each period is estimated with Powell's
uniform-kernel estimator, and the covariance of sqrt(NT)(theta_hat_k - theta_k)
is assembled observation by observation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm

from qcf.errors import DegenerateEstimationError, InputError
from qcf.index import loading_matrix, recover_b, recover_theta, refit_loadings
from qcf.panel import Panel
from qcf.sieve import SieveBasis, basis_eval

BANDWIDTH_CONST = 1.06


@dataclass
class SigmaEpsH:
    matrix: np.ndarray
    bandwidth: float
    flags: list[str] = field(default_factory=list)


@dataclass
class WaldResult:
    statistic: float
    dof: int
    pvalue: float


def uniform_kernel(u):
    return 0.5 * (np.abs(u) <= 1.0)


def powell_sigma(H_t, residuals, h: float) -> SigmaEpsH:
    """(1/(n_t h)) sum_i H_i H_i' K(e_i / h) with K(u) = 1{|u| <= 1} / 2.

    The 1/h factor makes this a density-weighted Gram matrix; without it the
    estimate shrinks with the bandwidth.
    """
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    H_t = np.asarray(H_t, dtype=float)
    w = uniform_kernel(np.asarray(residuals, dtype=float) / h)
    S = (H_t.T * w) @ H_t / (len(w) * h)
    flags = [] if w.any() else ["zero_kernel_mass"]
    return SigmaEpsH(matrix=S, bandwidth=h, flags=flags)


def default_bandwidth(residuals, const: float = BANDWIDTH_CONST) -> float:
    """c * sd(residuals) * n^(-1/5)."""
    residuals = np.asarray(residuals, dtype=float)
    return float(const * residuals.std() * len(residuals) ** (-0.2))


def _regularized_inverse(S: np.ndarray) -> tuple[np.ndarray, bool]:
    M = S.shape[0]
    try:
        cond = np.linalg.cond(S)
    except np.linalg.LinAlgError:
        cond = np.inf
    if np.isfinite(cond) and cond < 1e12:
        return np.linalg.inv(S), False
    eps = 1e-8 * max(np.trace(S), 1e-300) / M
    return np.linalg.inv(S + eps * np.eye(M)), True


def inversion_scaling(gamma_k, ell: int, basis: SieveBasis) -> np.ndarray:
    """Diagonal of D_{k,ell}: 1/(b theta_1^(ell-1)) then 1/(sqrt(ell) b theta_1^(ell-1))."""
    gamma_k = np.asarray(gamma_k, dtype=float)
    b = recover_b(gamma_k, ell, basis)
    if b == 0.0:
        raise DegenerateEstimationError(f"zero sieve coefficient at degree {ell}")
    lead = gamma_k[basis.leading_positions(ell)][0]
    first = max(lead / b, 0.0) ** (1.0 / ell)
    scale = b * first ** (ell - 1)
    if scale == 0.0:
        raise DegenerateEstimationError("inversion scale is zero")
    D = np.full(basis.d, 1.0 / (np.sqrt(ell) * scale))
    D[0] = 1.0 / scale
    return D


def recovery_jacobian(gamma_k, ell: int, basis: SieveBasis, rel_step: float = 1e-6) -> np.ndarray:
    """d x M derivative of the unit-normalized recovery map at ``gamma_k`` (central differences).

    Unlike D Q this accounts for the estimated b and the final normalization.
    """
    gamma_k = np.asarray(gamma_k, dtype=float)
    step = rel_step * max(np.abs(gamma_k).max(), 1e-12)
    J = np.zeros((basis.d, basis.M))
    blk = basis.block(ell)
    for j in range(blk.start, blk.stop):
        e = np.zeros(basis.M)
        e[j] = step
        J[:, j] = (recover_theta(gamma_k + e, ell, basis)[0] - recover_theta(gamma_k - e, ell, basis)[0]) / (2 * step)
    return J


def theta_covariance(
    panel: Panel,
    F,
    Gamma,
    sigmas,
    k: int,
    ell: int,
    tau: float,
    basis: SieveBasis,
    jacobian: str = "delta",
) -> np.ndarray:
    """Plug-in estimate of the asymptotic covariance of sqrt(NT)(theta_hat_k - theta_k).

    ``sigmas`` holds one M x M matrix (or SigmaEpsH) per period; ``k`` is the
    0-based factor index and ``ell`` the recovery degree used for theta_hat_k.
    ``jacobian="plugin"`` maps gamma to theta with D Q (b held fixed, no
    renormalization); ``"delta"`` uses the derivative of the actual
    recovery map.
    """
    F = np.asarray(F, dtype=float)
    Gamma = np.asarray(Gamma, dtype=float)
    M, r = Gamma.shape
    if F.shape != (panel.T, r):
        raise InputError("F does not match the panel periods and Gamma")
    if len(sigmas) != panel.T:
        raise InputError("need one density matrix per period")
    GtG = Gamma.T @ Gamma
    if np.linalg.cond(GtG) > 1e14:
        raise DegenerateEstimationError("Gamma'Gamma is singular")
    Ginv = np.linalg.inv(GtG)
    if jacobian == "plugin":
        J = np.zeros((basis.d, M))
        J[np.arange(basis.d), basis.leading_positions(ell)] = inversion_scaling(Gamma[:, k], ell, basis)
    elif jacobian == "delta":
        J = recovery_jacobian(Gamma[:, k], ell, basis)
    else:
        raise ValueError(f"unknown jacobian {jacobian!r}")
    H = basis_eval(basis, panel.X)
    acc = np.zeros((basis.d, basis.d))
    for t, sl in enumerate(panel.period_slices()):
        S = sigmas[t].matrix if isinstance(sigmas[t], SigmaEpsH) else np.asarray(sigmas[t])
        Sinv, _ = _regularized_inverse(S)
        f = F[t]
        A = H[sl] @ Sinv  # rows: (Sigma^-1 H_it)'
        C = A @ Gamma  # rows: (Gamma' Sigma^-1 H_it)'
        gf = Ginv @ f
        gk = Ginv[:, k]
        # column k of zeta + zeta'
        Z = np.outer(C[:, k], gf) + f[k] * (C @ Ginv.T) + np.outer(C @ gk, f) + C * (f @ gk)
        vec = A * f[k] + 0.5 * Z @ Gamma.T
        g = vec @ J.T
        acc += g.T @ g
    return tau * (1.0 - tau) * acc / panel.n_obs


def regularization_flags(sigmas) -> list[str]:
    flags = []
    for t, s in enumerate(sigmas):
        S = s.matrix if isinstance(s, SigmaEpsH) else np.asarray(s)
        if _regularized_inverse(S)[1]:
            flags.append(f"period{t}_sigma_regularized")
    return flags


def selection_matrix(components, d: int) -> np.ndarray:
    components = list(components)
    if len(set(components)) != len(components):
        raise InputError("selected components must be distinct")
    S = np.zeros((len(components), d))
    S[np.arange(len(components)), components] = 1.0
    return S


def wald_test(theta_hat, Xi, S, n_obs: int, null=None) -> WaldResult:
    """W = NT (S theta - c)' (S Xi S')^{-1} (S theta - c), chi-square with rank(S) dof.

    ``n_obs`` is NT (sum of n_t for unbalanced panels); ``null`` is c, zero
    by default.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    V = S @ np.asarray(Xi, dtype=float) @ S.T
    if np.linalg.cond(V) > 1e14:
        raise DegenerateEstimationError("S Xi S' is singular")
    st = S @ theta_hat
    if null is not None:
        st = st - np.asarray(null, dtype=float)
    stat = float(n_obs * st @ np.linalg.solve(V, st))
    stat = max(stat, 0.0)
    dof = S.shape[0]
    return WaldResult(statistic=stat, dof=dof, pvalue=float(chi2.sf(stat, dof)))


@dataclass
class ThetaInference:
    factor: int
    theta: np.ndarray
    Xi: np.ndarray
    se: np.ndarray
    n_obs: int
    bandwidth: float
    flags: list[str] = field(default_factory=list)

    def confidence_intervals(self, level: float = 0.95) -> np.ndarray:
        z = norm.ppf(0.5 + level / 2)
        return np.column_stack([self.theta - z * self.se, self.theta + z * self.se])

    def t_statistics(self) -> np.ndarray:
        return self.theta / self.se

    def wald(self, components, null=None) -> WaldResult:
        S = selection_matrix(components, len(self.theta))
        return wald_test(self.theta, self.Xi, S, self.n_obs, null)


def infer_theta(
    result,
    panel: Panel,
    k: int = 0,
    bandwidth: float | None = None,
    bandwidth_const: float = BANDWIDTH_CONST,
    jacobian: str = "delta",
    residuals: str = "index",
    index_terms: int = 6,
) -> ThetaInference:
    """Standard errors for theta_hat_k of a fitted model on its estimation panel.

    ``residuals="sieve"`` uses y - f_t' Gamma' H_it for the kernel weights.
    ``"index"`` instead refits each loading on its estimated index with
    ``index_terms`` Hermite terms, which removes most of the truncation error
    a short tensor sieve leaves in the residuals.
    """
    ell = result.recovery_degree[k]
    if ell is None:
        raise DegenerateEstimationError(f"factor {k + 1} has no identified index")
    basis = result.basis
    H = basis_eval(basis, panel.X)
    if residuals == "sieve":
        fit = np.einsum("nm,nm->n", H, (result.F @ result.Gamma.T)[panel.time])
    elif residuals == "index":
        Frows = result.F[panel.time]
        b_res, _ = refit_loadings(panel.y, panel.X, Frows, result.theta, max(index_terms, result.m), result.tau, n_norm=panel.n_obs)
        fit = np.sum(Frows * loading_matrix(b_res, result.theta, panel.X), axis=1)
    else:
        raise ValueError(f"unknown residuals {residuals!r}")
    resid = panel.y - fit
    h = default_bandwidth(resid, bandwidth_const) if bandwidth is None else float(bandwidth)
    sigmas = [powell_sigma(H[sl], resid[sl], h) for sl in panel.period_slices()]
    flags = [f"period{t}_{f}" for t, s in enumerate(sigmas) for f in s.flags]
    flags += regularization_flags(sigmas)
    if flags:
        warnings.warn(f"density matrix issues: {flags[:3]}{'...' if len(flags) > 3 else ''}", RuntimeWarning, stacklevel=2)
    Xi = theta_covariance(panel, result.F, result.Gamma, sigmas, k, ell, result.tau, basis, jacobian)
    se = np.sqrt(np.clip(np.diag(Xi), 0.0, None) / panel.n_obs)
    return ThetaInference(factor=k, theta=result.theta[k].copy(), Xi=Xi, se=se, n_obs=panel.n_obs, bandwidth=h, flags=flags)
