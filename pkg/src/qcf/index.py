"""Recovery of index directions and sieve coefficients from gamma, and the
quantile refit of the loading functions on the estimated indices."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from qcf.errors import DegenerateEstimationError
from qcf.qr import QRSolution, solve_plain
from qcf.sieve import SieveBasis, hermite_table

UNIT_TOL = 1e-3
DEGENERATE_RTOL = 1e-8


@dataclass
class IndexEstimate:
    """Per-factor index direction and loading coefficients.

    ``theta`` is (r, d) with unit rows, ``b`` is (m, r) so that
    lambda_k(w) = sum_l b[l, k] h_l(w).
    """

    theta: np.ndarray
    b: np.ndarray
    recovery_degree: list[int | None]
    flags: list[list[str]] = field(default_factory=list)

    @property
    def r(self) -> int:
        return self.theta.shape[0]

    def loadings(self, X) -> np.ndarray:
        return loading_matrix(self.b, self.theta, X)


def recover_b(gamma_k, ell: int, basis: SieveBasis) -> float:
    """Sieve coefficient of degree ``ell`` from the pure-power entries of gamma.

    Returns 0.0 when every pure-power entry vanishes (degenerate degree).
    """
    gamma_k = np.asarray(gamma_k, dtype=float)
    if gamma_k.shape != (basis.M,):
        raise ValueError(f"gamma must have length M={basis.M}")
    if not 1 <= ell < basis.m:
        raise ValueError(f"degree {ell} outside 1..{basis.m - 1}")
    pure = gamma_k[basis.pure_power_positions(ell)]
    if not np.any(pure):
        return 0.0
    # |gamma|^(2/ell) with the sign carried by the first coordinate's entry
    mag = np.sum(np.abs(pure) ** (2.0 / ell)) ** (ell / 2.0)
    return float(np.sign(pure[0]) * mag) if pure[0] != 0 else float(mag)


def recover_theta(gamma_k, ell: int, basis: SieveBasis) -> tuple[np.ndarray, list[str]]:
    """Index direction from the leading d entries of the degree-``ell`` block.

    Returns the unit-normalized direction and a list of flags. Raises
    DegenerateEstimationError when the degree cannot be inverted.
    """
    gamma_k = np.asarray(gamma_k, dtype=float)
    flags: list[str] = []
    b = recover_b(gamma_k, ell, basis)
    if b == 0.0:
        raise DegenerateEstimationError(f"zero sieve coefficient at degree {ell}")
    lead = gamma_k[basis.leading_positions(ell)]
    ratio = lead[0] / b
    if ratio < 0:
        flags.append("negative_base")
        ratio = 0.0
    first = ratio ** (1.0 / ell)
    if ell > 1 and first == 0.0:
        raise DegenerateEstimationError(f"first index entry is zero; degree {ell} not invertible")
    if first < 1e-8:
        flags.append("sign_unidentified")
    scale = b * first ** (ell - 1)
    theta = np.empty(basis.d)
    theta[0] = lead[0] / scale
    theta[1:] = lead[1:] / (np.sqrt(ell) * scale)
    norm = np.linalg.norm(theta)
    if abs(norm - 1.0) > UNIT_TOL:
        flags.append("non_unit")
    return theta / norm, flags


def _degree_scores(gamma_k, basis: SieveBasis) -> np.ndarray:
    gamma_k = np.asarray(gamma_k, dtype=float)
    floor = DEGENERATE_RTOL * max(np.abs(gamma_k).max(initial=0.0), 1e-300)
    scores = np.zeros(basis.m)
    for ell in range(1, basis.m):
        b = abs(recover_b(gamma_k, ell, basis))
        if b <= floor:
            continue
        block = np.linalg.norm(gamma_k[basis.block(ell)])
        pure = np.linalg.norm(gamma_k[basis.pure_power_positions(ell)])
        scores[ell] = b * pure / block if block > 0 else 0.0
    return scores


def choose_recovery_degree(gamma_k, basis: SieveBasis) -> int:
    """Degree with the strongest pure-power signal.

    Score = |b_ell| times the share of the degree-ell block norm carried by the
    pure-power entries. Degrees whose b_ell is below 1e-8 of max|gamma| are
    treated as empty.
    """
    if basis.m < 2:
        raise DegenerateEstimationError("index is unidentified with a constant sieve (m = 1)")
    scores = _degree_scores(gamma_k, basis)
    if not np.any(scores > 0):
        raise DegenerateEstimationError("index unidentifiable: every sieve degree is degenerate")
    return int(np.argmax(scores))


def recover_indices(Gamma, basis: SieveBasis) -> tuple[np.ndarray, np.ndarray, list[int | None], list[list[str]]]:
    """Apply degree selection and inversion to each column of Gamma.

    Returns (theta (r x d), b_ell at the recovery degree (r,), degrees, flags).
    Columns that cannot be inverted get theta = e_1 and a ``theta_unidentified``
    flag; callers decide whether that is fatal.
    """
    Gamma = np.asarray(Gamma, dtype=float)
    r = Gamma.shape[1]
    theta = np.zeros((r, basis.d))
    b_at = np.zeros(r)
    degrees: list[int | None] = []
    flags: list[list[str]] = []
    for k in range(r):
        try:
            ell = choose_recovery_degree(Gamma[:, k], basis)
            th, fl = recover_theta(Gamma[:, k], ell, basis)
            b_at[k] = recover_b(Gamma[:, k], ell, basis)
        except DegenerateEstimationError as exc:
            warnings.warn(f"factor {k + 1}: {exc}", RuntimeWarning, stacklevel=2)
            ell, th, fl = None, np.eye(basis.d)[0], ["theta_unidentified"]
        theta[k] = th
        degrees.append(ell)
        flags.append(fl)
    return theta, b_at, degrees, flags


def index_design(F_rows, theta, X, m: int) -> np.ndarray:
    """Regressors f_{t(k)} h_l(x'theta_k), columns ordered (k, l) with l fastest."""
    F_rows = np.asarray(F_rows, dtype=float)
    W = np.asarray(X, dtype=float) @ np.asarray(theta, dtype=float).T  # (n, r)
    Hk = hermite_table(m, W)  # (n, r, m)
    return (F_rows[:, :, None] * Hk).reshape(len(W), -1)


def refit_loadings(y, X, F_rows, theta, m: int, tau: float, n_norm: float | None = None) -> tuple[np.ndarray, QRSolution]:
    """Joint quantile regression of y on f_{t(k)} h_l(x'theta_k) for all (k, l).

    ``F_rows`` holds the factor row of each observation's period. Returns
    b (m x r) and the solver result.
    """
    Z = index_design(F_rows, theta, X, m)
    sol = solve_plain(Z, y, tau, n_norm=n_norm)
    r = np.asarray(theta).shape[0]
    return sol.coefficients.reshape(r, m).T.copy(), sol


def eval_loading(b_k, theta_k, x):
    """lambda_k(x'theta_k) = sum_l b_l h_l(x'theta_k); x may be (d,) or (n, d)."""
    b_k = np.asarray(b_k, dtype=float)
    w = np.asarray(x, dtype=float) @ np.asarray(theta_k, dtype=float)
    return hermite_table(len(b_k), w) @ b_k


def loading_matrix(b, theta, X) -> np.ndarray:
    """(n, r) matrix of lambda_k(x_i'theta_k)."""
    b = np.asarray(b, dtype=float)
    theta = np.asarray(theta, dtype=float)
    W = np.atleast_2d(np.asarray(X, dtype=float)) @ theta.T
    Hk = hermite_table(b.shape[0], W)  # (n, r, m)
    return np.einsum("nkl,lk->nk", Hk, b)
