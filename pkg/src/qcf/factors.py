"""Latent factors and intermediate loadings from the stacked coefficient matrix."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

TIE_RTOL = 1e-10
RANK_RTOL = 1e-12
SIGN_ATOL = 1e-8


@dataclass(frozen=True)
class FactorEstimate:
    """F (T x r) with F'F/T = I, Gamma (M x r) = Psi'F/T, V the top-r eigenvalues."""

    F: np.ndarray
    Gamma: np.ndarray
    V: np.ndarray
    flags: tuple[str, ...] = field(default=())

    @property
    def r(self) -> int:
        return self.F.shape[1]

    @property
    def T(self) -> int:
        return self.F.shape[0]

    def common_component(self) -> np.ndarray:
        """F Gamma' (T x M), the rank-r fit of Psi."""
        return self.F @ self.Gamma.T


def extract_factors(Psi, r: int) -> FactorEstimate:
    """Eigen-decompose Psi Psi'/T and scale the top-r eigenvectors by sqrt(T).

    The decomposition runs on whichever Gram matrix (T x T or M x M) is
    smaller; both share nonzero eigenvalues. Each column is oriented so its
    largest-magnitude entry is positive.
    """
    Psi = np.asarray(Psi, dtype=float)
    if Psi.ndim != 2:
        raise ValueError("Psi must be a T x M matrix")
    T, M = Psi.shape
    if not 1 <= r <= min(T, M):
        raise ValueError(f"r={r} must lie in 1..min(T, M)={min(T, M)}")
    if not np.all(np.isfinite(Psi)):
        raise ValueError("Psi has non-finite entries")
    flags: list[str] = []

    if T <= M:
        evals, evecs = np.linalg.eigh(Psi @ Psi.T / T)
        order = np.argsort(evals, kind="stable")[::-1]
        evals, evecs = evals[order], evecs[:, order]
        V = evals[:r]
        F = np.sqrt(T) * evecs[:, :r]
    else:
        evals, evecs = np.linalg.eigh(Psi.T @ Psi / T)
        order = np.argsort(evals, kind="stable")[::-1]
        evals, evecs = evals[order], evecs[:, order]
        V = evals[:r]
        F = Psi @ evecs[:, :r]
        norms = np.linalg.norm(F, axis=0)
        safe = norms > 0
        F[:, safe] *= np.sqrt(T) / norms[safe]

    vmax = max(float(evals[0]), 0.0)
    if np.any(V <= RANK_RTOL * max(vmax, 1e-300)):
        flags.append("rank_deficient")
        warnings.warn(f"r={r} exceeds the numerical rank of Psi", RuntimeWarning, stacklevel=2)
    gaps = -np.diff(evals[: min(r + 1, len(evals))])
    if np.any(gaps < TIE_RTOL * max(vmax, 1e-300)):
        flags.append("eigenvalue_tie")
        warnings.warn("near-tied eigenvalues; factor columns are not identified", RuntimeWarning, stacklevel=2)

    lead = np.argmax(np.abs(F), axis=0)
    signs = np.sign(F[lead, np.arange(r)])
    signs[signs == 0] = 1.0
    F = F * signs
    Gamma = Psi.T @ F / T
    return FactorEstimate(F=F, Gamma=Gamma, V=V.copy(), flags=tuple(flags))


def normalize_signs(est: FactorEstimate, theta_first) -> FactorEstimate:
    """Negate (F, Gamma) columns whose provisional first index entry is negative."""
    theta_first = np.asarray(theta_first, dtype=float)
    if theta_first.shape != (est.r,):
        raise ValueError(f"need one provisional entry per factor ({est.r})")
    flags = list(est.flags)
    if np.any(np.abs(theta_first) < SIGN_ATOL) and "sign_unidentified" not in flags:
        flags.append("sign_unidentified")
    signs = np.where(theta_first < 0, -1.0, 1.0)
    if np.all(signs > 0) and len(flags) == len(est.flags):
        return est
    return replace(est, F=est.F * signs, Gamma=est.Gamma * signs, flags=tuple(flags))
