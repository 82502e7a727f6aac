"""Quantile regression with an optional ridge penalty.

Minimizes ``(1/n_norm) * sum_i rho_tau(y_i - x_i'psi) + (ridge/2) * ||psi||^2``
with a Mehrotra predictor-corrector primal-dual interior point method on the
linear/quadratic program

    min  tau 1'u + (1 - tau) 1'v + (c/2) ||psi||^2
    s.t. X psi + u - v = y,  u, v >= 0,        c = n_norm * ridge.

The equality multiplier ``d`` lives in the box [tau - 1, tau]; at the optimum
it is a subgradient selection of rho_tau at the residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 10_000


def quantile_loss(u, tau: float):
    """Check loss rho_tau(u) = u * (tau - 1{u < 0})."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0))


@dataclass
class QRSolution:
    coefficients: np.ndarray
    objective: float
    iterations: int
    converged: bool
    dual: np.ndarray = field(repr=False)
    kkt_residual: float = np.nan
    flags: list[str] = field(default_factory=list)
    trace: list[float] = field(default_factory=list, repr=False)


def penalized_objective(design, response, tau, psi, ridge=0.0, n_norm=None) -> float:
    n_norm = len(response) if n_norm is None else n_norm
    resid = np.asarray(response) - np.asarray(design) @ psi
    return float(quantile_loss(resid, tau).sum() / n_norm + 0.5 * ridge * psi @ psi)


def kkt_residual(design, response, tau, psi, ridge=0.0, n_norm=None, dual=None, zero_tol=None):
    """Norm of the smallest subgradient of the objective reachable at ``psi``.

    Residuals with |r| <= zero_tol may take any multiplier in [tau-1, tau];
    ``dual`` (if given) supplies the selection for those, clipped to the box.
    Otherwise the selection is chosen by bounded least squares.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    n_norm = len(y) if n_norm is None else n_norm
    r = y - X @ psi
    if zero_tol is None:
        zero_tol = 1e-9 * (1.0 + np.abs(y).max(initial=0.0))
    v = np.where(r > zero_tol, tau, tau - 1.0)
    free = np.abs(r) <= zero_tol
    target = n_norm * ridge * psi - X[~free].T @ v[~free]
    if free.any():
        if dual is not None:
            v[free] = np.clip(dual[free], tau - 1.0, tau)
        else:
            from scipy.optimize import lsq_linear

            sol = lsq_linear(X[free].T, target, bounds=(tau - 1.0, tau))
            v[free] = sol.x
    grad = (X.T @ v - n_norm * ridge * psi) / n_norm
    return float(np.linalg.norm(grad))


def _sym_solver(A):
    """Solver for a symmetric PSD system, escalating jitter when Cholesky fails."""
    top = float(np.abs(np.diag(A)).max()) or 1.0
    for jitter in (0.0, 1e-12, 1e-9, 1e-6):
        try:
            factor = cho_factor(A + jitter * top * np.eye(len(A)) if jitter else A)
            return lambda rhs: cho_solve(factor, rhs)
        except LinAlgError:
            continue
    evals, evecs = np.linalg.eigh(A)
    keep = evals > 1e-12 * evals.max()
    inv = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
    return lambda rhs: evecs @ (inv * (evecs.T @ rhs))


def _max_step(x, dx):
    neg = dx < 0
    if not neg.any():
        return 1.0
    return min(1.0, float(np.min(-x[neg] / dx[neg])))


def solve_penalized(
    design,
    response,
    tau: float,
    ridge: float = 0.0,
    n_norm: float | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> QRSolution:
    """Ridge-penalized quantile regression (``ridge=0`` gives plain QR).

    ``n_norm`` is the loss normalizer; it defaults to the number of rows.
    Convergence requires the KKT residual to fall below
    ``tol * (1 + max|y|)``.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float).ravel()
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if n < 1 or p < 1 or y.shape[0] != n:
        raise ValueError(f"design {X.shape} incompatible with response {y.shape}")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if not (np.isfinite(ridge) and ridge >= 0):
        raise ValueError(f"ridge must be finite and nonnegative, got {ridge}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("design and response must be finite")
    n_norm = float(n if n_norm is None else n_norm)
    c = n_norm * ridge
    flags: list[str] = []

    if c == 0.0:
        rank = np.linalg.matrix_rank(X)
        if rank < p:
            flags.append("non_unique")
    scale = 1.0 + float(np.abs(y).max())
    threshold = tol * scale

    # reference scale for the regularizing jitter on singular normal equations
    gram_diag = float(np.einsum("ij,ij->j", X, X).max()) + 1.0

    psi = np.zeros(p)
    r = y.copy()
    u = np.maximum(r, 0.0) + 1.0
    v = np.maximum(-r, 0.0) + 1.0
    d = np.full(n, tau - 0.5)
    # slacks of the multiplier box, tracked directly to keep them strictly positive
    zu = np.full(n, 0.5)
    zv = np.full(n, 0.5)

    def objective(ps):
        return penalized_objective(X, y, tau, ps, ridge, n_norm)

    best_psi = psi.copy()
    best_obj = objective(psi)
    trace = [best_obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r1 = X.T @ d - c * psi
        r2 = y - X @ psi - u + v
        mu = (u @ zu + v @ zv) / (2 * n)
        W = u / zu + v / zv
        A = (X.T * (1.0 / W)) @ X
        A[np.diag_indices_from(A)] += c + 1e-13 * gram_diag
        solve = _sym_solver(A)

        def direction(tu, tv):
            g = (tu - u * zu) / zu - (tv - v * zv) / zv
            rhs = r1 + X.T @ ((r2 - g) / W)
            dpsi = solve(rhs)
            dd = (r2 - g - X @ dpsi) / W
            du = (tu - u * zu + u * dd) / zu
            dv = (tv - v * zv - v * dd) / zv
            return dpsi, du, dv, dd

        def steps(du, dv, dd):
            ap = min(_max_step(u, du), _max_step(v, dv))
            ad = min(_max_step(zu, -dd), _max_step(zv, dd))
            return ap, ad

        # predictor
        dpsi, du, dv, dd = direction(np.zeros(n), np.zeros(n))
        ap, ad = steps(du, dv, dd)
        if c > 0:
            ap = ad = min(ap, ad)
        mu_aff = ((u + ap * du) @ (zu - ad * dd) + (v + ap * dv) @ (zv + ad * dd)) / (2 * n)
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        tu = sigma * mu - du * (-dd)
        tv = sigma * mu - dv * dd
        dpsi, du, dv, dd = direction(tu, tv)
        ap, ad = steps(du, dv, dd)
        ap = min(1.0, 0.99995 * ap)
        ad = min(1.0, 0.99995 * ad)
        if c > 0:
            ap = ad = min(ap, ad)
        psi = psi + ap * dpsi
        u = u + ap * du
        v = v + ap * dv
        d = d + ad * dd
        zu = zu - ad * dd
        zv = zv + ad * dd
        if not (np.all(np.isfinite(psi)) and np.all(zu > 0) and np.all(zv > 0)):
            break

        obj = objective(psi)
        if obj < best_obj:
            best_obj, best_psi = obj, psi.copy()
        trace.append(best_obj)

        # complementarity and residuals per observation, in response units
        mu = (u @ zu + v @ zv) / (2 * n)
        pres = np.abs(y - X @ psi - u + v).max() / scale
        dres = np.abs(X.T @ d - c * psi).max() / n
        if mu < 1e-4 * threshold and pres < 1e-4 * threshold and dres < 1e-4 * threshold:
            converged = True
            break

    psi = best_psi
    d = np.clip(d, tau - 1.0, tau)
    if "non_unique" not in flags:
        psi, d, polished = _polish(X, y, tau, psi, d, c, n_norm, scale)
        if polished:
            trace.append(min(trace[-1], objective(psi)))
    kkt = kkt_residual(X, y, tau, psi, ridge, n_norm, dual=d, zero_tol=1e-9 * scale)
    if not converged:
        flags.append("not_converged")
    elif kkt > threshold:
        flags.append("kkt_tolerance")
    return QRSolution(
        coefficients=psi,
        objective=objective(psi),
        iterations=it,
        converged=converged,
        dual=d,
        kkt_residual=kkt,
        flags=flags,
        trace=trace,
    )


def _polish(X, y, tau, psi, d, c, n_norm, scale):
    """Solve the optimality system exactly on a near-zero residual set.

    Observations in the zero set are interpolated exactly and their
    multipliers recovered from stationarity; the rest are fixed at tau or
    tau - 1 by residual sign. With ``c == 0`` the p smallest residuals define
    the vertex; otherwise growing residual thresholds are tried until the
    candidate is self-consistent. A candidate replaces ``psi`` only if its
    objective is no larger.
    """
    n, p = X.shape
    ridge = c / n_norm
    r = np.abs(y - X @ psi)
    base = penalized_objective(X, y, tau, psi, ridge, n_norm)
    if c == 0.0:
        if n < p:
            return psi, d, False
        sets = [np.argsort(r, kind="stable")[:p]]
    else:
        sets = [np.flatnonzero(r <= k * scale) for k in (1e-9, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3)]
    best = None
    seen = set()
    for zero in sets:
        key = tuple(zero)
        if key in seen:
            continue
        seen.add(key)
        out = _vertex_candidate(X, y, tau, psi, c, zero)
        if out is None:
            continue
        cand, v, consistent = out
        new = penalized_objective(X, y, tau, cand, ridge, n_norm)
        if new > base + 1e-12 * (1.0 + abs(base)):
            continue
        if consistent:
            return cand, v, True
        if best is None or new < best[0]:
            best = (new, cand)
    if best is not None:
        return best[1], d, True
    return psi, d, False


def _vertex_candidate(X, y, tau, psi, c, zero):
    n = len(y)
    mask = np.zeros(n, dtype=bool)
    mask[zero] = True
    v = np.where(y - X @ psi > 0, tau, tau - 1.0)
    XZ, XN = X[mask], X[~mask]
    pull = XN.T @ v[~mask]
    try:
        if c == 0.0:
            if np.linalg.cond(XZ) > 1e10:
                return None
            cand = np.linalg.solve(XZ, y[mask])
            vz = np.linalg.solve(XZ.T, -pull)
        elif mask.any():
            vz = np.linalg.lstsq(XZ @ XZ.T, c * y[mask] - XZ @ pull, rcond=None)[0]
            cand = (pull + XZ.T @ vz) / c
        else:
            vz = np.empty(0)
            cand = pull / c
    except np.linalg.LinAlgError:
        return None
    v[mask] = vz
    slack = 1e-9
    rn = y[~mask] - XN @ cand
    consistent = bool(
        np.all((vz >= tau - 1.0 - slack) & (vz <= tau + slack))
        and np.all(np.where(v[~mask] == tau, rn >= 0, rn <= 0))
    )
    return cand, np.clip(v, tau - 1.0, tau), consistent


def solve_plain(design, response, tau: float, **kwargs) -> QRSolution:
    """Unpenalized quantile regression."""
    return solve_penalized(design, response, tau, ridge=0.0, **kwargs)


def solve_batch(design, responses, tau: float, ridge: float = 0.0, n_norm: float | None = None, tol: float = DEFAULT_TOL, max_iter: int = 200):
    """Solve B independent problems sharing one tau (and ridge) at once.

    ``design`` is either a shared (n, p) matrix or a stack (B, n, p);
    ``responses`` is (B, n). Returns (coefficients (B, p), converged (B,)).
    Same interior point iteration as solve_penalized, vectorized over the
    batch; no vertex polishing.
    """
    Y = np.atleast_2d(np.asarray(responses, dtype=float))
    B, n = Y.shape
    X = np.asarray(design, dtype=float)
    shared = X.ndim == 2
    Xb = np.broadcast_to(X, (B,) + X.shape) if shared else X
    p = Xb.shape[2]
    n_norm = float(n if n_norm is None else n_norm)
    c = n_norm * ridge
    scale = 1.0 + np.abs(Y).max(axis=1)
    threshold = tol * scale

    psi = np.zeros((B, p))
    u = np.maximum(Y, 0.0) + 1.0
    v = np.maximum(-Y, 0.0) + 1.0
    d = np.full((B, n), tau - 0.5)
    zu = np.full((B, n), 0.5)
    zv = np.full((B, n), 0.5)
    active = np.ones(B, dtype=bool)
    jitter = 1e-12 * (np.einsum("bij,bij->b", Xb, Xb) / p + 1.0)

    def mv(M, x):  # X @ x per batch
        return np.einsum("bnp,bp->bn", M, x)

    def tmv(M, x):  # X' @ x per batch
        return np.einsum("bnp,bn->bp", M, x)

    def max_step(x, dx):
        ratio = np.where(dx < 0, -x / np.where(dx < 0, dx, -1.0), np.inf)
        return np.minimum(1.0, ratio.min(axis=1))

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Xa = Xb[idx]
        ya, pa, ua, va, da, zua, zva = Y[idx], psi[idx], u[idx], v[idx], d[idx], zu[idx], zv[idx]
        r1 = tmv(Xa, da) - c * pa
        r2 = ya - mv(Xa, pa) - ua + va
        mu = (np.einsum("bn,bn->b", ua, zua) + np.einsum("bn,bn->b", va, zva)) / (2 * n)
        W = ua / zua + va / zva
        A = np.einsum("bnp,bn,bnq->bpq", Xa, 1.0 / W, Xa)
        A[:, np.arange(p), np.arange(p)] += c + jitter[idx, None]

        def direction(tu, tv):
            g = (tu - ua * zua) / zua - (tv - va * zva) / zva
            rhs = r1 + tmv(Xa, (r2 - g) / W)
            try:
                dpsi = np.linalg.solve(A, rhs[..., None])[..., 0]
            except LinAlgError:
                # rank-deficient design somewhere in the batch
                dpsi = np.stack([_sym_solver(A[b])(rhs[b]) for b in range(len(A))])
            dd = (r2 - g - mv(Xa, dpsi)) / W
            du = (tu - ua * zua + ua * dd) / zua
            dv = (tv - va * zva - va * dd) / zva
            return dpsi, du, dv, dd

        def steps(du, dv, dd):
            ap = np.minimum(max_step(ua, du), max_step(va, dv))
            ad = np.minimum(max_step(zua, -dd), max_step(zva, dd))
            if c > 0:
                ap = ad = np.minimum(ap, ad)
            return ap[:, None], ad[:, None]

        zeros = np.zeros_like(ua)
        dpsi, du, dv, dd = direction(zeros, zeros)
        ap, ad = steps(du, dv, dd)
        mu_aff = (np.einsum("bn,bn->b", ua + ap * du, zua - ad * dd) + np.einsum("bn,bn->b", va + ap * dv, zva + ad * dd)) / (2 * n)
        sigma = np.where(mu > 0, (mu_aff / np.where(mu > 0, mu, 1.0)) ** 3, 0.0)[:, None]
        tu = sigma * mu[:, None] + du * dd
        tv = sigma * mu[:, None] - dv * dd
        dpsi, du, dv, dd = direction(tu, tv)
        ap, ad = steps(du, dv, dd)
        ap = np.minimum(1.0, 0.99995 * ap)
        ad = np.minimum(1.0, 0.99995 * ad)
        psi[idx] = pa + ap * dpsi
        u[idx] = ua + ap * du
        v[idx] = va + ap * dv
        d[idx] = da + ad * dd
        zu[idx] = zua - ad * dd
        zv[idx] = zva + ad * dd

        mu = (np.einsum("bn,bn->b", u[idx], zu[idx]) + np.einsum("bn,bn->b", v[idx], zv[idx])) / (2 * n)
        pres = np.abs(Y[idx] - mv(Xa, psi[idx]) - u[idx] + v[idx]).max(axis=1) / scale[idx]
        dres = np.abs(tmv(Xa, d[idx]) - c * psi[idx]).max(axis=1) / n
        th = 1e-4 * threshold[idx]
        done = (mu < th) & (pres < th) & (dres < th)
        broken = ~(np.all(np.isfinite(psi[idx]), axis=1) & (zu[idx] > 0).all(axis=1) & (zv[idx] > 0).all(axis=1))
        active[idx[done | broken]] = False
    converged = ~active
    bad = ~np.all(np.isfinite(psi), axis=1)
    for b in np.flatnonzero(bad):
        # retry numerically broken members one at a time
        sol = solve_penalized(Xb[b], Y[b], tau, ridge=ridge, n_norm=n_norm, tol=tol)
        psi[b] = sol.coefficients
        converged[b] = sol.converged and np.all(np.isfinite(sol.coefficients))
    return psi, converged
