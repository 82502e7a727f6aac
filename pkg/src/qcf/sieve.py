"""Hermite sieve: univariate evaluation, graded tensor basis, and the
(b, theta) -> gamma factorization map.

Multi-indices of total degree ``ell`` are stored in reverse-lexicographic
order within each degree block, so the block opens with ``(ell, 0, ..., 0)``
followed by ``(ell-1, 1, 0, ...)``, ..., ``(ell-1, 0, ..., 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np

MAX_BASIS_SIZE = 5_000_000


def hermite_eval(ell: int, w):
    """Normalized probabilists' Hermite polynomial h_ell evaluated at ``w``.

    Uses h_{l+1}(w) = (w h_l(w) - sqrt(l) h_{l-1}(w)) / sqrt(l+1), with
    h_0 = 1 and h_1 = w. Accepts scalars or arrays.
    """
    if ell < 0:
        raise ValueError(f"degree must be nonnegative, got {ell}")
    return hermite_table(ell + 1, w)[..., ell]


def hermite_table(m: int, w) -> np.ndarray:
    """Values h_0(w), ..., h_{m-1}(w) stacked along a new trailing axis."""
    w = np.asarray(w, dtype=float)
    out = np.empty(w.shape + (m,), dtype=float)
    out[..., 0] = 1.0
    if m > 1:
        out[..., 1] = w
    for ell in range(1, m - 1):
        out[..., ell + 1] = (w * out[..., ell] - math.sqrt(ell) * out[..., ell - 1]) / math.sqrt(ell + 1)
    return out


def _degree_block(ell: int, d: int) -> Iterator[tuple[int, ...]]:
    # descending lexicographic compositions of ell into d parts
    if d == 1:
        yield (ell,)
        return
    for first in range(ell, -1, -1):
        for rest in _degree_block(ell - first, d - 1):
            yield (first,) + rest


@dataclass(frozen=True)
class SieveBasis:
    """Tensor-product Hermite basis with all multi-indices of degree < m."""

    m: int
    d: int
    indices: np.ndarray = field(repr=False)  # (M, d) int array

    @property
    def M(self) -> int:
        return self.indices.shape[0]

    @cached_property
    def degrees(self) -> np.ndarray:
        return self.indices.sum(axis=1)

    def block_start(self, ell: int) -> int:
        """Position of the first degree-``ell`` index (count of lower-degree ones)."""
        return math.comb(self.d + ell - 1, self.d)

    def block_size(self, ell: int) -> int:
        return math.comb(self.d + ell - 1, self.d - 1)

    def block(self, ell: int) -> slice:
        start = self.block_start(ell)
        return slice(start, start + self.block_size(ell))

    def leading_positions(self, ell: int) -> np.ndarray:
        """The d positions selected by Q_ell: (ell,0,..), (ell-1,1,0,..), ..."""
        if not 1 <= ell < self.m:
            raise ValueError(f"degree {ell} outside 1..{self.m - 1}")
        return self.block_start(ell) + np.arange(self.d)

    def pure_power_positions(self, ell: int) -> np.ndarray:
        """Positions of ell * e_j for j = 1..d."""
        if not 0 <= ell < self.m:
            raise ValueError(f"degree {ell} outside 0..{self.m - 1}")
        blk = self.block(ell)
        sub = self.indices[blk]
        pos = np.empty(self.d, dtype=int)
        for j in range(self.d):
            target = np.zeros(self.d, dtype=int)
            target[j] = ell
            pos[j] = blk.start + int(np.flatnonzero((sub == target).all(axis=1))[0])
        return pos

    @cached_property
    def coefficient_weights(self) -> np.ndarray:
        """sqrt(|p|! / prod p_j!) for every index p."""
        w = np.empty(self.M)
        for k, p in enumerate(self.indices):
            num = math.factorial(int(p.sum()))
            den = math.prod(math.factorial(int(q)) for q in p)
            w[k] = math.sqrt(num // den)
        return w


def build_basis(m: int, d: int) -> SieveBasis:
    if m < 1 or d < 1:
        raise ValueError(f"need m >= 1 and d >= 1, got m={m}, d={d}")
    M = math.comb(m + d - 1, d)
    if M > MAX_BASIS_SIZE:
        raise ValueError(f"basis size C({m + d - 1},{d}) = {M} exceeds {MAX_BASIS_SIZE}")
    rows = [p for ell in range(m) for p in _degree_block(ell, d)]
    indices = np.array(rows, dtype=int).reshape(M, d)
    indices.setflags(write=False)
    return SieveBasis(m=m, d=d, indices=indices)


def basis_eval(basis: SieveBasis, x) -> np.ndarray:
    """H_m(x). ``x`` of shape (d,) gives (M,); shape (n, d) gives (n, M)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[-1] != basis.d:
        raise ValueError(f"expected {basis.d} covariates, got {X.shape[-1]}")
    table = hermite_table(basis.m, X)  # (n, d, m)
    H = np.ones((X.shape[0], basis.M))
    for j in range(basis.d):
        H *= table[:, j, basis.indices[:, j]]
    return H[0] if single else H


def gamma_from_index(basis: SieveBasis, b, theta, atol: float = 1e-10) -> np.ndarray:
    """Intermediate loading coefficients for lambda(w) = sum_l b_l h_l(w) at w = x'theta."""
    b = np.asarray(b, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if b.shape != (basis.m,):
        raise ValueError(f"b must have length m={basis.m}")
    if theta.shape != (basis.d,):
        raise ValueError(f"theta must have length d={basis.d}")
    if abs(np.linalg.norm(theta) - 1.0) > atol:
        raise ValueError(f"theta must be a unit vector (norm {np.linalg.norm(theta):.3e})")
    monomials = np.prod(theta[None, :] ** basis.indices, axis=1)
    return basis.coefficient_weights * b[basis.degrees] * monomials
