import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial.hermite_e import hermegauss

from oracles import hermite_exact
from qcf.sieve import basis_eval, build_basis, gamma_from_index, hermite_eval, hermite_table


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


class TestHermite:
    def test_constant(self):
        assert hermite_eval(0, 3.7) == 1.0

    def test_h2_root(self):
        assert hermite_eval(2, 1.0) == pytest.approx(0.0, abs=1e-15)

    def test_h3_value(self):
        assert hermite_eval(3, 2.0) == pytest.approx(2 / math.sqrt(6), rel=1e-14)

    @pytest.mark.parametrize("ell", range(11))
    def test_recurrence_matches_exact_polynomial(self, ell):
        for w in np.linspace(-5, 5, 41):
            exact = hermite_exact(ell, float(w))
            got = hermite_eval(ell, w)
            assert abs(got - exact) <= 1e-10 * max(1.0, abs(exact))

    def test_orthonormal_under_gaussian_weight(self):
        nodes, weights = hermegauss(60)
        weights = weights / math.sqrt(2 * math.pi)
        table = hermite_table(9, nodes)  # (60, 9)
        gram = (table * weights[:, None]).T @ table
        np.testing.assert_allclose(gram, np.eye(9), atol=1e-8)

    def test_table_matches_scalar(self):
        w = np.array([-1.3, 0.0, 0.4, 2.2])
        tab = hermite_table(6, w)
        for ell in range(6):
            np.testing.assert_allclose(tab[:, ell], [hermite_eval(ell, v) for v in w], rtol=1e-14)


class TestBasis:
    def test_m3_d2_ordering(self):
        b = build_basis(3, 2)
        assert b.M == 6
        assert [tuple(p) for p in b.indices] == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]

    @pytest.mark.parametrize("m", [1, 2, 5])
    def test_univariate(self, m):
        b = build_basis(m, 1)
        assert [tuple(p) for p in b.indices] == [(k,) for k in range(m)]

    def test_m2_d3_size(self):
        assert build_basis(2, 3).M == math.comb(4, 3) == 4

    @pytest.mark.parametrize("m,d", [(m, d) for m in range(1, 6) for d in range(1, 7)])
    def test_size_blocks_and_grading(self, m, d):
        b = build_basis(m, d)
        assert b.M == math.comb(m + d - 1, d)
        assert sum(math.comb(d + ell - 1, d - 1) for ell in range(m)) == b.M
        assert np.all(np.diff(b.degrees) >= 0)
        for ell in range(m):
            blk = b.indices[b.block(ell)]
            assert len(blk) == b.block_size(ell)
            assert np.all(blk.sum(axis=1) == ell)
            assert len({tuple(p) for p in blk}) == len(blk)
            if ell >= 1:
                lead = b.indices[b.leading_positions(ell)]
                expected = np.zeros((d, d), dtype=int)
                expected[:, 0] = ell - 1
                expected[0, 0] = ell
                expected[np.arange(1, d), np.arange(1, d)] = 1
                np.testing.assert_array_equal(lead, expected)

    def test_invalid_and_oversized(self):
        with pytest.raises(ValueError):
            build_basis(0, 2)
        with pytest.raises(ValueError):
            build_basis(40, 40)


class TestBasisEval:
    def test_origin(self):
        got = basis_eval(build_basis(3, 2), [0.0, 0.0])
        s = 1 / math.sqrt(2)
        np.testing.assert_allclose(got, [1, 0, 0, -s, 0, -s], atol=1e-15)

    def test_constant_only(self):
        np.testing.assert_array_equal(basis_eval(build_basis(1, 4), [0.3, -1, 2, 5]), [1.0])

    def test_linear(self):
        np.testing.assert_allclose(basis_eval(build_basis(2, 2), [1.0, 2.0]), [1, 1, 2])

    def test_product_definition(self):
        rng = np.random.default_rng(0)
        b = build_basis(4, 3)
        x = rng.standard_normal(3)
        H = basis_eval(b, x)
        for k, p in enumerate(b.indices):
            assert H[k] == pytest.approx(math.prod(hermite_eval(int(q), v) for q, v in zip(p, x)), rel=1e-13)

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(1)
        b = build_basis(3, 4)
        X = rng.standard_normal((7, 4))
        np.testing.assert_allclose(basis_eval(b, X), np.array([basis_eval(b, x) for x in X]), rtol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            basis_eval(build_basis(3, 2), [1.0, 2.0, 3.0])


class TestGamma:
    def test_linear_block(self):
        np.testing.assert_allclose(gamma_from_index(build_basis(2, 2), [0, 1], [1, 0]), [0, 1, 0])

    def test_quadratic_block(self):
        g = gamma_from_index(build_basis(3, 2), [0, 0, 2], [0.6, 0.8])
        np.testing.assert_allclose(g[3:], [0.72, math.sqrt(2) * 2 * 0.6 * 0.8, 1.28], rtol=1e-14)
        np.testing.assert_array_equal(g[:3], 0)

    def test_degree_zero_weight(self):
        g = gamma_from_index(build_basis(3, 2), [1.7, 0, 0], unit([1, 1]))
        assert g[0] == 1.7

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            gamma_from_index(build_basis(2, 2), [0, 1], [1.0, 0.1])

    @settings(max_examples=150, deadline=None)
    @given(
        m=st.integers(1, 5),
        d=st.integers(1, 6),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_factorization_identity(self, m, d, seed):
        rng = np.random.default_rng(seed)
        basis = build_basis(m, d)
        b = rng.standard_normal(m)
        theta = unit(rng.standard_normal(d))
        g = gamma_from_index(basis, b, theta)
        X = rng.standard_normal((20, d)) * 1.5
        lhs = basis_eval(basis, X) @ g
        rhs = hermite_table(m, X @ theta) @ b
        assert np.max(np.abs(lhs - rhs)) < 1e-9
