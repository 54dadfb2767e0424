import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from finrom.errors import ConfigError, ConvergenceError, SolverError
from finrom.fem import (
    LINE3_NODES,
    TRI6_NODES,
    NewtonConfig,
    ReferenceElement,
    evaluate_shape,
    extreme_eigs_sym,
    gauss_rule,
    min_singular_value,
    newton_solve,
)

TRI = ReferenceElement("triangle")
LINE = ReferenceElement("line")


def monomial_vandermonde_tri(points):
    """Quadratic monomial basis [1, x, y, x^2, xy, y^2] at the given points."""
    x, y = points[:, 0], points[:, 1]
    return np.stack([np.ones_like(x), x, y, x * x, x * y, y * y], axis=1)


class TestTriangleShapes:
    def test_nodal_property(self):
        vals, _ = TRI.tabulate(TRI6_NODES)
        assert_allclose(vals, np.eye(6), atol=1e-14)

    def test_against_vandermonde_construction(self):
        """Independent route: solve the nodal interpolation system for the
        monomial coefficients of each basis function, then evaluate."""
        coeffs = np.linalg.solve(monomial_vandermonde_tri(TRI6_NODES), np.eye(6))
        rng = np.random.default_rng(7)
        pts = rng.dirichlet([1, 1, 1], size=40)[:, 1:]  # uniform in the triangle
        expected = monomial_vandermonde_tri(pts) @ coeffs
        vals, _ = TRI.tabulate(pts)
        assert_allclose(vals, expected, atol=1e-13)

    def test_gradients_by_finite_difference(self):
        rng = np.random.default_rng(3)
        pts = 0.8 * rng.dirichlet([1, 1, 1], size=10)[:, 1:] + 0.03
        h = 1e-6
        _, grads = TRI.tabulate(pts)
        for axis in range(2):
            dp = np.zeros(2)
            dp[axis] = h
            vp, _ = TRI.tabulate(pts + dp)
            vm, _ = TRI.tabulate(pts - dp)
            assert_allclose(grads[:, :, axis], (vp - vm) / (2 * h), atol=1e-8)

    def test_frozen_point(self):
        # hand-evaluated at (0.2, 0.3): L = (0.5, 0.2, 0.3)
        vals, grads = evaluate_shape(TRI, (0.2, 0.3))
        assert_allclose(vals, [0.0, -0.12, -0.12, 0.4, 0.24, 0.6], atol=1e-15)
        assert_allclose(grads[:, 0], [-1.0, -0.2, 0.0, 1.2, 1.2, -1.2], atol=1e-15)
        assert_allclose(grads[:, 1], [-1.0, 0.0, 0.2, -0.8, 0.8, 0.8], atol=1e-15)

    def test_outside_point_rejected(self):
        with pytest.raises(ValueError):
            evaluate_shape(TRI, (0.7, 0.7))
        with pytest.raises(ValueError):
            evaluate_shape(TRI, (-0.01, 0.5))

    @given(
        st.floats(0.001, 0.999),
        st.floats(0.001, 0.999),
    )
    @settings(max_examples=50, deadline=None)
    def test_partition_of_unity(self, a, b):
        # fold the unit square onto the triangle
        if a + b > 1:
            a, b = 1 - a, 1 - b
        vals, grads = TRI.tabulate(np.array([[a, b]]))
        assert vals.sum() == pytest.approx(1.0, abs=1e-12)
        assert_allclose(grads.sum(axis=1), 0.0, atol=1e-12)


class TestLineShapes:
    def test_nodal_property(self):
        vals, _ = LINE.tabulate(LINE3_NODES[:, None])
        assert_allclose(vals, np.eye(3), atol=1e-14)

    def test_frozen_point(self):
        # hand-evaluated at t = 0.3
        vals, grads = evaluate_shape(LINE, 0.3)
        assert_allclose(vals, [0.28, -0.12, 0.84], atol=1e-15)
        assert_allclose(grads[:, 0], [-1.8, 0.2, 1.6], atol=1e-15)

    def test_partition_of_unity(self):
        t = np.linspace(0, 1, 17)[:, None]
        vals, grads = LINE.tabulate(t)
        assert_allclose(vals.sum(axis=1), 1.0, atol=1e-13)
        assert_allclose(grads.sum(axis=1)[:, 0], 0.0, atol=1e-12)

    def test_reproduces_quadratics(self):
        t = np.linspace(0, 1, 9)
        vals, grads = LINE.tabulate(t[:, None])
        nodal = 3 * LINE3_NODES**2 - LINE3_NODES + 2
        assert_allclose(vals @ nodal, 3 * t**2 - t + 2, atol=1e-13)
        assert_allclose(grads[:, :, 0] @ nodal, 6 * t - 1, atol=1e-12)


class TestQuadrature:
    @pytest.mark.parametrize("order", [2, 4, 6])
    def test_triangle_weights_sum_to_area(self, order):
        rule = gauss_rule(order, "triangle")
        assert rule.weights.sum() == pytest.approx(0.5, abs=1e-14)

    @pytest.mark.parametrize("order", [2, 4, 6])
    def test_triangle_monomial_exactness(self, order):
        """Exact moments on the unit triangle: int x^a y^b = a! b! / (a+b+2)!."""
        rule = gauss_rule(order, "triangle")
        x, y = rule.points[:, 0], rule.points[:, 1]
        for a in range(order + 1):
            for b in range(order + 1 - a):
                exact = (
                    math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
                )
                approx = float(np.sum(rule.weights * x**a * y**b))
                assert approx == pytest.approx(exact, rel=1e-12), (order, a, b)

    def test_triangle_sizes(self):
        assert len(gauss_rule(2, "triangle")) == 3
        assert len(gauss_rule(4, "triangle")) == 6
        assert len(gauss_rule(6, "triangle")) == 12
        # requesting a lower order rounds up to the next available rule
        assert len(gauss_rule(3, "triangle")) == 6

    def test_triangle_order_too_high(self):
        with pytest.raises(ConfigError):
            gauss_rule(7, "triangle")

    @pytest.mark.parametrize("order", range(1, 9))
    def test_line_monomial_exactness(self, order):
        rule = gauss_rule(order, "line")
        assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
        for a in range(order + 1):
            approx = float(np.sum(rule.weights * rule.points**a))
            assert approx == pytest.approx(1.0 / (a + 1), rel=1e-13)

    def test_points_inside_domain(self):
        for order in (2, 4, 6):
            p = gauss_rule(order, "triangle").points
            assert p.min() > 0 and (p.sum(axis=1) < 1).all()
        p = gauss_rule(5, "line").points
        assert p.min() > 0 and p.max() < 1


class TestNewton:
    def test_linear_system_one_iteration(self):
        a = np.array([[2.0, 1.0], [1.0, 3.0]])
        b = np.array([1.0, -2.0])
        res = newton_solve(lambda x: a @ x - b, lambda x: a, np.zeros(2))
        assert res.iters == 1
        assert_allclose(res.x, np.linalg.solve(a, b), atol=1e-12)

    def test_scalar_quadratic_iterates(self):
        """x^2 = 4 from x0 = 3: the first two residual norms are 25/36 and
        625/24336 (iterates 13/6 and 313/156, computed by hand)."""
        res = newton_solve(
            lambda x: np.array([x[0] ** 2 - 4.0]),
            lambda x: np.array([[2.0 * x[0]]]),
            np.array([3.0]),
        )
        assert res.x[0] == pytest.approx(2.0, abs=1e-9)
        assert res.history[1] == pytest.approx(25.0 / 36.0, rel=1e-12)
        assert res.history[2] == pytest.approx(625.0 / 24336.0, rel=1e-12)
        # quadratic convergence: each residual is roughly the square of the last
        assert res.history[3] < res.history[2] ** 2 * 10
        assert res.iters <= 8

    def test_early_exit_at_solution(self):
        res = newton_solve(
            lambda x: np.array([x[0] ** 2 - 4.0]),
            lambda x: np.array([[2.0 * x[0]]]),
            np.array([2.0]),
        )
        assert res.iters == 0
        assert res.x[0] == 2.0

    def test_damping_reduces_overshoot(self):
        # atan has a tiny Newton basin; undamped iteration from 2.0 diverges
        # (|x1| = |2 - atan(2) * 5| > 3), damped Newton still converges
        res = newton_solve(
            lambda x: np.arctan(x),
            lambda x: np.diag(1.0 / (1.0 + x**2)),
            np.array([2.0]),
        )
        assert res.x[0] == pytest.approx(0.0, abs=1e-10)
        assert max(res.history) == res.history[0]

    def test_convergence_error_carries_best(self):
        cfg = NewtonConfig(max_iters=2)
        with pytest.raises(ConvergenceError) as info:
            newton_solve(
                lambda x: np.array([x[0] ** 2 - 4.0]),
                lambda x: np.array([[2.0 * x[0]]]),
                np.array([100.0]),
                cfg,
            )
        err = info.value
        assert err.best is not None and np.isfinite(err.best).all()
        assert len(err.history) == 3
        assert err.history[-1] < err.history[0]

    def test_singular_jacobian(self):
        with pytest.raises(SolverError):
            newton_solve(
                lambda x: np.array([x[0] ** 2 + 1.0]),
                lambda x: np.array([[2.0 * x[0]]]),
                np.array([0.0]),
            )

    def test_rel_tol(self):
        cfg = NewtonConfig(abs_tol=1e-300, rel_tol=1e-3, max_iters=30)
        res = newton_solve(
            lambda x: np.array([x[0] ** 2 - 4.0]),
            lambda x: np.array([[2.0 * x[0]]]),
            np.array([3.0]),
            cfg,
        )
        assert res.history[-1] <= 1e-3 * res.history[0]

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            NewtonConfig(abs_tol=0.0)
        with pytest.raises(ConfigError):
            NewtonConfig(max_iters=0)


class TestMinSingularValue:
    @pytest.mark.parametrize("n", [5, 20, 80, 200])
    def test_matches_eig_of_normal_equations(self, n):
        rng = np.random.default_rng(n)
        a = rng.standard_normal((n, n))
        expected = math.sqrt(np.linalg.eigvalsh(a.T @ a)[0])
        assert min_singular_value(a) == pytest.approx(expected, rel=1e-8)

    def test_sparse_path_matches_dense(self):
        import scipy.sparse as sp

        rng = np.random.default_rng(0)
        a = rng.standard_normal((60, 60)) + 3 * np.eye(60)
        expected = np.linalg.svd(a, compute_uv=False)[-1]
        got = min_singular_value(sp.csr_matrix(a), dense_cutoff=10)
        assert got == pytest.approx(expected, rel=1e-6)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            min_singular_value(np.ones((3, 4)))

    def test_identity(self):
        assert min_singular_value(np.eye(7)) == pytest.approx(1.0)


class TestExtremeEigs:
    def test_matches_eigvalsh(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((40, 40))
        spd = a.T @ a + np.eye(40)
        w = np.linalg.eigvalsh(spd)
        lo, hi = extreme_eigs_sym(spd)
        assert lo == pytest.approx(w[0], rel=1e-10)
        assert hi == pytest.approx(w[-1], rel=1e-10)

    def test_sparse_path(self):
        import scipy.sparse as sp

        d = np.linspace(0.5, 9.5, 300)
        m = sp.diags(d)
        lo, hi = extreme_eigs_sym(m, dense_cutoff=10)
        assert lo == pytest.approx(0.5, rel=1e-6)
        assert hi == pytest.approx(9.5, rel=1e-6)

    def test_indefinite_rejected(self):
        with pytest.raises(SolverError):
            extreme_eigs_sym(-np.eye(4))
