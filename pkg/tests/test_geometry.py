#!/usr/bin/env python3
"""
Test suite for geometry.py

Run with: uv run pytest tests/test_geometry.py -v
"""

from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

from bregman_jko.errors import DomainError, EmptySample, NoConvergence, OutOfDomain, SingularMetric
from bregman_jko.geometry import (
    bregman_cost,
    c_segment,
    c_segment_sweep,
    c_segment_velocity_check,
    check_a1_a2,
    damped_newton,
    dirichlet_log_cost,
    estimate_comparability,
    euclidean_metric,
    gaussian_log_partition_potential,
    hessian_metric,
    induced_metric,
    induced_metric_model,
    mahalanobis_cost,
    metric_compatibility_check,
    polynomial_potential,
    quadratic_cost,
    quadratic_potential,
    quartic_potential,
    scaled_metric,
    shifted_quartic_potential,
)


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


@pytest.fixture
def log_partition():
    return gaussian_log_partition_potential()


def _box_pairs(rng, lows, highs, n=200):
    xs = rng.uniform(lows, highs, size=(n, len(lows)))
    ys = rng.uniform(lows, highs, size=(n, len(lows)))
    return list(zip(xs, ys, strict=True))


def _pairs_for(name, rng):
    """200 random pairs inside the domain of each built-in cost."""
    if name == "log_partition":
        return _box_pairs(rng, [-1.0, -2.0], [1.0, -0.5])
    if name == "dirichlet_log":
        return list(zip(rng.dirichlet([2, 2, 2], 200), rng.dirichlet([2, 2, 2], 200), strict=True))
    return _box_pairs(rng, [-1.0, -1.0], [1.0, 1.0])


BUILT_IN_COSTS = {
    "quadratic": lambda: quadratic_cost(2),
    "bregman_shifted_quartic": lambda: bregman_cost(shifted_quartic_potential(0.3, 1.0, dim=2)),
    "log_partition": lambda: bregman_cost(gaussian_log_partition_potential()),
    "mahalanobis": lambda: mahalanobis_cost(shifted_quartic_potential(0.3, 1.0, dim=2)),
    "dirichlet_log": lambda: dirichlet_log_cost(3),
}


# =============================================================================
# POTENTIAL TESTS
# =============================================================================


class TestPotentials:
    """Tests for the convex potentials and their gradient inverses."""

    def test_quadratic_gradient_is_identity(self):
        phi = quadratic_potential(2)
        x = np.array([0.3, -1.2])
        np.testing.assert_allclose(phi.grad(x), x)
        np.testing.assert_allclose(phi.grad_inverse(x), x)

    def test_quartic_inverse_closed_form(self):
        phi = quartic_potential(1)
        x = np.array([0.7])
        np.testing.assert_allclose(phi.grad_inverse(phi.grad(x)), x, atol=1e-14)

    def test_quartic_hessian_vanishes_at_origin(self):
        assert quartic_potential(1).min_hessian_eigenvalue([0.0]) == 0.0

    def test_newton_inverse_for_polynomial(self):
        phi = shifted_quartic_potential(0.5, 1.0, dim=2)
        x = np.array([0.2, -0.9])
        np.testing.assert_allclose(phi.grad_inverse(phi.grad(x)), x, atol=1e-9)

    def test_shifted_quartic_floor(self):
        phi = shifted_quartic_potential(0.5, 2.0)
        assert phi.min_hessian_eigenvalue([0.5]) == pytest.approx(2.0)

    def test_polynomial_hessian_shape(self):
        phi = polynomial_potential([0.0, 0.0, 1.0], dim=3)
        h = phi.hessian(np.zeros((4, 3)))
        assert h.shape == (4, 3, 3)
        np.testing.assert_allclose(h[0], 2.0 * np.eye(3))

    def test_log_partition_gradient_is_moments(self, log_partition):
        # θ = (m/σ², -1/(2σ²)) maps to (m, m² + σ²)
        m, var = 0.4, 0.25
        theta = np.array([m / var, -1.0 / (2.0 * var)])
        np.testing.assert_allclose(log_partition.grad(theta), [m, m * m + var])
        np.testing.assert_allclose(log_partition.grad_inverse([m, m * m + var]), theta)

    def test_log_partition_fisher_determinant(self, log_partition):
        s = 0.8
        theta = np.array([0.3, -s])
        det = np.linalg.det(log_partition.hessian(theta))
        assert det == pytest.approx(1.0 / (8.0 * s**3))

    def test_log_partition_rejects_positive_theta2(self, log_partition):
        with pytest.raises(DomainError):
            log_partition.phi(np.array([0.0, 0.5]))

    def test_log_partition_inverse_outside_image(self, log_partition):
        with pytest.raises(DomainError):
            log_partition.grad_inverse([1.0, 0.5])


# =============================================================================
# COST IDENTITY TESTS
# =============================================================================


class TestCostIdentities:
    """c(x,x) = 0, c ≥ 0 and ∇_x c(x,x) = 0 on random pairs."""

    @pytest.mark.parametrize("name", sorted(BUILT_IN_COSTS))
    def test_vanishes_on_diagonal(self, name, rng):
        cost = BUILT_IN_COSTS[name]()
        for x, _ in _pairs_for(name, rng):
            assert cost.eval(x, x) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("name", sorted(BUILT_IN_COSTS))
    def test_nonnegative(self, name, rng):
        cost = BUILT_IN_COSTS[name]()
        values = [cost.eval(x, y) for x, y in _pairs_for(name, rng)]
        assert min(values) >= -1e-12

    @pytest.mark.parametrize("name", sorted(BUILT_IN_COSTS))
    def test_gradient_vanishes_on_diagonal(self, name, rng):
        cost = BUILT_IN_COSTS[name]()
        for x, _ in _pairs_for(name, rng)[:50]:
            np.testing.assert_allclose(cost.grad_x(x, x), 0.0, atol=1e-8)

    def test_pairwise_matches_eval(self, rng):
        cost = BUILT_IN_COSTS["bregman_shifted_quartic"]()
        xs = rng.uniform(-1, 1, size=(4, 2))
        ys = rng.uniform(-1, 1, size=(3, 2))
        matrix = cost.pairwise(xs, ys)
        assert matrix.shape == (4, 3)
        assert matrix[2, 1] == pytest.approx(cost.eval(xs[2], ys[1]))

    def test_quadratic_bregman_is_half_squared_distance(self, rng):
        cost = bregman_cost(quadratic_potential(2))
        for x, y in _pairs_for("quadratic", rng)[:20]:
            assert cost.eval(x, y) == pytest.approx(0.5 * np.sum((x - y) ** 2))

    def test_bregman_gradient_in_y(self):
        phi = shifted_quartic_potential(0.3, 1.0)
        cost = bregman_cost(phi)
        x, y = np.array([0.8]), np.array([-0.2])
        h = 1e-6
        numeric = (cost.eval(x, y + h) - cost.eval(x, y - h)) / (2 * h)
        np.testing.assert_allclose(cost.grad_y(x, y), [numeric], rtol=1e-7)

    def test_dirichlet_rejects_off_simplex(self):
        cost = dirichlet_log_cost(3)
        with pytest.raises(DomainError):
            cost.eval([0.5, 0.5, 0.5], [0.2, 0.3, 0.5])
        with pytest.raises(DomainError):
            cost.eval([1.2, -0.1, -0.1], [0.2, 0.3, 0.5])

    def test_dirichlet_needs_two_coordinates(self):
        with pytest.raises(DomainError):
            dirichlet_log_cost(1)

    def test_worked_examples(self):
        assert bregman_cost(quadratic_potential(1)).eval([2.0], [1.0]) == pytest.approx(0.5)
        assert bregman_cost(quartic_potential(1)).eval([2.0], [1.0]) == pytest.approx(11.0)
        assert mahalanobis_cost(quartic_potential(1)).eval([2.0], [1.0]) == pytest.approx(6.0)
        assert quadratic_cost(2).eval([1.0, 1.0], [0.0, 0.0]) == pytest.approx(1.0)
        dirichlet = dirichlet_log_cost(2).eval([0.5, 0.5], [0.25, 0.75])
        assert dirichlet == pytest.approx(-0.5 * np.log(0.75))


# =============================================================================
# INDUCED METRIC TESTS
# =============================================================================


class TestInducedMetric:
    """Tests for induced_metric() and metric_compatibility_check()."""

    def test_bregman_metric_is_hessian(self, rng):
        phi = shifted_quartic_potential(0.3, 1.0, dim=2)
        cost = bregman_cost(phi)
        for x, _ in _pairs_for("quadratic", rng):
            np.testing.assert_allclose(induced_metric(cost, x), phi.hessian(x), atol=1e-8)

    def test_log_partition_metric_is_fisher(self, log_partition):
        cost = bregman_cost(log_partition)
        theta = np.array([0.2, -0.7])
        np.testing.assert_allclose(induced_metric(cost, theta), log_partition.hessian(theta))

    def test_mahalanobis_metric_is_hessian(self):
        phi = shifted_quartic_potential(0.3, 1.0)
        x = np.array([0.6])
        np.testing.assert_allclose(
            induced_metric(mahalanobis_cost(phi), x), phi.hessian(x), rtol=1e-5
        )

    def test_quartic_metric_singular_at_origin(self):
        with pytest.raises(SingularMetric):
            induced_metric(bregman_cost(quartic_potential(1)), [0.0])

    @pytest.mark.parametrize("name", ["quadratic", "bregman_shifted_quartic", "mahalanobis"])
    def test_compatibility(self, name):
        cost = BUILT_IN_COSTS[name]()
        assert metric_compatibility_check(cost, [0.4, -0.3]) < 1e-5

    def test_compatibility_on_simplex(self):
        assert metric_compatibility_check(dirichlet_log_cost(3), [0.2, 0.3, 0.5]) < 1e-4

    @pytest.mark.parametrize("point", [[0.6, 0.3, 0.1], [1 / 3, 1 / 3, 1 / 3], [0.05, 0.15, 0.8]])
    def test_compatibility_on_simplex_at_several_points(self, point):
        assert metric_compatibility_check(dirichlet_log_cost(3), point) < 1e-4

    def test_compatibility_checks_y_derivative(self):
        cost = bregman_cost(shifted_quartic_potential(0.3, 1.0, dim=2))
        phi = cost.potential
        flipped = replace(
            cost, grad_y_fn=lambda x, y: np.einsum("...ij,...j->...i", phi.hessian(y), x - y)
        )
        assert metric_compatibility_check(cost, [0.6, -0.5]) < 1e-5
        assert metric_compatibility_check(flipped, [0.6, -0.5]) > 0.5


class TestCheckA1A2:
    """Tests for check_a1_a2()."""

    def test_quadratic_ok_and_implied(self, rng):
        report = check_a1_a2(quadratic_cost(2), _pairs_for("quadratic", rng)[:20])
        assert report.ok
        assert report.a1_status == "implied"
        assert report.determinants[0] == pytest.approx(1.0)

    def test_quartic_flags_origin(self):
        cost = bregman_cost(quartic_potential(1))
        report = check_a1_a2(cost, [([0.5], [0.5]), ([0.3], [0.0])])
        assert report.flagged == [1]
        assert report.a1_status == "not verified"

    def test_dirichlet_not_verified(self, rng):
        report = check_a1_a2(dirichlet_log_cost(3), _pairs_for("dirichlet_log", rng)[:5])
        assert report.ok
        assert report.a1_status == "not verified"


# =============================================================================
# C-SEGMENT TESTS
# =============================================================================


class TestCSegment:
    """Tests for c_segment() and its velocity at t = 0."""

    def test_endpoints(self):
        cost = quadratic_cost(2)
        y0, y1 = np.array([0.0, 1.0]), np.array([1.0, 0.0])
        np.testing.assert_array_equal(c_segment(cost, [0.5, 0.5], y0, y1, 0.0), y0)
        np.testing.assert_array_equal(c_segment(cost, [0.5, 0.5], y0, y1, 1.0), y1)

    def test_quadratic_is_straight(self):
        cost = quadratic_cost(2)
        y = c_segment(cost, [0.0, 0.0], [0.0, 1.0], [1.0, 0.0], 0.25)
        np.testing.assert_allclose(y, [0.25, 0.75])

    def test_bregman_interpolates_dual_coordinates(self):
        phi = shifted_quartic_potential(0.2, 1.0)
        cost = bregman_cost(phi)
        y0, y1 = np.array([-0.5]), np.array([0.9])
        y = c_segment(cost, [0.1], y0, y1, 0.3)
        np.testing.assert_allclose(phi.grad(y), 0.7 * phi.grad(y0) + 0.3 * phi.grad(y1), atol=1e-9)

    def test_dirichlet_solves_defining_equation(self):
        cost = dirichlet_log_cost(3)
        x = np.array([0.3, 0.3, 0.4])
        y0, y1 = np.array([0.2, 0.5, 0.3]), np.array([0.5, 0.2, 0.3])
        y = c_segment(cost, x, y0, y1, 0.5)
        assert y.sum() == pytest.approx(1.0)
        target = 0.5 * cost.grad_x(x, y0) + 0.5 * cost.grad_x(x, y1)
        np.testing.assert_allclose(cost.grad_x(x, y), target, atol=1e-7)

    def test_sweep_is_monotone_for_bregman(self):
        cost = bregman_cost(shifted_quartic_potential(0.0, 1.0))
        points = c_segment_sweep(cost, [0.0], [-1.0], [1.0], np.linspace(0.1, 0.9, 5))
        assert np.all(np.diff(points[:, 0]) > 0)

    @pytest.mark.parametrize(
        "cost, x, y",
        [
            (bregman_cost(shifted_quartic_potential(0.5, 1.0)), [0.2], [0.3]),
            (bregman_cost(gaussian_log_partition_potential()), [0.3, -1.0], [0.35, -0.95]),
        ],
        ids=["shifted_quartic", "log_partition"],
    )
    def test_velocity_residual_is_first_order(self, cost, x, y):
        coarse = c_segment_velocity_check(cost, x, y, h=1e-3)
        fine = c_segment_velocity_check(cost, x, y, h=5e-4)
        assert coarse < 1e-4
        assert coarse / fine == pytest.approx(2.0, rel=0.2)

    def test_velocity_exact_for_quadratic(self):
        assert c_segment_velocity_check(quadratic_cost(2), [0.1, 0.2], [0.6, -0.4]) < 1e-10


class TestDampedNewton:
    """Tests for damped_newton() failure modes."""

    def test_solves_cubic(self):
        root = damped_newton(lambda y: y**3 - 8.0, lambda y: np.diag(3 * y**2), np.array([1.0]))
        np.testing.assert_allclose(root, [2.0])

    def test_out_of_domain(self):
        with pytest.raises(OutOfDomain):
            damped_newton(
                lambda y: y + 1.0,
                lambda y: np.eye(1),
                np.array([1.0]),
                in_domain=lambda y: False,
            )

    def test_no_convergence_carries_best(self):
        with pytest.raises(NoConvergence) as info:
            damped_newton(
                lambda y: y**3 - 8.0, lambda y: np.diag(3 * y**2), np.array([1.0]), max_iters=1
            )
        assert info.value.best is not None
        assert info.value.iterations == 1


# =============================================================================
# METRIC MODEL TESTS
# =============================================================================


class TestMetricModels:
    """Tests for the metric builders and distances."""

    def test_euclidean(self):
        metric = euclidean_metric(2)
        assert metric.dist_sq([0.0, 0.0], [3.0, 4.0]) == pytest.approx(25.0)

    def test_scaled(self):
        metric = scaled_metric(2.0, 1)
        assert metric.pairwise_dist_sq([[0.0], [1.0]], [[2.0]])[0, 0] == pytest.approx(8.0)

    def test_scaled_rejects_nonpositive(self):
        with pytest.raises(SingularMetric):
            scaled_metric(0.0)

    def test_hessian_1d_is_exact_arclength(self):
        # φ = 2x², φ'' = 4, d = 2|x - y|
        metric = hessian_metric(polynomial_potential([0.0, 0.0, 2.0]))
        assert not metric.approximate
        assert metric.dist_sq([-0.5], [0.25]) == pytest.approx(4.0 * 0.75**2)
        pairwise = metric.pairwise_dist_sq([[0.0], [1.0]], [[0.5]])
        np.testing.assert_allclose(pairwise[:, 0], [1.0, 1.0])

    def test_hessian_1d_nonconstant(self):
        # φ'' = 1 + 3x², d(0, 1) = ∫_0^1 √(1 + 3s²) ds
        metric = hessian_metric(shifted_quartic_potential(0.0, 1.0))
        s = np.linspace(0.0, 1.0, 2001)
        expected = integrate.simpson(np.sqrt(1 + 3 * s * s), x=s) ** 2
        assert metric.dist_sq([0.0], [1.0]) == pytest.approx(expected, rel=1e-7)

    def test_hessian_2d_shooting_flat(self):
        metric = hessian_metric(quadratic_potential(2))
        assert metric.approximate
        assert metric.dist_sq([0.0, 0.0], [0.3, 0.4]) == pytest.approx(0.25, rel=1e-6)

    def test_sqrt_det(self):
        metric = hessian_metric(polynomial_potential([0.0, 0.0, 2.0], dim=2))
        np.testing.assert_allclose(metric.sqrt_det(np.zeros((3, 2))), 4.0)

    def test_induced_model_of_quadratic_cost(self):
        metric = induced_metric_model(quadratic_cost(1))
        assert metric.dist_sq([0.2], [0.7]) == pytest.approx(0.25)


# =============================================================================
# COMPARABILITY TESTS
# =============================================================================


class TestComparability:
    """Tests for estimate_comparability()."""

    def test_quadratic_is_one_half(self):
        estimate = estimate_comparability(quadratic_cost(2), euclidean_metric(2), [[0, 1]] * 2, 50)
        assert estimate.lambda_hat == pytest.approx(0.5)
        assert estimate.Lambda_hat == pytest.approx(0.5)
        assert estimate.n_samples == 50

    def test_quartic_degenerates(self):
        cost = bregman_cost(quartic_potential(1))
        estimate = estimate_comparability(cost, euclidean_metric(1), [[-1.0, 1.0]], 500)
        assert estimate.lambda_hat < 0.05 * estimate.Lambda_hat

    def test_deterministic_under_seed(self):
        cost = bregman_cost(shifted_quartic_potential(0.0, 1.0))
        a = estimate_comparability(cost, euclidean_metric(1), [[-1.0, 1.0]], 30, seed=3)
        b = estimate_comparability(cost, euclidean_metric(1), [[-1.0, 1.0]], 30, seed=3)
        assert a.lambda_hat == b.lambda_hat

    def test_too_few_samples(self):
        with pytest.raises(EmptySample):
            estimate_comparability(quadratic_cost(1), euclidean_metric(1), [[0, 1]], 1)
