#!/usr/bin/env python3
"""
Test suite for fokker_planck.py

Run with: uv run pytest tests/test_fokker_planck.py -v
"""

import numpy as np
import pytest

from bregman_jko.errors import (
    BoundaryIncompatible,
    DomainError,
    NegativeDensity,
    StabilityViolation,
)
from bregman_jko.fokker_planck import (
    FdSolution,
    SmoothBump,
    TestFunction,
    check_neumann,
    explicit_time_step_bound,
    fd_solve,
    flux_operator,
    heat_cosine_analytic,
    heat_cosine_density,
    ou_analytic,
    stationary_density,
    test_function_dictionary,
    weak_distances,
    weak_residual,
)
from bregman_jko.geometry import scaled_metric
from bregman_jko.measures import (
    gaussian_density,
    l1_distance,
    make_domain,
    mean,
    quadratic_drift,
    uniform_density,
    variance,
    zero_drift,
)


@pytest.fixture
def line():
    return make_domain((0.0, 1.0), 64)


@pytest.fixture
def wide_line():
    return make_domain((-6.0, 6.0), 256)


# =============================================================================
# SOLVER TESTS
# =============================================================================


class TestFluxOperator:
    """Tests for flux_operator()."""

    def test_columns_sum_to_zero(self, line):
        operator = flux_operator(line, quadratic_drift(0.3, 5.0).values(line))
        np.testing.assert_allclose(np.asarray(operator.sum(axis=0)).ravel(), 0.0, atol=1e-9)

    def test_columns_sum_to_zero_2d(self):
        domain = make_domain([(0.0, 1.0), (0.0, 2.0)], (6, 7))
        operator = flux_operator(domain, quadratic_drift([0.5, 1.0]).values(domain))
        np.testing.assert_allclose(np.asarray(operator.sum(axis=0)).ravel(), 0.0, atol=1e-9)

    def test_uniform_is_steady_without_drift(self, line):
        operator = flux_operator(line, np.zeros(line.size))
        np.testing.assert_allclose(operator @ np.ones(line.size), 0.0, atol=1e-9)


class TestFdSolve:
    """Tests for fd_solve()."""

    def test_mass_is_conserved(self, line):
        rho0 = gaussian_density(line, 0.3, 0.01)
        solution = fd_solve(rho0, quadratic_drift(0.6, 4.0), 0.1, 1e-3)
        assert solution.mass_drift < 1e-10
        assert solution.final.masses.sum() == pytest.approx(1.0)

    def test_stored_times(self, line):
        solution = fd_solve(uniform_density(line), zero_drift(), 0.01, 1e-3, store_every=4)
        np.testing.assert_allclose(solution.times, [0.0, 0.004, 0.008, 0.01])
        assert solution.scheme_tag == "implicit-centred"

    def test_dt_shortened_to_hit_t_end(self, line):
        solution = fd_solve(uniform_density(line), zero_drift(), 0.01, 3e-3)
        assert solution.dt == pytest.approx(0.0025)

    def test_piecewise_constant_lookup(self, line):
        solution = fd_solve(heat_cosine_density(line, 0.0), zero_drift(), 0.01, 5e-3)
        assert solution.at(0.0) is solution.densities[0]
        assert solution.at(0.003) is solution.densities[1]
        assert solution.at(0.005) is solution.densities[1]
        with pytest.raises(DomainError):
            solution.at(0.02)

    def test_explicit_above_bound(self, line):
        bound = explicit_time_step_bound(line)
        assert bound == pytest.approx(0.5 / 64**2)
        with pytest.raises(StabilityViolation):
            fd_solve(uniform_density(line), zero_drift(), 0.01, 2.0 * bound, scheme="explicit")

    def test_explicit_bound_in_2d(self):
        domain = make_domain([(0.0, 1.0), (0.0, 1.0)], 10)
        assert explicit_time_step_bound(domain, 2.0) == pytest.approx(0.5 * 0.01 / 4.0)

    def test_explicit_matches_implicit(self, line):
        rho0 = heat_cosine_density(line, 0.0)
        dt = 0.5 * explicit_time_step_bound(line)
        explicit = fd_solve(rho0, zero_drift(), 0.01, dt, scheme="explicit", store_every=1000)
        implicit = fd_solve(rho0, zero_drift(), 0.01, dt, store_every=1000)
        assert l1_distance(explicit.final, implicit.final) < 1e-4

    def test_unknown_scheme(self, line):
        with pytest.raises(DomainError):
            fd_solve(uniform_density(line), zero_drift(), 0.01, 1e-3, scheme="crank-nicolson")

    def test_centred_drift_can_oscillate(self):
        domain = make_domain((0.0, 1.0), 8)
        with pytest.raises(NegativeDensity):
            fd_solve(uniform_density(domain), quadratic_drift(-10.0, 100.0), 10.0, 10.0)

    def test_upwind_stays_positive(self):
        domain = make_domain((0.0, 1.0), 8)
        psi = quadratic_drift(-10.0, 100.0)
        solution = fd_solve(uniform_density(domain), psi, 10.0, 10.0, upwind=True)
        assert solution.scheme_tag == "implicit-upwind"
        assert solution.final.values.min() >= 0.0

    def test_scaled_metric_rescales_time(self, line):
        rho0 = heat_cosine_density(line, 0.0)
        flat = fd_solve(rho0, zero_drift(), 0.01, 1e-4)
        scaled = fd_solve(rho0, zero_drift(), 0.04, 4e-4, metric=scaled_metric(4.0))
        np.testing.assert_allclose(scaled.final.masses, flat.final.masses, atol=1e-12)


class TestAgainstClosedForms:
    """fd_solve() against the heat eigenmode, OU moments and the invariant density."""

    def test_heat_cosine(self):
        domain = make_domain((0.0, 1.0), 128)
        rho0 = heat_cosine_density(domain, 0.0)
        solution = fd_solve(rho0, zero_drift(), 0.05, 1e-5, store_every=10**6)
        exact = heat_cosine_analytic(domain.nodes[:, 0], 0.05)
        assert np.max(np.abs(solution.final.values - exact)) < 1e-3

    def test_heat_cosine_second_order_in_space(self):
        # dt small enough that the spatial error dominates on every grid
        errors = []
        for n in (16, 32, 64):
            domain = make_domain((0.0, 1.0), n)
            rho0 = heat_cosine_density(domain, 0.0)
            solution = fd_solve(rho0, zero_drift(), 0.05, 1e-6, store_every=10**7)
            exact = heat_cosine_analytic(domain.nodes[:, 0], 0.05)
            errors.append(np.max(np.abs(solution.final.values - exact)))
        assert errors[0] / errors[1] == pytest.approx(4.0, rel=0.1)
        assert errors[1] / errors[2] == pytest.approx(4.0, rel=0.1)

    def test_heat_cosine_on_shifted_box(self):
        domain = make_domain((-1.0, 1.0), 64)
        rho0 = heat_cosine_density(domain, 0.0, amplitude=0.8, beta_inv=0.5)
        solution = fd_solve(rho0, zero_drift(), 0.1, 1e-4, beta_inv=0.5, store_every=10**6)
        exact = heat_cosine_density(domain, 0.1, amplitude=0.8, beta_inv=0.5)
        assert l1_distance(solution.final, exact) < 1e-3

    def test_ou_moments(self, wide_line):
        rho0 = gaussian_density(wide_line, 1.0, 0.5)
        solution = fd_solve(rho0, quadratic_drift(), 0.5, 1e-3, store_every=10**6)
        m, v = ou_analytic(1.0, 0.5, 0.5)
        assert mean(solution.final)[0] == pytest.approx(m, abs=1e-3)
        assert variance(solution.final)[0] == pytest.approx(v, abs=2e-3)

    def test_relaxes_to_stationary_density(self, wide_line):
        psi = quadratic_drift(0.5, 2.0)
        rho0 = gaussian_density(wide_line, -1.0, 0.8)
        solution = fd_solve(rho0, psi, 8.0, 0.05, store_every=10**6)
        assert l1_distance(solution.final, stationary_density(wide_line, psi)) < 5e-3


class TestClosedForms:
    """Tests for the closed-form references."""

    def test_ou_limits(self):
        assert ou_analytic(2.0, 0.3, 0.0) == pytest.approx((2.0, 0.3))
        m, v = ou_analytic(2.0, 0.3, 50.0, beta_inv=0.7)
        assert m == pytest.approx(0.0, abs=1e-12)
        assert v == pytest.approx(0.7)

    def test_ou_rejects_degenerate_start(self):
        with pytest.raises(DomainError):
            ou_analytic(0.0, 0.0, 1.0)

    def test_heat_cosine_has_unit_mass(self, line):
        assert heat_cosine_density(line, 0.2).masses.sum() == pytest.approx(1.0)

    def test_stationary_density(self, wide_line):
        rho = stationary_density(wide_line, quadratic_drift(), beta_inv=0.5)
        assert variance(rho)[0] == pytest.approx(0.5, rel=1e-3)


# =============================================================================
# WEAK FORMULATION TESTS
# =============================================================================


class TestTestFunctions:
    """Tests for test_function_dictionary() and check_neumann()."""

    def test_sizes(self, line):
        assert [f.name for f in test_function_dictionary(line)] == ["1", "l0", "l0*l0", "cos0"]
        square = make_domain([(0.0, 1.0), (0.0, 1.0)], 5)
        assert len(test_function_dictionary(square)) == 8

    def test_dictionary_is_neumann(self):
        domain = make_domain([(-1.0, 1.0), (0.0, 3.0)], 6)
        for zeta in test_function_dictionary(domain):
            check_neumann(zeta, domain)

    def test_gradients_match_values(self):
        domain = make_domain([(-1.0, 1.0), (0.0, 3.0)], 6)
        h = 1e-6
        for zeta in test_function_dictionary(domain):
            numeric = np.stack(
                [
                    (zeta.value(domain.nodes + h * e) - zeta.value(domain.nodes - h * e)) / (2 * h)
                    for e in np.eye(2)
                ],
                axis=-1,
            )
            np.testing.assert_allclose(zeta.gradient(domain.nodes), numeric, atol=1e-6)

    def test_plain_coordinate_rejected(self, line):
        zeta = TestFunction("x", lambda x: x[:, 0], lambda x: np.ones_like(x))
        with pytest.raises(BoundaryIncompatible):
            check_neumann(zeta, line)


class TestWeakResidual:
    """Tests for weak_residual() and weak_distances()."""

    def test_bump_profile(self):
        eta = SmoothBump(0.5)
        assert eta(0.0) == pytest.approx(1.0)
        assert eta(0.5) == 0.0
        assert eta(0.7) == 0.0
        assert 0.0 < eta(0.25) < 1.0

    def test_small_on_finite_difference_path(self, line):
        psi = quadratic_drift(0.4, 3.0)
        solution = fd_solve(heat_cosine_density(line, 0.0), psi, 0.1, 1e-4)
        eta = SmoothBump(0.08)
        for zeta in test_function_dictionary(line):
            assert weak_residual(solution, zeta, eta, psi) < 1e-3

    def test_large_for_frozen_path(self, line):
        solution = fd_solve(heat_cosine_density(line, 0.0), zero_drift(), 0.1, 1e-3)
        frozen = FdSolution(
            solution.domain,
            solution.times,
            [solution.densities[0]] * len(solution.times),
            solution.dt,
            "frozen",
        )
        cosine = test_function_dictionary(line)[-1]
        assert weak_residual(frozen, cosine, SmoothBump(0.08), zero_drift()) > 1e-2

    def test_path_too_short(self, line):
        solution = fd_solve(uniform_density(line), zero_drift(), 0.05, 1e-3)
        constant = test_function_dictionary(line)[0]
        with pytest.raises(DomainError):
            weak_residual(solution, constant, SmoothBump(0.1), zero_drift())

    def test_weak_distances(self, line):
        functions = test_function_dictionary(line)
        a, b = heat_cosine_density(line, 0.0), uniform_density(line)
        np.testing.assert_allclose(weak_distances(a, a, functions), 0.0)
        distances = weak_distances(a, b, functions)
        assert distances[0] == pytest.approx(0.0, abs=1e-12)
        assert distances[-1] > 0.1
