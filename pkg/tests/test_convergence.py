#!/usr/bin/env python3
"""
End-to-end convergence runs of the JKO scheme against the finite-difference
solver and closed forms.

These take minutes; deselect them with -m "not slow".

Run with: uv run pytest tests/test_convergence.py -v
"""

import numpy as np
import pytest

from bregman_jko.fokker_planck import (
    SmoothBump,
    fd_solve,
    heat_cosine_density,
    ou_analytic,
    test_function_dictionary,
    weak_residual,
)
from bregman_jko.geometry import (
    bregman_cost,
    hessian_metric,
    quadratic_cost,
    shifted_quartic_potential,
)
from bregman_jko.jko import (
    JkoConfig,
    descent_report,
    run_flow,
    telescoping_report,
    time_regularity_report,
)
from bregman_jko.measures import (
    from_function,
    gaussian_density,
    l1_distance,
    make_domain,
    mean,
    quadratic_drift,
    variance,
    zero_drift,
)

pytestmark = pytest.mark.slow

TAUS = (8e-3, 4e-3, 2e-3)
T_END = 0.25
BUMP_SUPPORT = 0.2


def _cosine_start(domain):
    return from_function(domain, lambda x: 1.0 + 0.5 * np.cos(np.pi * x[:, 0]))


def _max_weak_residual(path, domain, psi):
    eta = SmoothBump(BUMP_SUPPORT)
    return max(weak_residual(path, zeta, eta, psi) for zeta in test_function_dictionary(domain))


@pytest.fixture(scope="module")
def heat_runs():
    domain = make_domain((0.0, 1.0), 128)
    rho0 = heat_cosine_density(domain, 0.0)
    oracle = fd_solve(rho0, zero_drift(), T_END, 1e-4, store_every=10**6).final
    cost = quadratic_cost(1)
    runs = {
        tau: run_flow(rho0, JkoConfig(tau=tau, t_end=T_END, cost=cost), el_residuals=False)
        for tau in TAUS
    }
    return domain, oracle, runs


@pytest.fixture(scope="module")
def bregman_runs():
    potential = shifted_quartic_potential(0.5, 1.0)
    domain = make_domain((0.0, 1.0), 128, hessian_metric(potential))
    rho0 = _cosine_start(domain)
    oracle = fd_solve(rho0, zero_drift(), T_END, 1e-4, store_every=10**6).final
    cost = bregman_cost(potential)
    runs = {
        tau: run_flow(rho0, JkoConfig(tau=tau, t_end=T_END, cost=cost), el_residuals=False)
        for tau in TAUS[1:]
    }
    return domain, oracle, runs


# =============================================================================
# HEAT EQUATION
# =============================================================================


class TestHeatConvergence:
    """Quadratic cost, no drift, cosine start on [0, 1]."""

    def test_runs_complete_with_descent(self, heat_runs):
        _, _, runs = heat_runs
        for trajectory in runs.values():
            assert trajectory.complete
            assert descent_report(trajectory).ok

    def test_l1_error_decreases(self, heat_runs):
        _, oracle, runs = heat_runs
        errors = [l1_distance(runs[tau].at(T_END), oracle) for tau in TAUS]
        assert errors[0] >= errors[1] >= errors[2]
        assert errors[-1] < 5e-2

    def test_weak_residual_decreases(self, heat_runs):
        domain, _, runs = heat_runs
        residuals = [_max_weak_residual(runs[tau], domain, zero_drift()) for tau in TAUS]
        assert residuals[0] > residuals[1] > residuals[2]

    def test_telescoping_bound(self, heat_runs):
        _, _, runs = heat_runs
        for trajectory in runs.values():
            report = telescoping_report(trajectory)
            assert report.lhs <= report.rhs + 1e-6
            assert report.max_adjacent <= report.adjacent_bound

    def test_time_regularity_is_stable(self, heat_runs):
        _, _, runs = heat_runs
        coarse = time_regularity_report(runs[4e-3])
        fine = time_regularity_report(runs[2e-3])
        assert coarse.finite and fine.finite
        assert coarse.ratio_to(fine) <= 4.0


# =============================================================================
# ORNSTEIN-UHLENBECK
# =============================================================================


class TestOrnsteinUhlenbeck:
    """Quadratic drift on a truncated line against the closed-form moments."""

    def test_moments_at_unit_time(self):
        domain = make_domain((-6.0, 6.0), 128)
        rho0 = gaussian_density(domain, 1.0, 0.5)
        config = JkoConfig(
            tau=2e-3,
            t_end=1.0,
            cost=quadratic_cost(1),
            psi=quadratic_drift(),
            eps=0.02,
            inner_tol=1e-7,
        )
        trajectory = run_flow(rho0, config, el_residuals=False)
        assert trajectory.complete
        m, v = ou_analytic(1.0, 0.5, 1.0)
        rho = trajectory.at(1.0)
        assert mean(rho)[0] == pytest.approx(m, rel=0.05)
        assert variance(rho)[0] == pytest.approx(v, rel=0.05)

    def test_weak_residual_decreases(self):
        domain = make_domain((-6.0, 6.0), 64)
        rho0 = gaussian_density(domain, 1.0, 0.5)
        psi = quadratic_drift()
        residuals = []
        for tau in (8e-3, 4e-3):
            config = JkoConfig(tau=tau, t_end=T_END, cost=quadratic_cost(1), psi=psi, eps=0.05)
            trajectory = run_flow(rho0, config, el_residuals=False)
            residuals.append(_max_weak_residual(trajectory, domain, psi))
        assert residuals[0] > residuals[1]


# =============================================================================
# BREGMAN COST AGAINST THE HESSIAN METRIC
# =============================================================================


class TestBregmanFlow:
    """Bregman cost of ¼(x - ½)⁴ + ½x² against the Fokker-Planck flow of its Hessian metric."""

    def test_l1_error(self, bregman_runs):
        _, oracle, runs = bregman_runs
        errors = [l1_distance(runs[tau].at(T_END), oracle) for tau in TAUS[1:]]
        assert errors[0] >= errors[1]
        assert errors[1] < 8e-2

    def test_weak_residual_decreases(self, bregman_runs):
        domain, _, runs = bregman_runs
        residuals = [_max_weak_residual(runs[tau], domain, zero_drift()) for tau in TAUS[1:]]
        assert residuals[0] > residuals[1]
