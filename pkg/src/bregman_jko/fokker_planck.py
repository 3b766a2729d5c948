#!/usr/bin/env python3
"""
Reference solutions of the Riemannian Fokker-Planck equation.

    ∂_t ρ = β⁻¹ Δ_g ρ + div_g(ρ ∇_g ψ),  no-flux boundary on a box

The finite-difference solver works on the same cell-centred grid as the
densities. Fluxes live on interior faces, so mass is conserved by
construction and the Neumann condition is exact. Closed forms (heat
eigenmode, Ornstein-Uhlenbeck moments, invariant density) and the weak
formulation residual are used to check both this solver and JKO runs.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import BoundaryIncompatible, DomainError, NegativeDensity, StabilityViolation
from .geometry import TOL_GEOM, MetricModel
from .measures import (
    DiscreteDensity,
    DiscreteDomain,
    DriftPotential,
    integrate_against,
    normalize,
)


logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

TOL_MASS_IMPLICIT = 1e-12
TOL_MASS_EXPLICIT = 1e-10
SCHEMES = ("implicit", "explicit")


# =============================================================================
# FINITE-DIFFERENCE SOLVER
# =============================================================================


@dataclass(frozen=True, eq=False)
class FdSolution:
    """
    Stored states of a finite-difference run.

    ``densities[n]`` is the state at ``times[n]``; between stored times the
    solution is read as piecewise constant, ρ(t) = densities[n] for
    t in (times[n-1], times[n]].

    Attributes:
        mass_drift: Largest |mass - 1| seen before renormalising a stored state
    """

    domain: DiscreteDomain
    times: Array
    densities: list[DiscreteDensity] = field(repr=False)
    dt: float
    scheme_tag: str
    mass_drift: float = 0.0

    @property
    def final(self) -> DiscreteDensity:
        return self.densities[-1]

    def at(self, t: float) -> DiscreteDensity:
        if t < 0 or t > self.times[-1] + 1e-12:
            raise DomainError(f"time {t} outside [0, {self.times[-1]}]")
        index = int(np.searchsorted(self.times, t - 1e-12 * max(1.0, t), side="left"))
        return self.densities[min(index, len(self.densities) - 1)]


def _neighbours(shape: tuple[int, ...], nodes: Array, axis: int) -> tuple[Array, Array, Array]:
    """Indices one step up and down ``axis`` (clamped at the edges) and their index span."""
    multi = np.array(np.unravel_index(nodes, shape))
    up, down = multi.copy(), multi.copy()
    up[axis] = np.minimum(multi[axis] + 1, shape[axis] - 1)
    down[axis] = np.maximum(multi[axis] - 1, 0)
    span = (up[axis] - down[axis]).astype(float)
    return np.ravel_multi_index(up, shape), np.ravel_multi_index(down, shape), span


def flux_operator(
    domain: DiscreteDomain, psi_values: Array, beta_inv: float = 1.0, upwind: bool = False
) -> sparse.csc_matrix:
    """
    Sparse K with dM/dt = K ρ, M the cell masses and ρ the node densities.

    The flux across a face with normal axis a is

        F = |face|·(√g g^{ab})_face·(β⁻¹ ∂_b ρ + ρ ∂_b ψ)

    with face coefficients averaged from the two cells. Normal derivatives are
    two-point differences; tangential ones (2D, non-diagonal metrics) average
    the central differences of the two cells. Each face flux enters one cell
    and leaves the other, so every column of K sums to zero.
    """
    shape, h, size = domain.shape, domain.spacing, domain.size
    index = np.arange(size).reshape(shape)
    coeff = domain.sqrt_det[:, None, None] * np.linalg.inv(domain.metric_at)
    rows: list[Array] = []
    cols: list[Array] = []
    vals: list[Array] = []

    def add(r: Array, c: Array, v: Array) -> None:
        rows.append(r)
        cols.append(c)
        vals.append(np.broadcast_to(v, r.shape).astype(float))

    def add_flux(lower: Array, upper: Array, source: Array, weight: Array) -> None:
        """Flux weight·ρ[source] into ``lower`` and out of ``upper``."""
        add(lower, source, weight)
        add(upper, source, -weight)

    def add_drift(lower: Array, upper: Array, strength: Array) -> None:
        """Flux strength·ρ_face with centred or upwind face density."""
        if upwind:
            add_flux(lower, upper, np.where(strength > 0, upper, lower), strength)
        else:
            add_flux(lower, upper, lower, 0.5 * strength)
            add_flux(lower, upper, upper, 0.5 * strength)

    for a in range(domain.dim):
        if shape[a] < 2:
            continue
        area = float(np.prod(np.delete(h, a)))
        lower = np.take(index, np.arange(shape[a] - 1), axis=a).reshape(-1)
        upper = np.take(index, np.arange(1, shape[a]), axis=a).reshape(-1)

        normal = 0.5 * (coeff[lower, a, a] + coeff[upper, a, a]) * area
        diffusion = beta_inv * normal / h[a]
        add_flux(lower, upper, upper, diffusion)
        add_flux(lower, upper, lower, -diffusion)
        add_drift(lower, upper, normal * (psi_values[upper] - psi_values[lower]) / h[a])

        for b in range(domain.dim):
            if b == a:
                continue
            tangential = 0.5 * (coeff[lower, a, b] + coeff[upper, a, b]) * area
            if not np.any(tangential):
                continue
            dpsi = np.zeros(len(lower))
            for cell in (lower, upper):
                up, down, span = _neighbours(shape, cell, b)
                weight = 0.5 * beta_inv * tangential / (span * h[b])
                add_flux(lower, upper, up, weight)
                add_flux(lower, upper, down, -weight)
                dpsi += 0.5 * (psi_values[up] - psi_values[down]) / (span * h[b])
            add_drift(lower, upper, tangential * dpsi)

    return sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    ).tocsc()


def explicit_time_step_bound(domain: DiscreteDomain, beta_inv: float = 1.0) -> float:
    """dt ≤ ½·h_min² / (dim·β⁻¹·max eigenvalue of g⁻¹)."""
    g_inv = np.linalg.inv(domain.metric_at)
    diffusivity = beta_inv * float(np.max(np.linalg.eigvalsh(g_inv)))
    return 0.5 * float(np.min(domain.spacing)) ** 2 / (domain.dim * diffusivity)


def fd_solve(
    rho0: DiscreteDensity,
    psi: DriftPotential,
    t_end: float,
    dt: float,
    metric: MetricModel | None = None,
    beta_inv: float = 1.0,
    scheme: str = "implicit",
    upwind: bool = False,
    store_every: int = 1,
) -> FdSolution:
    """
    Advance ρ0 to ``t_end`` with the conservative flux-form scheme.

    Args:
        rho0: Initial density
        psi: Drift potential
        t_end: Final time
        dt: Time step; shortened so that a whole number of steps hits t_end
        metric: Metric to solve in; the domain's metric when omitted. A
            different metric keeps the cell masses of rho0.
        beta_inv: Diffusion coefficient
        scheme: "implicit" (backward Euler, one sparse LU) or "explicit"
        upwind: Upwind face densities in the drift flux
        store_every: Keep every n-th state (the final state is always kept)

    Raises:
        StabilityViolation: Explicit scheme with dt above the bound
        NegativeDensity: A state dips below -tol_mass_fd
    """
    if scheme not in SCHEMES:
        raise DomainError(f"unknown scheme {scheme!r}")
    if not t_end > 0 or not dt > 0:
        raise DomainError("t_end and dt must be positive")
    domain = rho0.domain
    if metric is not None and metric is not domain.metric:
        domain = DiscreteDomain(domain.bounds, domain.shape, metric)
        rho0 = DiscreteDensity.from_masses(domain, rho0.masses)

    n_steps = int(math.ceil(t_end / dt - 1e-9))
    dt = t_end / n_steps
    tol = TOL_MASS_IMPLICIT if scheme == "implicit" else TOL_MASS_EXPLICIT
    if scheme == "explicit":
        bound = explicit_time_step_bound(domain, beta_inv)
        if dt > bound:
            raise StabilityViolation(f"explicit step {dt:.3e} exceeds the bound {bound:.3e}")

    weights = domain.vol_weights
    operator = flux_operator(domain, psi.values(domain), beta_inv, upwind)
    solve = None
    if scheme == "implicit":
        solve = splu((sparse.diags(weights) - dt * operator).tocsc()).solve

    rho = rho0.values.copy()
    times, densities = [0.0], [rho0]
    drift = 0.0
    for n in range(1, n_steps + 1):
        if solve is not None:
            rho = solve(weights * rho)
        else:
            rho = rho + dt * (operator @ rho) / weights
        low = float(rho.min())
        if low < -tol:
            raise NegativeDensity(f"density reached {low:.3e} at t = {n * dt:.6g}")
        if n % store_every == 0 or n == n_steps:
            drift = max(drift, abs(float(rho @ weights) - 1.0))
            times.append(n * dt)
            densities.append(normalize(domain, rho))
    if drift > tol * max(1.0, math.sqrt(n_steps)):
        logger.warning("finite-difference mass drifted by %.2e", drift)

    tag = f"{scheme}-{'upwind' if upwind else 'centred'}"
    return FdSolution(domain, np.array(times), densities, dt, tag, drift)


# =============================================================================
# CLOSED FORMS
# =============================================================================


def ou_analytic(
    mean: float, variance: float, t: float, beta_inv: float = 1.0
) -> tuple[float, float]:
    """Moments of the Ornstein-Uhlenbeck flow for ψ = ½x² from a Gaussian start."""
    if variance <= 0:
        raise DomainError(f"variance must be positive, got {variance}")
    decay = math.exp(-t)
    return mean * decay, variance * decay**2 + beta_inv * (1.0 - decay**2)


def heat_cosine_analytic(
    x: ArrayLike,
    t: float,
    amplitude: float = 0.5,
    beta_inv: float = 1.0,
    bounds: tuple[float, float] = (0.0, 1.0),
) -> Array:
    """1 + A·e^{-β⁻¹π²t/L²}·cos(π(x - lo)/L), the Neumann eigenmode solution on [lo, hi]."""
    lo, hi = bounds
    length = hi - lo
    x = np.asarray(x, dtype=float).reshape(-1)
    decay = math.exp(-beta_inv * math.pi**2 * t / length**2)
    return (1.0 + amplitude * decay * np.cos(math.pi * (x - lo) / length)) / length


def heat_cosine_density(
    domain: DiscreteDomain, t: float, amplitude: float = 0.5, beta_inv: float = 1.0
) -> DiscreteDensity:
    lo, hi = domain.bounds[0]
    return normalize(
        domain, heat_cosine_analytic(domain.nodes[:, 0], t, amplitude, beta_inv, (lo, hi))
    )


def stationary_density(
    domain: DiscreteDomain, psi: DriftPotential, beta_inv: float = 1.0
) -> DiscreteDensity:
    """Invariant density ∝ e^{-ψ/β⁻¹} with respect to dVol_g."""
    exponent = -psi.values(domain) / beta_inv
    return normalize(domain, np.exp(exponent - exponent.max()))


# =============================================================================
# TEST FUNCTIONS AND WEAK RESIDUAL
# =============================================================================


@dataclass(frozen=True)
class TestFunction:
    """A smooth ζ on the box with its coordinate gradient."""

    __test__ = False

    name: str
    value: Callable[[Array], Array]
    gradient: Callable[[Array], Array]


@dataclass(frozen=True)
class SmoothBump:
    """η(t) = exp(1 - 1/(1 - (t/T)²)) on [0, T), zero afterwards; η(0) = 1."""

    support: float

    def __call__(self, t: ArrayLike) -> Array:
        s = np.asarray(t, dtype=float) / self.support
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            return np.where(np.abs(s) < 1.0, np.exp(1.0 - 1.0 / (1.0 - s * s)), 0.0)


def _neumann_linear(s: Array) -> tuple[Array, Array]:
    """s - sin(2πs)/2π and its derivative, flat at s = 0 and s = 1."""
    return s - np.sin(2 * np.pi * s) / (2 * np.pi), 1.0 - np.cos(2 * np.pi * s)


def test_function_dictionary(domain: DiscreteDomain) -> list[TestFunction]:
    """
    {1, ℓ_a, ℓ_a ℓ_b, cos(π s_a)} on the box, with s the coordinates rescaled to [0, 1].

    ℓ(s) = s - sin(2πs)/2π replaces the coordinate itself so that every
    function satisfies the Neumann condition; a 2D box gives eight functions.
    """
    lo = domain.bounds[:, 0]
    length = domain.bounds[:, 1] - lo
    dim = domain.dim

    def scaled(x: Array) -> Array:
        return (np.asarray(x, dtype=float).reshape(-1, dim) - lo) / length

    def one(x: Array) -> Array:
        return np.ones(scaled(x).shape[0])

    functions = [TestFunction("1", one, lambda x: np.zeros_like(scaled(x)))]

    def linear(a: int) -> TestFunction:
        def value(x: Array) -> Array:
            return _neumann_linear(scaled(x)[:, a])[0]

        def gradient(x: Array) -> Array:
            out = np.zeros_like(scaled(x))
            out[:, a] = _neumann_linear(scaled(x)[:, a])[1] / length[a]
            return out

        return TestFunction(f"l{a}", value, gradient)

    def product(a: int, b: int) -> TestFunction:
        def value(x: Array) -> Array:
            s = scaled(x)
            return _neumann_linear(s[:, a])[0] * _neumann_linear(s[:, b])[0]

        def gradient(x: Array) -> Array:
            s = scaled(x)
            la, dla = _neumann_linear(s[:, a])
            lb, dlb = _neumann_linear(s[:, b])
            out = np.zeros_like(s)
            out[:, a] += dla * lb / length[a]
            out[:, b] += la * dlb / length[b]
            return out

        return TestFunction(f"l{a}*l{b}", value, gradient)

    def cosine(a: int) -> TestFunction:
        def value(x: Array) -> Array:
            return np.cos(np.pi * scaled(x)[:, a])

        def gradient(x: Array) -> Array:
            out = np.zeros_like(scaled(x))
            out[:, a] = -np.pi * np.sin(np.pi * scaled(x)[:, a]) / length[a]
            return out

        return TestFunction(f"cos{a}", value, gradient)

    functions += [linear(a) for a in range(dim)]
    functions += [product(a, b) for a in range(dim) for b in range(a, dim)]
    functions += [cosine(a) for a in range(dim)]
    return functions


# Not a pytest test despite the name.
test_function_dictionary.__test__ = False  # type: ignore[attr-defined]


def check_neumann(zeta: TestFunction, domain: DiscreteDomain, tol: float = TOL_GEOM) -> None:
    """
    Raises:
        BoundaryIncompatible: If ∂_a ζ ≠ 0 on a face x_a = lo_a or x_a = hi_a.
    """
    for a in range(domain.dim):
        for edge in domain.bounds[a]:
            points = domain.nodes.copy()
            points[:, a] = edge
            normal = np.asarray(zeta.gradient(points))[:, a]
            worst = float(np.max(np.abs(normal)))
            if worst > tol:
                raise BoundaryIncompatible(
                    f"test function {zeta.name}: normal derivative {worst:.2e} at x{a} = {edge}"
                )


def generator_values(
    zeta: TestFunction, domain: DiscreteDomain, psi: DriftPotential, beta_inv: float = 1.0
) -> Array:
    """Lζ = β⁻¹Δ_g ζ - ⟨∇ψ, ∇ζ⟩_g at the nodes."""
    g_inv = np.linalg.inv(domain.metric_at)
    grad_zeta = np.asarray(zeta.gradient(domain.nodes), dtype=float)
    raised = np.einsum("nij,nj->ni", g_inv, grad_zeta)
    laplacian = domain.divergence(raised)
    return beta_inv * laplacian - np.sum(psi.gradients(domain) * raised, axis=-1)


def _path(path: object) -> tuple[Array, Sequence[DiscreteDensity]]:
    if isinstance(path, FdSolution):
        return path.times, path.densities
    steps = getattr(path, "steps", None)
    times = getattr(path, "times", None)
    if steps is None or times is None:
        raise DomainError("expected an FdSolution or a FlowTrajectory")
    return np.asarray(times, dtype=float), steps


def weak_residual(
    path: object,
    zeta: TestFunction,
    eta: SmoothBump,
    psi: DriftPotential,
    beta_inv: float = 1.0,
) -> float:
    """
    |η(0)∫ζ dρ₀ + ∫∫ζ ∂_tη dρ dt + ∫∫Lζ η dρ dt| along a piecewise-constant path.

    The ∂_tη term is integrated exactly on every interval; the Lζ·η term uses
    the midpoint rule in time.

    Args:
        path: An FdSolution or FlowTrajectory
        zeta: Neumann-compatible test function
        eta: Time profile vanishing before the end of the path

    Raises:
        BoundaryIncompatible: If ζ violates the Neumann condition
        DomainError: If the path ends before η vanishes
    """
    times, densities = _path(path)
    domain = densities[0].domain
    check_neumann(zeta, domain)
    if times[-1] < eta.support:
        raise DomainError(f"path ends at {times[-1]}, before the bump support {eta.support}")

    zeta_values = np.asarray(zeta.value(domain.nodes), dtype=float)
    generator = generator_values(zeta, domain, psi, beta_inv)
    eta_at = eta(times)
    total = float(eta_at[0] * (densities[0].masses @ zeta_values))
    last = int(np.searchsorted(times, eta.support, side="left"))
    for k in range(1, min(last + 1, len(times))):
        masses = densities[k].masses
        midpoint = float(eta(0.5 * (times[k - 1] + times[k])))
        total += float(masses @ zeta_values) * float(eta_at[k] - eta_at[k - 1])
        total += float(masses @ generator) * midpoint * float(times[k] - times[k - 1])
    return abs(total)


def weak_distances(
    a: DiscreteDensity, b: DiscreteDensity, functions: Sequence[TestFunction]
) -> Array:
    """|∫ζ d(ρ_a - ρ_b)| for each test function."""
    return np.array(
        [abs(integrate_against(a, f.value) - integrate_against(b, f.value)) for f in functions]
    )
