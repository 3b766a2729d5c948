#!/usr/bin/env python3
"""
Discrete probability densities on tensor-product grids.

Densities are stored with respect to the Riemannian volume dVol_g, so the
mass of node i is values[i] * vol_weights[i] with vol_weight = cell measure
× √det g(node) (midpoint quadrature on cell centres).
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DomainError
from .geometry import MetricModel, euclidean_metric


logger = logging.getLogger(__name__)

TOL_MASS = 1e-12

Array = NDArray[np.float64]


# =============================================================================
# DOMAIN
# =============================================================================


@dataclass(frozen=True, eq=False)
class DiscreteDomain:
    """
    Cell-centred tensor-product grid on a box, carrying a metric.

    Nodes are the cell centres in C order (last axis fastest). Boundary nodes
    are those whose cell touches the box boundary.
    """

    bounds: Array
    shape: tuple[int, ...]
    metric: MetricModel

    def __post_init__(self):
        object.__setattr__(self, "bounds", np.asarray(self.bounds, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if len(self.shape) not in (1, 2):
            raise DomainError(f"only 1D and 2D grids are supported, got {self.shape}")
        if self.metric.dim != len(self.shape):
            raise DomainError("metric dimension does not match the grid")
        if np.any(self.vol_weights <= 0):
            raise DomainError("volume weights must be positive")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def spacing(self) -> Array:
        return (self.bounds[:, 1] - self.bounds[:, 0]) / np.asarray(self.shape)

    @cached_property
    def axes(self) -> list[Array]:
        """Cell-centre coordinates along each axis."""
        return [
            self.bounds[a, 0] + (np.arange(n) + 0.5) * self.spacing[a]
            for a, n in enumerate(self.shape)
        ]

    @cached_property
    def nodes(self) -> Array:
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=-1)

    @cached_property
    def metric_at(self) -> Array:
        """Metric tensor per node, shape (size, dim, dim)."""
        return np.asarray(self.metric.tensor(self.nodes)).reshape(self.size, self.dim, self.dim)

    @cached_property
    def sqrt_det(self) -> Array:
        return np.sqrt(np.linalg.det(self.metric_at))

    @cached_property
    def vol_weights(self) -> Array:
        return float(np.prod(self.spacing)) * self.sqrt_det

    @cached_property
    def boundary_mask(self) -> Array:
        index = np.indices(self.shape).reshape(self.dim, -1)
        mask = np.zeros(self.size, dtype=bool)
        for a, n in enumerate(self.shape):
            mask |= (index[a] == 0) | (index[a] == n - 1)
        return mask

    @property
    def volume(self) -> float:
        return float(np.sum(self.vol_weights))

    def grid(self, values: ArrayLike) -> Array:
        """Reshape per-node values onto the grid."""
        return np.asarray(values).reshape(self.shape)

    def divergence(self, field_values: ArrayLike) -> Array:
        """
        Riemannian divergence (1/√g)·∂_a(√g ξ^a) of node values of shape (size, dim).

        Second-order central differences inside, second-order one-sided at the
        edges of axes with at least three cells.
        """
        values = np.asarray(field_values, dtype=float).reshape(self.size, self.dim)
        total = np.zeros(self.shape)
        for a in range(self.dim):
            flux = self.grid(self.sqrt_det * values[:, a])
            edge_order = 2 if self.shape[a] > 2 else 1
            total += np.gradient(flux, self.spacing[a], axis=a, edge_order=edge_order)
        return total.reshape(-1) / self.sqrt_det


def make_domain(
    bounds: ArrayLike, resolution: int | tuple[int, ...], metric: MetricModel | None = None
) -> DiscreteDomain:
    """
    Build a cell-centred grid.

    Args:
        bounds: (lo, hi) for 1D or [(lo, hi), (lo, hi)] for 2D
        resolution: Cells per axis (an int applies to every axis)
        metric: Riemannian metric; Euclidean when omitted
    """
    box = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if np.any(box[:, 1] <= box[:, 0]):
        raise DomainError(f"empty box {box.tolist()}")
    dim = box.shape[0]
    shape = (resolution,) * dim if isinstance(resolution, int) else tuple(resolution)
    return DiscreteDomain(box, shape, metric or euclidean_metric(dim))


# =============================================================================
# DENSITIES AND DRIFT
# =============================================================================


@dataclass(frozen=True, eq=False)
class DiscreteDensity:
    """Nonnegative node values with unit mass against the domain's volume weights."""

    domain: DiscreteDomain
    values: Array = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.domain.size,):
            raise DomainError(f"expected {self.domain.size} values, got {values.shape}")
        if np.any(values < 0):
            raise DomainError("density values must be nonnegative")
        mass = float(values @ self.domain.vol_weights)
        if abs(mass - 1.0) > TOL_MASS * max(1.0, np.sqrt(self.domain.size)):
            raise DomainError(f"density has mass {mass:.15f}, expected 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def masses(self) -> Array:
        return self.values * self.domain.vol_weights

    @classmethod
    def from_masses(cls, domain: DiscreteDomain, masses: ArrayLike) -> "DiscreteDensity":
        masses = np.clip(np.asarray(masses, dtype=float), 0.0, None)
        return cls(domain, masses / masses.sum() / domain.vol_weights)


def normalize(domain: DiscreteDomain, values: ArrayLike) -> DiscreteDensity:
    """Clip negative roundoff to zero and rescale to unit mass."""
    values = np.clip(np.asarray(values, dtype=float), 0.0, None)
    mass = float(values @ domain.vol_weights)
    if mass <= 0:
        raise DomainError("cannot normalize a density with zero mass")
    return DiscreteDensity(domain, values / mass)


def uniform_density(domain: DiscreteDomain) -> DiscreteDensity:
    return normalize(domain, np.ones(domain.size))


def from_function(domain: DiscreteDomain, f: Callable[[Array], Array]) -> DiscreteDensity:
    """Sample f at the nodes (shape (n, dim) input) and normalize."""
    return normalize(domain, f(domain.nodes))


def gaussian_density(
    domain: DiscreteDomain, mean: ArrayLike, variance: ArrayLike
) -> DiscreteDensity:
    """
    Gaussian with the given mean and variance (scalar, per-axis or covariance),
    taken as a density with respect to dVol_g and renormalized on the box.
    """
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (domain.dim,))
    cov = np.asarray(variance, dtype=float)
    if cov.ndim < 2:
        cov = np.diag(np.broadcast_to(cov, (domain.dim,)))
    precision = np.linalg.inv(cov)
    diff = domain.nodes - mean
    exponent = -0.5 * np.einsum("ni,ij,nj->n", diff, precision, diff)
    return normalize(domain, np.exp(exponent - exponent.max()))


def point_mass(domain: DiscreteDomain, x0: ArrayLike) -> DiscreteDensity:
    """All mass in the cell whose centre is closest to x0."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    index = int(np.argmin(np.sum((domain.nodes - x0) ** 2, axis=-1)))
    masses = np.zeros(domain.size)
    masses[index] = 1.0
    return DiscreteDensity.from_masses(domain, masses)


@dataclass(frozen=True)
class DriftPotential:
    """Nonnegative drift potential ψ with gradient, both taking (n, dim) arrays."""

    psi: Callable[[Array], Array]
    grad_psi: Callable[[Array], Array]
    name: str = "psi"

    def values(self, domain: DiscreteDomain) -> Array:
        return np.asarray(self.psi(domain.nodes), dtype=float).reshape(domain.size)

    def gradients(self, domain: DiscreteDomain) -> Array:
        return np.asarray(self.grad_psi(domain.nodes), dtype=float).reshape(
            domain.size, domain.dim
        )


def zero_drift() -> DriftPotential:
    return DriftPotential(
        psi=lambda x: np.zeros(np.shape(x)[0]),
        grad_psi=lambda x: np.zeros_like(x, dtype=float),
        name="zero",
    )


def constant_drift(value: float) -> DriftPotential:
    if value < 0:
        raise DomainError("drift potential must be nonnegative")
    return DriftPotential(
        psi=lambda x: np.full(np.shape(x)[0], float(value)),
        grad_psi=lambda x: np.zeros_like(x, dtype=float),
        name="constant",
    )


def quadratic_drift(center: ArrayLike = 0.0, stiffness: float = 1.0) -> DriftPotential:
    """ψ(x) = ½·stiffness·|x - center|²."""
    c = np.asarray(center, dtype=float)
    return DriftPotential(
        psi=lambda x: 0.5 * stiffness * np.sum((x - c) ** 2, axis=-1),
        grad_psi=lambda x: stiffness * (x - c),
        name="quadratic",
    )


def drift_gradient_constant(psi: DriftPotential, domain: DiscreteDomain) -> float:
    """Smallest C with |∇ψ| ≤ C(1 + ψ) at every node, measured in the metric."""
    grads = psi.gradients(domain)
    g_inv = np.linalg.inv(domain.metric_at)
    norms = np.sqrt(np.einsum("ni,nij,nj->n", grads, g_inv, grads))
    return float(np.max(norms / (1.0 + psi.values(domain))))


# =============================================================================
# FUNCTIONALS
# =============================================================================


def _xlogx(values: Array) -> Array:
    out = np.zeros_like(values)
    positive = values > 0
    out[positive] = values[positive] * np.log(values[positive])
    return out


def entropy(rho: DiscreteDensity) -> float:
    """E(ρ) = ∫ ρ log ρ dVol_g with 0·log 0 = 0."""
    return float(_xlogx(rho.values) @ rho.domain.vol_weights)


def drift(rho: DiscreteDensity, psi: DriftPotential) -> float:
    """D(ρ) = ∫ ψ dρ."""
    return float(rho.masses @ psi.values(rho.domain))


def dist_sq_to(domain: DiscreteDomain, x0: ArrayLike, metric: MetricModel | None = None) -> Array:
    metric = metric or domain.metric
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).reshape(1, -1)
    return metric.pairwise_dist_sq(domain.nodes, x0)[:, 0]


def second_moment(
    rho: DiscreteDensity, x0: ArrayLike, metric: MetricModel | None = None
) -> float:
    """M(ρ) = ∫ d²(x, x0) dρ, with the domain metric unless one is given."""
    return float(rho.masses @ dist_sq_to(rho.domain, x0, metric))


def mean(rho: DiscreteDensity) -> Array:
    return rho.masses @ rho.domain.nodes


def variance(rho: DiscreteDensity) -> Array:
    """Per-axis coordinate variance."""
    m = mean(rho)
    return rho.masses @ (rho.domain.nodes - m) ** 2


def l1_distance(a: DiscreteDensity, b: DiscreteDensity) -> float:
    """∫ |ρ_a - ρ_b| dVol_g."""
    return float(np.abs(a.values - b.values) @ a.domain.vol_weights)


def integrate_against(rho: DiscreteDensity, f: Callable[[Array], Array]) -> float:
    """∫ f dρ for f taking (n, dim) arrays."""
    return float(rho.masses @ np.asarray(f(rho.domain.nodes), dtype=float))


@dataclass
class EntropyLowerBoundReport:
    lhs: float
    rhs: float
    eps: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1.0 + 1e-12) + 1e-15


def entropy_lower_bound_check(
    rho: DiscreteDensity, eps: float, x0: ArrayLike, metric: MetricModel | None = None
) -> EntropyLowerBoundReport:
    """
    Compare ∫(ρ log ρ)₋ with ∫e^{-d(x,x0)/2} dVol + eps·M(ρ) + mass/(4eps).

    A violation points at a quadrature bug rather than a property of ρ.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    weights = rho.domain.vol_weights
    d2 = dist_sq_to(rho.domain, x0, metric)
    negative_part = np.clip(-_xlogx(rho.values), 0.0, None)
    lhs = float(negative_part @ weights)
    mass = float(rho.masses.sum())
    rhs = float(np.exp(-0.5 * np.sqrt(d2)) @ weights) + eps * float(rho.masses @ d2)
    rhs += mass / (4.0 * eps)
    return EntropyLowerBoundReport(lhs=lhs, rhs=rhs, eps=eps)


# =============================================================================
# CSV I/O
# =============================================================================


def _coordinate_names(dim: int) -> list[str]:
    return ["x"] if dim == 1 else [f"x{a}" for a in range(dim)]


def write_density_csv(rho: DiscreteDensity, path: Path) -> None:
    """Write node coordinates and density values with a header row."""
    header = ",".join([*_coordinate_names(rho.domain.dim), "value"])
    data = np.column_stack([rho.domain.nodes, rho.values])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def read_density_csv(path: Path, domain: DiscreteDomain) -> DiscreteDensity:
    """
    Read a density written by ``write_density_csv`` onto ``domain``.

    Raises:
        DomainError: If the file cannot be read or its nodes do not match the domain's nodes.
    """
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise DomainError(f"{path}: cannot read density CSV: {e}") from e
    nodes, values = data[:, :-1], data[:, -1]
    if nodes.shape != domain.nodes.shape or not np.allclose(nodes, domain.nodes, atol=1e-9):
        raise DomainError(f"{path}: node coordinates do not match the domain grid")
    return normalize(domain, values)
