#!/usr/bin/env python3
"""
Transport costs, convex potentials and the Riemannian metrics they induce.

Points are numpy arrays whose last axis is the coordinate axis. Costs and
potentials broadcast over leading axes, so ``cost.eval(X[:, None], Y[None])``
yields a full cost matrix.

A cost c(x, y) induces the metric g_ij(x) = -c_{x^i, y^j}(x, x). For a Bregman
divergence of a convex potential this is the Hessian metric D²φ.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.polynomial import Polynomial
from numpy.typing import ArrayLike, NDArray
from scipy import integrate, optimize

from .errors import DomainError, EmptySample, NoConvergence, OutOfDomain, SingularMetric


logger = logging.getLogger(__name__)


# =============================================================================
# TOLERANCES
# =============================================================================

H_FD = 1e-5
H_FD2 = 1e-4
TOL_GEOM = 1e-8
TOL_DET = 1e-12
TOL_NEWTON = 1e-10
MAX_NEWTON_ITERS = 50
MAX_HALVINGS = 30
TOL_VELOCITY = 1e-4
TOL_SHOOTING = 1e-8

Array = NDArray[np.float64]
PointFn = Callable[[Array], Array]
PairFn = Callable[[Array, Array], Array]


def as_point(x: ArrayLike) -> Array:
    """Coerce a scalar or sequence into a float array with a coordinate axis."""
    return np.atleast_1d(np.asarray(x, dtype=float))


def _fd_step(x: Array, h: float) -> float:
    """Relative finite-difference step scaled by the coordinate magnitude."""
    return h * max(1.0, float(np.max(np.abs(x))))


def damped_newton(
    residual: Callable[[Array], Array],
    jacobian: Callable[[Array], Array],
    y0: Array,
    *,
    in_domain: Callable[[Array], bool] | None = None,
    basis: Array | None = None,
    tol: float = TOL_NEWTON,
    max_iters: int = MAX_NEWTON_ITERS,
    max_halvings: int = MAX_HALVINGS,
) -> Array:
    """
    Solve residual(y) = 0 by Newton's method with step halving.

    Steps are taken in the span of ``basis`` (columns are ambient directions),
    so iterates stay on an affine chart such as the probability simplex.

    Raises:
        OutOfDomain: If every damped candidate of some step leaves the domain.
        NoConvergence: If the residual is still above ``tol`` after ``max_iters``;
            the best iterate is attached.
    """
    y = np.array(y0, dtype=float)
    r = residual(y)
    norm = float(np.linalg.norm(r))
    for iteration in range(max_iters):
        if norm < tol:
            return y
        try:
            step = np.linalg.solve(jacobian(y), -r)
        except np.linalg.LinAlgError as e:
            raise NoConvergence(
                "singular Jacobian in Newton solve", best=y, iterations=iteration, residual=norm
            ) from e
        if basis is not None:
            step = basis @ step

        lam = 1.0
        saw_domain_point = False
        for _ in range(max_halvings):
            candidate = y + lam * step
            if in_domain is None or in_domain(candidate):
                saw_domain_point = True
                r_new = residual(candidate)
                norm_new = float(np.linalg.norm(r_new))
                if norm_new < tol or norm_new <= (1.0 - 1e-4 * lam) * norm:
                    y, r, norm = candidate, r_new, norm_new
                    break
            lam *= 0.5
        else:
            if not saw_domain_point:
                raise OutOfDomain(f"Newton iterate left the domain near {y}")
            raise NoConvergence(
                "line search failed", best=y, iterations=iteration, residual=norm
            )

    if norm < tol:
        return y
    raise NoConvergence(
        f"Newton did not converge in {max_iters} iterations",
        best=y,
        iterations=max_iters,
        residual=norm,
    )


# =============================================================================
# CONVEX POTENTIALS
# =============================================================================


@dataclass(frozen=True)
class ConvexPotential:
    """
    A smooth strictly convex potential φ on a flat chart.

    Attributes:
        dim: Number of coordinates
        phi: x -> φ(x), broadcasting over leading axes
        grad: x -> Dφ(x)
        hessian: x -> D²φ(x), shape (..., dim, dim)
        grad_inverse_fn: Closed form of (Dφ)⁻¹, if one exists
        in_domain: Membership test for a single point; None means all of R^dim
        name: Registry name used in reports
    """

    dim: int
    phi: PointFn
    grad: PointFn
    hessian: PointFn
    grad_inverse_fn: PointFn | None = None
    in_domain: Callable[[Array], bool] | None = None
    name: str = "potential"

    def grad_inverse(self, v: ArrayLike, x0: ArrayLike | None = None) -> Array:
        """
        Invert the gradient map, v -> x with Dφ(x) = v.

        Uses the closed form when available, otherwise damped Newton on
        Dφ(x) - v started from ``x0`` (or the origin).
        """
        v = as_point(v)
        if self.grad_inverse_fn is not None:
            return self.grad_inverse_fn(v)
        if v.ndim > 1:
            return np.stack([self.grad_inverse(row, x0) for row in v])
        start = as_point(x0) if x0 is not None else np.zeros(self.dim)
        return damped_newton(
            lambda x: self.grad(x) - v,
            self.hessian,
            start,
            in_domain=self.in_domain,
            tol=TOL_NEWTON * max(1.0, float(np.linalg.norm(v))),
        )

    def min_hessian_eigenvalue(self, x: ArrayLike) -> float:
        return float(np.linalg.eigvalsh(self.hessian(as_point(x)))[0])


def quadratic_potential(dim: int = 1) -> ConvexPotential:
    """φ(x) = ½|x|², whose Bregman divergence is the Euclidean cost."""
    return ConvexPotential(
        dim=dim,
        phi=lambda x: 0.5 * np.sum(x * x, axis=-1),
        grad=lambda x: np.array(x, dtype=float),
        hessian=lambda x: np.broadcast_to(np.eye(dim), (*np.shape(x)[:-1], dim, dim)).copy(),
        grad_inverse_fn=lambda v: np.array(v, dtype=float),
        name="quadratic",
    )


def polynomial_potential(
    coefficients: ArrayLike,
    quadratic_floor: float = 0.0,
    dim: int = 1,
    name: str = "polynomial",
) -> ConvexPotential:
    """
    Separable polynomial potential φ(x) = Σ_a [p(x_a) + ½·floor·x_a²].

    Args:
        coefficients: Coefficients of p in increasing degree order
        quadratic_floor: Added curvature; makes φ strongly convex when p'' ≥ 0
        dim: Number of coordinates

    Convexity of p is not verified here; ``validate_config`` samples the
    Hessian and reports degenerate points.
    """
    p = Polynomial(np.asarray(coefficients, dtype=float))
    dp = p.deriv(1)
    d2p = p.deriv(2)
    floor = float(quadratic_floor)

    def hessian(x: Array) -> Array:
        diag = d2p(x) + floor
        return diag[..., :, None] * np.eye(dim)

    return ConvexPotential(
        dim=dim,
        phi=lambda x: np.sum(p(x) + 0.5 * floor * x * x, axis=-1),
        grad=lambda x: dp(x) + floor * x,
        hessian=hessian,
        name=name,
    )


def quartic_potential(dim: int = 1) -> ConvexPotential:
    """φ(x) = Σ x_a⁴. The Hessian 12x² vanishes at the origin."""
    base = polynomial_potential([0.0, 0.0, 0.0, 0.0, 1.0], dim=dim, name="quartic")
    return ConvexPotential(
        dim=dim,
        phi=base.phi,
        grad=base.grad,
        hessian=base.hessian,
        grad_inverse_fn=lambda v: np.cbrt(np.asarray(v, dtype=float) / 4.0),
        name="quartic",
    )


def shifted_quartic_potential(
    shift: float = 0.0, quadratic_floor: float = 1.0, dim: int = 1
) -> ConvexPotential:
    """φ(x) = Σ ¼(x_a - s)⁴ + ½·floor·x_a², uniformly convex with D²φ ≥ floor."""
    p = Polynomial([-shift, 1.0]) ** 4 / 4.0
    return polynomial_potential(
        p.coef, quadratic_floor=quadratic_floor, dim=dim, name="shifted_quartic"
    )


def _check_natural_parameter(theta: Array) -> None:
    if np.any(theta[..., 1] >= 0):
        raise DomainError(f"log-partition potential needs θ₂ < 0, got {theta}")


def gaussian_log_partition_potential() -> ConvexPotential:
    """
    Log-partition function of the univariate normal family in natural parameters.

    φ(θ) = -θ₁²/(4θ₂) - ¼·log(-2θ₂) on R × (-∞, 0). Its Hessian is the Fisher
    information, with determinant 1/(8s³) for s = -θ₂.

    Raises:
        DomainError: When evaluated at a point with θ₂ ≥ 0.
    """

    def phi(theta: Array) -> Array:
        _check_natural_parameter(theta)
        t1, t2 = theta[..., 0], theta[..., 1]
        return -t1 * t1 / (4.0 * t2) - 0.25 * np.log(-2.0 * t2)

    def grad(theta: Array) -> Array:
        _check_natural_parameter(theta)
        t1, t2 = theta[..., 0], theta[..., 1]
        return np.stack([-t1 / (2.0 * t2), t1 * t1 / (4.0 * t2 * t2) - 1.0 / (4.0 * t2)], axis=-1)

    def hessian(theta: Array) -> Array:
        _check_natural_parameter(theta)
        t1, t2 = theta[..., 0], theta[..., 1]
        h11 = -1.0 / (2.0 * t2)
        h12 = t1 / (2.0 * t2 * t2)
        h22 = -t1 * t1 / (2.0 * t2**3) + 1.0 / (4.0 * t2 * t2)
        return np.stack([np.stack([h11, h12], axis=-1), np.stack([h12, h22], axis=-1)], axis=-2)

    def grad_inverse(v: Array) -> Array:
        # Dφ maps onto {(a, b): b > a²}, the mean and second moment.
        a, b = v[..., 0], v[..., 1]
        variance = b - a * a
        if np.any(variance <= 0):
            raise DomainError(f"({a}, {b}) is not in the image of Dφ (needs b > a²)")
        return np.stack([a / (2.0 * variance), -1.0 / (4.0 * variance)], axis=-1)

    return ConvexPotential(
        dim=2,
        phi=phi,
        grad=grad,
        hessian=hessian,
        grad_inverse_fn=grad_inverse,
        in_domain=lambda theta: bool(theta[1] < 0),
        name="log_partition",
    )


# =============================================================================
# COST FUNCTIONS
# =============================================================================


@dataclass(frozen=True)
class CostFunction:
    """
    A transport cost c(x, y) with first and mixed second derivatives.

    Derivatives are taken along the columns of ``tangent_basis``, which is the
    identity for costs on open subsets of R^dim. Missing analytic derivatives
    fall back to central finite differences.

    Attributes:
        dim: Intrinsic dimension (number of tangent directions)
        value_fn: (x, y) -> c(x, y), broadcasting over leading axes
        grad_x_fn, grad_y_fn, mixed_fn: Optional analytic derivatives
        tangent_basis: Ambient-by-intrinsic matrix of derivative directions
        in_domain: Membership test for a single point
        potential: The generating potential, for Bregman and Mahalanobis costs
        kind: "quadratic", "bregman", "mahalanobis", "dirichlet_log" or "custom"
    """

    dim: int
    value_fn: PairFn
    grad_x_fn: PairFn | None = None
    grad_y_fn: PairFn | None = None
    mixed_fn: PairFn | None = None
    tangent_basis: Array | None = None
    in_domain: Callable[[Array], bool] | None = None
    potential: ConvexPotential | None = None
    kind: str = "custom"
    name: str = "cost"
    h_fd: float = H_FD

    @property
    def basis(self) -> Array:
        return self.tangent_basis if self.tangent_basis is not None else np.eye(self.dim)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    def eval(self, x: ArrayLike, y: ArrayLike) -> Array | float:
        value = self.value_fn(as_point(x), as_point(y))
        return float(value) if np.ndim(value) == 0 else value

    def pairwise(self, xs: ArrayLike, ys: ArrayLike) -> Array:
        """Cost matrix C_ij = c(xs_i, ys_j) for point arrays of shape (n, ambient_dim)."""
        xs = np.asarray(xs, dtype=float).reshape(-1, self.ambient_dim)
        ys = np.asarray(ys, dtype=float).reshape(-1, self.ambient_dim)
        return np.asarray(self.value_fn(xs[:, None, :], ys[None, :, :]), dtype=float)

    def grad_x(self, x: ArrayLike, y: ArrayLike) -> Array:
        x, y = as_point(x), as_point(y)
        if self.grad_x_fn is not None:
            return self.grad_x_fn(x, y)
        return self._fd_gradient(lambda z: self.value_fn(z, y), x, self.h_fd)

    def grad_y(self, x: ArrayLike, y: ArrayLike) -> Array:
        x, y = as_point(x), as_point(y)
        if self.grad_y_fn is not None:
            return self.grad_y_fn(x, y)
        return self._fd_gradient(lambda z: self.value_fn(x, z), y, self.h_fd)

    def mixed_hessian(self, x: ArrayLike, y: ArrayLike) -> Array:
        """Matrix M_ij = c_{x^i, y^j}(x, y) of mixed second derivatives."""
        x, y = as_point(x), as_point(y)
        if self.mixed_fn is not None:
            return np.asarray(self.mixed_fn(x, y))

        basis = self.basis
        if self.grad_x_fn is not None:
            gx = self.grad_x_fn
            h = _fd_step(y, self.h_fd)
        else:
            h = _fd_step(y, H_FD2)

            def gx(a: Array, b: Array) -> Array:
                return self._fd_gradient(lambda z: self.value_fn(z, b), a, H_FD2)

        columns = [(gx(x, y + h * b_j) - gx(x, y - h * b_j)) / (2.0 * h) for b_j in basis.T]
        return np.stack(columns, axis=-1)

    def _fd_gradient(self, f: Callable[[Array], Array], x: Array, h_rel: float) -> Array:
        h = _fd_step(x, h_rel)
        return np.array([(f(x + h * b) - f(x - h * b)) / (2.0 * h) for b in self.basis.T])

    def contains(self, x: ArrayLike) -> bool:
        return self.in_domain is None or self.in_domain(as_point(x))


def quadratic_cost(dim: int = 1) -> CostFunction:
    """c(x, y) = ½|x - y|²."""
    return CostFunction(
        dim=dim,
        value_fn=lambda x, y: 0.5 * np.sum((x - y) ** 2, axis=-1),
        grad_x_fn=lambda x, y: x - y,
        grad_y_fn=lambda x, y: y - x,
        mixed_fn=lambda x, y: -np.broadcast_to(
            np.eye(dim), (*np.broadcast_shapes(x.shape, y.shape)[:-1], dim, dim)
        ),
        potential=quadratic_potential(dim),
        kind="quadratic",
        name="quadratic",
    )


def bregman_cost(potential: ConvexPotential) -> CostFunction:
    """
    Bregman divergence B_φ(x, y) = φ(x) - φ(y) - Dφ(y)·(x - y).

    All derivatives are analytic: ∇_x c = Dφ(x) - Dφ(y), ∇_y c = -D²φ(y)(x - y)
    and c_{x,y} = -D²φ(y).
    """

    def value(x: Array, y: Array) -> Array:
        return potential.phi(x) - potential.phi(y) - np.sum(potential.grad(y) * (x - y), axis=-1)

    def grad_y(x: Array, y: Array) -> Array:
        return -np.einsum("...ij,...j->...i", potential.hessian(y), x - y)

    def mixed(x: Array, y: Array) -> Array:
        h = potential.hessian(y)
        shape = (*np.broadcast_shapes(x.shape, y.shape)[:-1], potential.dim, potential.dim)
        return -np.broadcast_to(h, shape)

    return CostFunction(
        dim=potential.dim,
        value_fn=value,
        grad_x_fn=lambda x, y: potential.grad(x) - potential.grad(y),
        grad_y_fn=grad_y,
        mixed_fn=mixed,
        in_domain=potential.in_domain,
        potential=potential,
        kind="bregman",
        name=f"bregman:{potential.name}",
    )


def mahalanobis_cost(potential: ConvexPotential) -> CostFunction:
    """c(x, y) = ½(x - y)ᵀ D²φ(y) (x - y). Mixed derivatives use finite differences."""

    def value(x: Array, y: Array) -> Array:
        d = x - y
        return 0.5 * np.einsum("...i,...ij,...j->...", d, potential.hessian(y), d)

    return CostFunction(
        dim=potential.dim,
        value_fn=value,
        grad_x_fn=lambda x, y: np.einsum("...ij,...j->...i", potential.hessian(y), x - y),
        in_domain=potential.in_domain,
        potential=potential,
        kind="mahalanobis",
        name=f"mahalanobis:{potential.name}",
    )


def _simplex_check(n: int) -> Callable[[Array], None]:
    def check(p: Array) -> None:
        if p.shape[-1] != n:
            raise DomainError(f"expected {n} simplex coordinates, got shape {p.shape}")
        if np.any(p <= 0):
            raise DomainError("simplex coordinates must be strictly positive")
        if np.any(np.abs(np.sum(p, axis=-1) - 1.0) > TOL_GEOM):
            raise DomainError("simplex coordinates must sum to 1")

    return check


def dirichlet_log_cost(dim: int) -> CostFunction:
    """
    Logarithmic cost on the open probability simplex with ``dim`` coordinates.

    c(p, q) = log(Σ_i q_i/(n p_i)) - Σ_i log(q_i/p_i)/n, which is nonnegative by
    Jensen and vanishes only when p = q. Derivatives are taken in the affine
    chart spanned by e_i - e_n, so the intrinsic dimension is dim - 1.

    Raises:
        DomainError: If a coordinate is not positive or they do not sum to 1.
    """
    if dim < 2:
        raise DomainError("the simplex needs at least two coordinates")
    check = _simplex_check(dim)

    def value(p: Array, q: Array) -> Array:
        check(p)
        check(q)
        ratio = q / p
        return np.log(np.mean(ratio, axis=-1)) - np.mean(np.log(ratio), axis=-1)

    def in_domain(p: Array) -> bool:
        return bool(np.all(p > 0) and abs(float(np.sum(p)) - 1.0) <= TOL_GEOM)

    basis = np.vstack([np.eye(dim - 1), -np.ones((1, dim - 1))])
    return CostFunction(
        dim=dim - 1,
        value_fn=value,
        tangent_basis=basis,
        in_domain=in_domain,
        kind="dirichlet_log",
        name="dirichlet_log",
    )


# =============================================================================
# INDUCED METRIC AND REGULARITY CHECKS
# =============================================================================


def induced_metric(cost: CostFunction, x: ArrayLike) -> Array:
    """
    Metric tensor g_ij(x) = -c_{x^i, y^j}(x, x).

    Finite-difference asymmetry is removed by symmetrizing.

    Raises:
        SingularMetric: If the smallest eigenvalue is not positive.
    """
    x = as_point(x)
    g = -cost.mixed_hessian(x, x)
    asymmetry = float(np.max(np.abs(g - g.T)))
    if asymmetry > TOL_GEOM * max(1.0, float(np.max(np.abs(g)))):
        logger.debug("induced metric of %s asymmetric by %.2e at %s", cost.name, asymmetry, x)
    g = 0.5 * (g + g.T)
    smallest = float(np.linalg.eigvalsh(g)[0])
    if smallest <= 0:
        raise SingularMetric(f"metric induced by {cost.name} at {x} has eigenvalue {smallest:.3e}")
    return g


def metric_compatibility_check(cost: CostFunction, x: ArrayLike) -> float:
    """
    Compare -c_{x,y}(x, x) with c_{x,x}(x, y)|_{y=x} and c_{y,y}(x, y)|_{y=x}.

    All three represent the induced metric whenever c and its first
    derivatives vanish on the diagonal. Returns the larger of the two
    entrywise gaps (finite differences of ∇_x c in x and of ∇_y c in y).
    """
    x = as_point(x)
    mixed = -cost.mixed_hessian(x, x)

    def jacobian(grad: Callable[[Array], Array], analytic: bool) -> Array:
        h = _fd_step(x, cost.h_fd if analytic else H_FD2)
        columns = [(grad(x + h * b) - grad(x - h * b)) / (2.0 * h) for b in cost.basis.T]
        return np.stack(columns, axis=-1)

    xx = jacobian(lambda z: cost.grad_x(z, x), cost.grad_x_fn is not None)
    yy = jacobian(lambda z: cost.grad_y(x, z), cost.grad_y_fn is not None)
    return float(max(np.max(np.abs(xx - mixed)), np.max(np.abs(yy - mixed))))


@dataclass
class A2Report:
    """Mixed-Hessian nondegeneracy on a sample of point pairs."""

    determinants: list[float]
    flagged: list[int]
    a1_status: Literal["implied", "not verified"]
    tol_det: float = TOL_DET

    @property
    def ok(self) -> bool:
        return not self.flagged


def check_a1_a2(
    cost: CostFunction, samples: list[tuple[ArrayLike, ArrayLike]], tol_det: float = TOL_DET
) -> A2Report:
    """
    Report |det c_{x,y}| for each sampled pair and flag near-singular ones.

    A nonsingular mixed Hessian gives local injectivity of y -> -∇_x c(x, y).
    Global injectivity follows for Bregman and quadratic costs (Dφ is a
    diffeomorphism) and is reported as "not verified" otherwise.
    """
    determinants = [abs(float(np.linalg.det(cost.mixed_hessian(x, y)))) for x, y in samples]
    flagged = [i for i, d in enumerate(determinants) if d < tol_det]
    status: Literal["implied", "not verified"] = (
        "implied" if cost.kind in ("bregman", "quadratic") and not flagged else "not verified"
    )
    return A2Report(determinants=determinants, flagged=flagged, a1_status=status, tol_det=tol_det)


# =============================================================================
# C-SEGMENTS
# =============================================================================


def c_segment(
    cost: CostFunction,
    x: ArrayLike,
    y0: ArrayLike,
    y1: ArrayLike,
    t: float,
    initial_guess: ArrayLike | None = None,
) -> Array:
    """
    Point y_t of the c-segment from y0 to y1 with respect to x.

    Solves ∇_x c(x, y_t) = (1 - t)∇_x c(x, y0) + t∇_x c(x, y1). Bregman and
    quadratic costs use the closed form Dφ(y_t) = (1 - t)Dφ(y0) + tDφ(y1);
    other costs use damped Newton started at ``initial_guess`` (default y0,
    or y1 for t > ½).

    Raises:
        NoConvergence: If Newton fails within the iteration budget.
        OutOfDomain: If an iterate leaves the domain of the cost.
    """
    x, y0, y1 = as_point(x), as_point(y0), as_point(y1)
    if t == 0.0:
        return y0.copy()
    if t == 1.0:
        return y1.copy()

    if cost.kind in ("bregman", "quadratic") and cost.potential is not None:
        phi = cost.potential
        target = (1.0 - t) * phi.grad(y0) + t * phi.grad(y1)
        return phi.grad_inverse(target, x0=y0 if t <= 0.5 else y1)

    target = (1.0 - t) * cost.grad_x(x, y0) + t * cost.grad_x(x, y1)
    if initial_guess is not None:
        start = as_point(initial_guess)
    else:
        start = y0 if t <= 0.5 else y1
    return damped_newton(
        lambda y: cost.grad_x(x, y) - target,
        lambda y: cost.mixed_hessian(x, y),
        start,
        in_domain=cost.in_domain,
        basis=cost.tangent_basis,
    )


def c_segment_sweep(
    cost: CostFunction, x: ArrayLike, y0: ArrayLike, y1: ArrayLike, ts: ArrayLike
) -> Array:
    """Points of the c-segment at increasing ``ts``, warm-starting each solve."""
    points = []
    previous = as_point(y0)
    for t in np.asarray(ts, dtype=float):
        previous = c_segment(cost, x, y0, y1, float(t), initial_guess=previous)
        points.append(previous)
    return np.stack(points)


def c_segment_velocity_check(
    cost: CostFunction, x: ArrayLike, y: ArrayLike, h: float = 1e-3
) -> float:
    """
    Residual of the initial velocity of the c-segment from x towards y.

    The c-segment with respect to x starting at y_0 = x leaves with velocity
    -grad_g c(x, ·)(y), i.e. -g(x)⁻¹∇_x c(x, y) in coordinates. Returns
    ‖(y_h - x)/h + g(x)⁻¹∇_x c(x, y)‖, which is O(h).
    """
    x, y = as_point(x), as_point(y)
    y_h = c_segment(cost, x, x, y, h)
    g = induced_metric(cost, x)
    expected = -np.linalg.solve(g, cost.grad_x(x, y))
    if cost.tangent_basis is not None:
        # Chart displacement: the first dim coordinates of the ambient step.
        displacement = np.linalg.lstsq(cost.tangent_basis, y_h - x, rcond=None)[0]
    else:
        displacement = y_h - x
    return float(np.linalg.norm(displacement / h - expected))


# =============================================================================
# METRIC MODELS
# =============================================================================


@dataclass(frozen=True)
class MetricModel:
    """
    Riemannian metric on a flat chart, with squared distance.

    Attributes:
        dim: Number of coordinates
        tensor: x -> g(x), shape (..., dim, dim)
        dist_sq_fn: (x, y) -> d²(x, y) for single points
        arclength: For 1D metrics, x -> ∫_0^x √g, giving d = |s(x) - s(y)|
        approximate: True when distances come from a numerical geodesic solve
            or a Euclidean fallback
        constant_scale: c when g = c·I, else None
    """

    dim: int
    tensor: PointFn
    dist_sq_fn: PairFn
    arclength: PointFn | None = None
    approximate: bool = False
    constant_scale: float | None = None
    name: str = "metric"

    def dist_sq(self, x: ArrayLike, y: ArrayLike) -> float:
        x, y = as_point(x), as_point(y)
        if self.arclength is not None:
            return float((self.arclength(x) - self.arclength(y))[0] ** 2)
        return float(self.dist_sq_fn(x, y))

    def pairwise_dist_sq(self, xs: ArrayLike, ys: ArrayLike) -> Array:
        """Matrix of d²(xs_i, ys_j)."""
        xs = np.asarray(xs, dtype=float).reshape(-1, self.dim)
        ys = np.asarray(ys, dtype=float).reshape(-1, self.dim)
        if self.constant_scale is not None:
            diff = xs[:, None, :] - ys[None, :, :]
            return self.constant_scale * np.sum(diff * diff, axis=-1)
        if self.arclength is not None:
            sx = self.arclength(xs)[:, 0]
            sy = self.arclength(ys)[:, 0]
            return (sx[:, None] - sy[None, :]) ** 2
        return np.array([[self.dist_sq(x, y) for y in ys] for x in xs])

    def sqrt_det(self, xs: ArrayLike) -> Array:
        """√det g at each point of an (n, dim) array."""
        xs = np.asarray(xs, dtype=float).reshape(-1, self.dim)
        return np.sqrt(np.linalg.det(self.tensor(xs)))


def euclidean_metric(dim: int = 1) -> MetricModel:
    return scaled_metric(1.0, dim, name="euclidean")


def scaled_metric(scale: float, dim: int = 1, name: str | None = None) -> MetricModel:
    """Constant metric g = scale·I."""
    if scale <= 0:
        raise SingularMetric(f"metric scale must be positive, got {scale}")
    eye = np.eye(dim)
    return MetricModel(
        dim=dim,
        tensor=lambda x: scale * np.broadcast_to(eye, (*np.shape(x)[:-1], dim, dim)).copy(),
        dist_sq_fn=lambda x, y: scale * float(np.sum((x - y) ** 2)),
        constant_scale=scale,
        name=name or f"scaled:{scale:g}",
    )


def _arclength_1d(tensor: PointFn) -> PointFn:
    def speed(s: float) -> float:
        return float(np.sqrt(tensor(np.array([[s]]))[0, 0, 0]))

    def arclength(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1)
        values = np.array([integrate.quad(speed, 0.0, float(v), limit=200)[0] for v in flat])
        return values.reshape(x.shape)

    return arclength


def _christoffel(tensor: PointFn, x: Array) -> Array:
    """Γ^k_ij = ½ g^{kl}(∂_i g_lj + ∂_j g_li - ∂_l g_ij) by central differences."""
    dim = x.shape[0]
    h = _fd_step(x, H_FD2)
    dg = np.empty((dim, dim, dim))  # dg[l, i, j] = ∂_l g_ij
    for ax in range(dim):
        e = np.zeros(dim)
        e[ax] = h
        dg[ax] = (tensor(x + e) - tensor(x - e)) / (2.0 * h)
    g_inv = np.linalg.inv(tensor(x))
    lowered = 0.5 * (
        np.einsum("ilj->lij", dg) + np.einsum("jli->lij", dg) - dg
    )  # lowered[l, i, j] = ½(∂_i g_lj + ∂_j g_li - ∂_l g_ij)
    return np.einsum("kl,lij->kij", g_inv, lowered)


def shooting_dist_sq(tensor: PointFn, x: Array, y: Array) -> tuple[float, bool]:
    """
    Squared geodesic distance by shooting on the initial velocity.

    Integrates x'' = -Γ(x)(x', x') on [0, 1] and solves exp_x(v) = y with
    scipy's root finder. Returns (d², converged); when shooting fails the
    midpoint-metric estimate (y - x)ᵀ g((x + y)/2) (y - x) is returned instead.
    """
    dim = x.shape[0]

    def rhs(_t: float, state: Array) -> Array:
        pos, vel = state[:dim], state[dim:]
        gamma = _christoffel(tensor, pos)
        return np.concatenate([vel, -np.einsum("kij,i,j->k", gamma, vel, vel)])

    def endpoint_gap(v0: Array) -> Array:
        sol = integrate.solve_ivp(
            rhs, (0.0, 1.0), np.concatenate([x, v0]), rtol=1e-10, atol=1e-12
        )
        return sol.y[:dim, -1] - y

    result = optimize.root(endpoint_gap, y - x, method="hybr", tol=TOL_SHOOTING)
    if result.success and np.linalg.norm(endpoint_gap(result.x)) < TOL_SHOOTING * 10:
        v0 = result.x
        return float(v0 @ tensor(x) @ v0), True
    logger.warning("geodesic shooting from %s to %s failed: %s", x, y, result.message)
    d = y - x
    return float(d @ tensor(0.5 * (x + y)) @ d), False


def hessian_metric(potential: ConvexPotential) -> MetricModel:
    """
    Hessian metric g = D²φ.

    In one dimension distances are exact: d(x, y) = |∫_x^y √φ''|. In higher
    dimensions they come from geodesic shooting and are flagged approximate.
    """
    return metric_from_tensor(potential.hessian, potential.dim, name=f"hessian:{potential.name}")


def induced_metric_model(cost: CostFunction) -> MetricModel:
    """Metric model of the tensor -c_{x,y}(x, x) induced by a cost."""

    def tensor(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return induced_metric(cost, x)
        flat = x.reshape(-1, x.shape[-1])
        return np.stack([induced_metric(cost, p) for p in flat]).reshape(
            *x.shape[:-1], cost.dim, cost.dim
        )

    return metric_from_tensor(tensor, cost.dim, name=f"induced:{cost.name}")


def metric_from_tensor(tensor: PointFn, dim: int, name: str = "metric") -> MetricModel:
    if dim == 1:
        arclength = _arclength_1d(tensor)
        return MetricModel(
            dim=1,
            tensor=tensor,
            dist_sq_fn=lambda x, y: float((arclength(x) - arclength(y))[0] ** 2),
            arclength=arclength,
            name=name,
        )
    return MetricModel(
        dim=dim,
        tensor=tensor,
        dist_sq_fn=lambda x, y: shooting_dist_sq(tensor, x, y)[0],
        approximate=True,
        name=name,
    )


# =============================================================================
# COMPARABILITY
# =============================================================================


@dataclass
class ComparabilityEstimate:
    """Sampled constants with lambda_hat·d² ≤ c ≤ Lambda_hat·d²."""

    lambda_hat: float
    Lambda_hat: float
    n_samples: int
    domain_bounds: Array = field(repr=False)
    skipped: int = 0


def estimate_comparability(
    cost: CostFunction,
    metric: MetricModel,
    bounds: ArrayLike,
    n_samples: int,
    seed: int = 0,
) -> ComparabilityEstimate:
    """
    Estimate λ, Λ with λd² ≤ c ≤ Λd² from random pairs in a box.

    Args:
        bounds: Array of shape (dim, 2) with lower and upper corners per axis
        n_samples: Number of random pairs (at least 2)

    Raises:
        EmptySample: If every pair had d² below tol_geom.
    """
    if n_samples < 2:
        raise EmptySample("need at least two samples")
    box = np.asarray(bounds, dtype=float).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    lows, highs = box[:, 0], box[:, 1]
    xs = rng.uniform(lows, highs, size=(n_samples, box.shape[0]))
    ys = rng.uniform(lows, highs, size=(n_samples, box.shape[0]))

    ratios = []
    for x, y in zip(xs, ys, strict=True):
        d2 = metric.dist_sq(x, y)
        if d2 < TOL_GEOM:
            continue
        ratios.append(float(cost.eval(x, y)) / d2)
    if not ratios:
        raise EmptySample("every sampled pair was closer than tol_geom")
    return ComparabilityEstimate(
        lambda_hat=min(ratios),
        Lambda_hat=max(ratios),
        n_samples=len(ratios),
        domain_bounds=box,
        skipped=n_samples - len(ratios),
    )
