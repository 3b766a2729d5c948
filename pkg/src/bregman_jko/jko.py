#!/usr/bin/env python3
"""
Minimizing-movement scheme with a general transport cost.

Each step solves

    ρ_{k+1} = argmin  β⁻¹E(ρ) + D(ρ) + (1/τ)·T_c(ρ, ρ_k)

over grid densities. Two inner solvers are available:

- ``entropic-proximal`` (default) replaces T_c by the Sinkhorn divergence
  S_ε and minimizes the resulting strictly convex problem. The concave
  self-transport term is linearized at the current iterate and each
  linearized problem is solved by generalized Sinkhorn scaling in the log
  domain.
- ``mirror-descent`` keeps the exact T_c, takes damped Gibbs steps on the
  simplex using network-simplex potentials and certifies the result with a
  duality gap.

The flow runner chains steps into the piecewise-constant interpolant and
records per-step diagnostics; the remaining functions are the a-posteriori
checks run on finished trajectories.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from .errors import (
    BregmanJkoError,
    ConfigError,
    DegenerateDensity,
    DomainError,
    NoConvergence,
    SizeCap,
)
from .geometry import CostFunction, MetricModel, estimate_comparability
from .measures import (
    DiscreteDensity,
    DiscreteDomain,
    DriftPotential,
    drift,
    entropy,
    second_moment,
    write_density_csv,
    zero_drift,
)
from .transport import (
    EXACT_SIZE_CAP,
    CostMatrix,
    SinkhornState,
    TransportPlan,
    entropic_ot,
    eps_scaling_sinkhorn,
    exact_ot,
    log_sinkhorn,
    monotone_is_exact,
    monotone_ot,
    symmetric_sinkhorn,
    wasserstein2_sq,
)


logger = logging.getLogger(__name__)

Array = NDArray[np.float64]
VectorField = Callable[[Array], Array]

SOLVERS = ("entropic-proximal", "mirror-descent")
DEFAULT_EPS_FACTOR = 1e-2
DEFAULT_INNER_TOL = 1e-8
DEFAULT_INNER_MAX_ITERS = 20_000
MIRROR_STEP = 0.5
MIX_WEIGHT = 1e-3
TOL_SELF_FLOOR = 1e-13
DEGENERATE_MASS = 1.0 - 1e-9


# =============================================================================
# CONFIGURATION
# =============================================================================


@dataclass(frozen=True)
class JkoConfig:
    """
    Parameters of one minimizing-movement run.

    Attributes:
        tau: Time step τ
        t_end: Final time; the run takes ceil(t_end/τ) steps
        cost: Transport cost c(x, y), x in the new density and y in the old
        psi: Drift potential ψ ≥ 0
        beta_inv: Diffusion coefficient β⁻¹
        inner_solver: "entropic-proximal" or "mirror-descent"
        eps: Entropic parameter; None means eps_factor × median cost entry
        eps_factor: Relative entropic parameter used when eps is None
        continuation: Solve cold steps at 2ε first and warm-start ε from it
        inner_tol: Stationarity tolerance (entropic-proximal) or duality gap
            (mirror-descent)
        inner_max_iters: Inner iteration budget per step
        exact_size_cap: Entry cap for network-simplex plans in diagnostics
        strict: Raise NoConvergence when the budget runs out; otherwise log
            and return the best iterate
    """

    tau: float
    t_end: float
    cost: CostFunction
    psi: DriftPotential = field(default_factory=zero_drift)
    beta_inv: float = 1.0
    inner_solver: str = "entropic-proximal"
    eps: float | None = None
    eps_factor: float = DEFAULT_EPS_FACTOR
    continuation: bool = True
    inner_tol: float = DEFAULT_INNER_TOL
    inner_max_iters: int = DEFAULT_INNER_MAX_ITERS
    exact_size_cap: int = EXACT_SIZE_CAP
    strict: bool = True

    def __post_init__(self):
        problems = []
        if not self.tau > 0:
            problems.append(f"tau must be positive, got {self.tau}")
        if not self.t_end >= self.tau:
            problems.append(f"t_end ({self.t_end}) must be at least tau ({self.tau})")
        if not self.beta_inv > 0:
            problems.append(f"beta_inv must be positive, got {self.beta_inv}")
        if self.inner_solver not in SOLVERS:
            problems.append(f"unknown inner solver {self.inner_solver!r}")
        if self.eps is not None and not self.eps > 0:
            problems.append(f"eps must be positive, got {self.eps}")
        if not self.eps_factor > 0:
            problems.append(f"eps_factor must be positive, got {self.eps_factor}")
        if not self.inner_tol > 0 or self.inner_max_iters < 1:
            problems.append("inner_tol and inner_max_iters must be positive")
        if self.cost.tangent_basis is not None:
            problems.append(f"cost {self.cost.name} is not defined on a flat grid chart")
        if problems:
            raise ConfigError("invalid JKO configuration", problems)

    @property
    def cost_name(self) -> str:
        return self.cost.name

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_end / self.tau - 1e-9))


@dataclass
class StepContext:
    """
    State carried between steps of one run.

    Holds the cost matrix on the grid, the resolved ε and the self-transport
    potentials of the last accepted density, which warm-start the next step.
    """

    domain: DiscreteDomain
    matrix: CostMatrix
    eps: float
    symmetric: bool
    self_state: "_SelfTransport | None" = None

    @classmethod
    def create(cls, domain: DiscreteDomain, config: JkoConfig) -> "StepContext":
        if config.cost.ambient_dim != domain.dim:
            raise DomainError(
                f"cost {config.cost.name} acts on dimension {config.cost.ambient_dim}, "
                f"grid has dimension {domain.dim}"
            )
        matrix = CostMatrix.from_cost(config.cost, domain.nodes)
        entries = matrix.entries
        symmetric = bool(np.allclose(entries, entries.T, rtol=1e-13, atol=0.0))
        return cls(domain, matrix, resolve_eps(config, matrix), symmetric)


def resolve_eps(config: JkoConfig, matrix: CostMatrix) -> float:
    """The configured ε, or eps_factor × median cost entry."""
    if config.eps is not None:
        return float(config.eps)
    median = matrix.median
    if median <= 0:
        raise DomainError("cost matrix has zero median; set eps explicitly")
    return config.eps_factor * median


# =============================================================================
# TRANSPORT TERMS
# =============================================================================


@dataclass
class _SelfTransport:
    """Potentials and value of OT_ε(m, m) on the support of m."""

    support: Array
    f: Array
    g: Array
    value: float

    @property
    def gradient(self) -> Array:
        """½(f + g), the gradient of ½OT_ε(m, m) with respect to m."""
        return 0.5 * (self.f + self.g)


def _self_transport(
    entries: Array,
    masses: Array,
    eps: float,
    symmetric: bool,
    tol: float,
    max_iters: int,
    warm: _SelfTransport | None = None,
) -> _SelfTransport:
    support = masses > 0
    sub = entries[np.ix_(support, support)]
    log_a = np.log(masses[support])
    if warm is None or not np.array_equal(warm.support, support):
        state = eps_scaling_sinkhorn(sub, log_a, log_a, eps, tol, max_iters, symmetric=symmetric)
    elif symmetric:
        state = symmetric_sinkhorn(sub, log_a, eps, warm.f, tol, max_iters)
    else:
        state = log_sinkhorn(sub, log_a, log_a, eps, warm.f, warm.g, tol, max_iters)
    return _SelfTransport(support, state.f, state.g, state.dual_value(log_a, log_a, eps))


def _counting_ot(
    entries: Array, a: Array, b: Array, eps: float, tol: float, max_iters: int
) -> tuple[float, SinkhornState]:
    rows, cols = a > 0, b > 0
    sub = entries[np.ix_(rows, cols)]
    log_a, log_b = np.log(a[rows]), np.log(b[cols])
    state = eps_scaling_sinkhorn(sub, log_a, log_b, eps, tol, max_iters)
    return state.dual_value(log_a, log_b, eps), state


def debiased_transport(
    entries: Array,
    masses: ArrayLike,
    masses_prev: ArrayLike,
    eps: float,
    tol: float = 1e-12,
    max_iters: int = 100_000,
) -> float:
    """
    Sinkhorn divergence OT_ε(m, q) - ½OT_ε(m, m) - ½OT_ε(q, q) for a self-cost matrix.

    The three terms use the counting reference measure; the divergence is the
    same as with the product reference because the reference terms cancel.
    """
    m, q = np.asarray(masses, dtype=float), np.asarray(masses_prev, dtype=float)
    symmetric = bool(np.allclose(entries, entries.T, rtol=1e-13, atol=0.0))
    cross, _ = _counting_ot(entries, m, q, eps, tol, max_iters)
    self_m = _self_transport(entries, m, eps, symmetric, tol, max_iters).value
    self_q = _self_transport(entries, q, eps, symmetric, tol, max_iters).value
    return cross - 0.5 * (self_m + self_q)


def exact_transport(
    cost: CostFunction,
    rho: DiscreteDensity,
    rho_prev: DiscreteDensity,
    size_cap: int = EXACT_SIZE_CAP,
) -> TransportPlan:
    """Optimal plan between two grid densities: quantile coupling when exact, else simplex."""
    matrix = CostMatrix.from_cost(cost, rho.domain.nodes, rho_prev.domain.nodes)
    if rho.domain.dim == 1 and monotone_is_exact(cost):
        return monotone_ot(matrix, rho, rho_prev)
    return exact_ot(matrix, rho, rho_prev, size_cap=size_cap)


def plan_for_diagnostics(
    rho: DiscreteDensity, rho_prev: DiscreteDensity, config: JkoConfig, eps: float | None = None
) -> TransportPlan:
    """
    An optimal plan for T_c(ρ, ρ_prev), as exact as the grid size allows.

    Falls back to the entropic plan (solver tag "entropic(ε)") above the size cap.
    """
    try:
        return exact_transport(config.cost, rho, rho_prev, config.exact_size_cap)
    except SizeCap:
        matrix = CostMatrix.from_cost(config.cost, rho.domain.nodes, rho_prev.domain.nodes)
        eps = eps if eps is not None else resolve_eps(config, matrix)
        logger.info("plan above the exact size cap; using the entropic plan at eps=%.3e", eps)
        return entropic_ot(matrix, rho, rho_prev, eps, debias=False)


def transport_cost(
    rho: DiscreteDensity,
    rho_prev: DiscreteDensity,
    config: JkoConfig,
    context: StepContext | None = None,
) -> float:
    """T_c(ρ, ρ_prev) as the configured solver defines it."""
    if config.inner_solver == "mirror-descent":
        return exact_transport(config.cost, rho, rho_prev, config.exact_size_cap).cost_value
    context = context or StepContext.create(rho.domain, config)
    return debiased_transport(context.matrix.entries, rho.masses, rho_prev.masses, context.eps)


def jko_objective(
    rho: DiscreteDensity,
    rho_prev: DiscreteDensity,
    config: JkoConfig,
    context: StepContext | None = None,
) -> float:
    """J_k(ρ) = β⁻¹E(ρ) + D(ρ) + (1/τ)·T_c(ρ, ρ_prev)."""
    if rho.domain is not rho_prev.domain:
        raise DomainError("both densities must live on the same domain")
    energy = config.beta_inv * entropy(rho) + drift(rho, config.psi)
    return energy + transport_cost(rho, rho_prev, config, context) / config.tau


# =============================================================================
# INNER SOLVERS
# =============================================================================


@dataclass
class _InnerResult:
    masses: Array
    objective: float
    transport: float
    residual: float
    iterations: int
    self_state: _SelfTransport | None = None


def _kl_energy(masses: Array, log_w: Array, psi: Array, b: float) -> float:
    positive = masses > 0
    m = masses[positive]
    return float(b * np.sum(m * (np.log(m) - log_w[positive])) + psi @ masses)


def _stationarity(masses: Array, gradient: Array) -> float:
    """Σ m |G - ⟨m, G⟩|, zero exactly at a stationary point on the simplex."""
    return float(masses @ np.abs(gradient - masses @ gradient))


def _entropic_proximal(
    context: StepContext,
    q: Array,
    psi: Array,
    config: JkoConfig,
    eps: float,
    tol: float,
    initial: Array | None,
    warm_self: _SelfTransport | None,
    warm_p: _SelfTransport | None = None,
) -> _InnerResult:
    """
    Minimize b·KL(m | w) + ⟨ψ, m⟩ + (1/τ)·S_ε(m, q) over the simplex.

    Majorize-minimize on the concave term -½OT_ε(m, m): with its gradient
    -p frozen, the problem is a generalized Sinkhorn problem whose row
    update has the closed form

        log m = [τb(log w - 1) - τψ + p + ε·L] / (τb + ε),  L_i = LSE_j((g_j - C_ij)/ε).

    Each linearized problem is solved only until its residual falls below a
    quarter of the current full residual; p is then refreshed by a warm
    self-transport solve.
    """
    entries = context.matrix.entries
    b, tau = config.beta_inv, config.tau
    w = context.domain.vol_weights
    log_w = np.log(w)
    support = q > 0
    cols = entries[:, support]
    log_q = np.log(q[support])
    self_tol = max(TOL_SELF_FLOOR, 0.1 * tol * tau / eps)
    budget = config.inner_max_iters

    self_q = _self_transport(
        entries, q, eps, context.symmetric, self_tol, budget, warm=warm_self
    )
    if initial is not None:
        m = np.clip(np.asarray(initial, dtype=float), 0.0, None)
        m = (1.0 - MIX_WEIGHT) * m / m.sum() + MIX_WEIGHT * w / w.sum()
    elif np.all(support):
        m = q.copy()
    else:
        m = (1.0 - MIX_WEIGHT) * q + MIX_WEIGHT * w / w.sum()

    if warm_p is not None and np.all(warm_p.support):
        p_state = _self_transport(entries, m, eps, context.symmetric, self_tol, budget, warm_p)
    elif np.all(support) and initial is None:
        p_state = self_q
    else:
        p_state = _self_transport(entries, m, eps, context.symmetric, self_tol, budget)

    g = self_q.g.copy() if np.all(support) else _counting_ot(
        entries, m, q, eps, self_tol, budget
    )[1].g
    base = tau * b * (log_w - 1.0) - tau * psi
    denom = tau * b + eps

    iterations = 0
    full_residual = np.inf
    best: tuple[float, Array, Array, Array, _SelfTransport] | None = None
    log_m = np.log(m)
    f = np.zeros_like(m)
    while iterations < budget:
        target = max(0.1 * tol, 0.25 * full_residual)
        p = p_state.gradient
        while True:
            lse_g = logsumexp((g[None, :] - cols) / eps, axis=1)
            log_m = (base + p + eps * lse_g) / denom
            f = eps * (log_m - lse_g)
            g = eps * (log_q - logsumexp((f[:, None] - cols) / eps, axis=0))
            iterations += 1
            log_m = f / eps + logsumexp((g[None, :] - cols) / eps, axis=1)
            m = np.exp(log_m)
            h = b * (log_m - log_w + 1.0) + psi + (f - p) / tau
            if _stationarity(m, h) <= target or iterations >= budget:
                break

        p_state = _self_transport(
            entries, m, eps, context.symmetric, self_tol, budget, warm=p_state
        )
        gradient = b * (log_m - log_w + 1.0) + psi + (f - p_state.gradient) / tau
        full_residual = _stationarity(m, gradient)
        if best is None or full_residual < best[0]:
            best = (full_residual, m.copy(), f.copy(), g.copy(), p_state)
        logger.debug("eps=%.3e iter %d: stationarity %.3e", eps, iterations, full_residual)
        if full_residual < tol:
            break

    assert best is not None
    residual, m, f, g, p_state = best
    cross = float(f @ m + g @ q[support] - eps * q.sum())
    divergence = cross - 0.5 * (p_state.value + self_q.value)
    result = _InnerResult(
        masses=m / m.sum(),
        objective=_kl_energy(m, log_w, psi, b) + divergence / tau,
        transport=divergence,
        residual=residual,
        iterations=iterations,
        self_state=p_state,
    )
    if residual >= tol:
        raise NoConvergence(
            f"entropic-proximal step stopped at stationarity {residual:.2e} "
            f"after {iterations} iterations",
            best=result,
            iterations=iterations,
            residual=residual,
        )
    return result


def _mirror_descent(
    context: StepContext,
    q: Array,
    psi: Array,
    config: JkoConfig,
    initial: Array | None,
) -> _InnerResult:
    """
    Damped Gibbs iterations with exact transport potentials.

    With u the row potential of the optimal plan for (m, q), the update is
    log m ← (1 - θ_t)·log m + θ_t·[log w - (ψ + u/τ)/b], θ_t = θ_0/√(t+1).
    The column potential v of every plan gives the lower bound

        D(v) = ⟨v, q⟩/τ - b·log Σ_i w_i exp(-(ψ_i + min_j(C_ij - v_j)/τ)/b)

    and iteration stops once the best objective is within inner_tol of it.
    """
    b, tau = config.beta_inv, config.tau
    w = context.domain.vol_weights
    log_w = np.log(w)
    support = q > 0
    matrix = CostMatrix(context.matrix.entries[:, support])
    q_support = q[support]

    start = q if initial is None else np.clip(np.asarray(initial, dtype=float), 0.0, None)
    start = (1.0 - MIX_WEIGHT) * start / start.sum() + MIX_WEIGHT * w / w.sum()
    log_m = np.log(start)

    best_objective, best_masses, best_transport = np.inf, start, 0.0
    best_lower = -np.inf
    gap = np.inf
    for t in range(config.inner_max_iters):
        m = np.exp(log_m)
        m /= m.sum()
        plan = exact_ot(matrix, m, q_support, size_cap=config.exact_size_cap)
        assert plan.duals is not None
        u, v = plan.duals
        objective = _kl_energy(m, log_w, psi, b) + plan.cost_value / tau
        if objective < best_objective:
            best_objective, best_masses, best_transport = objective, m.copy(), plan.cost_value
        c_transform = np.min(matrix.entries - v[None, :], axis=1)
        lower = float(v @ q_support) / tau - b * float(
            logsumexp(log_w - (psi + c_transform / tau) / b)
        )
        best_lower = max(best_lower, lower)
        gap = best_objective - best_lower
        if gap < config.inner_tol:
            return _InnerResult(best_masses, best_objective, best_transport, gap, t + 1)

        theta = MIRROR_STEP / math.sqrt(t + 1)
        target = log_w - (psi + (u - u.min()) / tau) / b
        log_m = (1.0 - theta) * log_m + theta * target
        log_m -= logsumexp(log_m)

    result = _InnerResult(
        best_masses, best_objective, best_transport, gap, config.inner_max_iters
    )
    raise NoConvergence(
        f"mirror descent stopped with duality gap {gap:.2e}",
        best=result,
        iterations=config.inner_max_iters,
        residual=gap,
    )


# =============================================================================
# STEPS AND FLOWS
# =============================================================================


@dataclass(frozen=True)
class StepDiagnostics:
    """
    Per-step record.

    Attributes:
        index: k of the produced density ρ_k
        objective: J_{k-1}(ρ_k)
        objective_prev: J_{k-1}(ρ_{k-1}) = β⁻¹E + D of the previous density
        energy: β⁻¹E(ρ_k) + D(ρ_k)
        transport: T_c(ρ_k, ρ_{k-1}) as the solver defines it
        stationarity: Final stationarity residual or duality gap
        el_residual: Largest Euler-Lagrange residual over the test fields
        el_plan: Solver tag of the plan used for the Euler-Lagrange residual
    """

    index: int
    objective: float
    objective_prev: float
    energy: float
    entropy: float
    drift: float
    transport: float
    second_moment: float
    stationarity: float
    iterations: int
    eps: float | None
    solver: str
    converged: bool = True
    el_residual: float = float("nan")
    el_plan: str = ""

    @property
    def objective_violation(self) -> float:
        return max(0.0, self.objective - self.objective_prev)


def check_resolvable(rho: DiscreteDensity) -> None:
    """
    Raises:
        DegenerateDensity: If one cell carries essentially all the mass.
    """
    peak = int(np.argmax(rho.masses))
    if rho.masses[peak] > DEGENERATE_MASS:
        raise DegenerateDensity(
            f"cell {peak} carries {rho.masses[peak]:.12f} of the mass; "
            "the density is below the grid resolution"
        )


def jko_step(
    rho_prev: DiscreteDensity,
    config: JkoConfig,
    context: StepContext | None = None,
    initial: ArrayLike | None = None,
    index: int = 1,
) -> tuple[DiscreteDensity, StepDiagnostics]:
    """
    One proximal step from ρ_prev.

    Args:
        rho_prev: Previous density ρ_k
        config: Scheme parameters
        context: Run state with the cost matrix and warm starts; created if None
        initial: Optional starting masses for the inner solver
        index: k + 1, recorded in the diagnostics

    Returns:
        (ρ_{k+1}, diagnostics)

    Raises:
        NoConvergence: If the inner budget runs out and ``config.strict``;
            ``best`` is the best density found
    """
    domain = rho_prev.domain
    context = context or StepContext.create(domain, config)
    q = rho_prev.masses / rho_prev.masses.sum()
    psi = config.psi.values(domain)
    eps = context.eps if config.inner_solver == "entropic-proximal" else None
    start = None if initial is None else np.asarray(initial, dtype=float)

    converged = True
    try:
        if eps is None:
            result = _mirror_descent(context, q, psi, config, start)
        else:
            warm_p = None
            if config.continuation and context.self_state is None:
                try:
                    coarse = _entropic_proximal(
                        context, q, psi, config, 2.0 * eps, max(config.inner_tol, 1e-6), start, None
                    )
                except NoConvergence as e:
                    if not isinstance(e.best, _InnerResult):
                        raise
                    coarse = e.best
                start, warm_p = coarse.masses, coarse.self_state
            result = _entropic_proximal(
                context, q, psi, config, eps, config.inner_tol, start, context.self_state, warm_p
            )
    except NoConvergence as e:
        if not isinstance(e.best, _InnerResult):
            raise
        if config.strict:
            raise NoConvergence(
                str(e),
                best=DiscreteDensity.from_masses(domain, e.best.masses),
                iterations=e.iterations,
                residual=e.residual,
            ) from e
        logger.warning("step %d: %s; keeping the best iterate", index, e)
        result, converged = e.best, False

    rho = DiscreteDensity.from_masses(domain, result.masses)
    if result.self_state is not None:
        context.self_state = result.self_state
    try:
        check_resolvable(rho)
    except DegenerateDensity as e:
        logger.warning("step %d: %s", index, e)

    ent = entropy(rho)
    dr = drift(rho, config.psi)
    objective_prev = config.beta_inv * entropy(rho_prev) + drift(rho_prev, config.psi)
    if result.objective > objective_prev + config.inner_tol:
        logger.warning(
            "step %d: objective rose from %.12g to %.12g", index, objective_prev, result.objective
        )
    diagnostics = StepDiagnostics(
        index=index,
        objective=result.objective,
        objective_prev=objective_prev,
        energy=config.beta_inv * ent + dr,
        entropy=ent,
        drift=dr,
        transport=result.transport,
        second_moment=float("nan"),
        stationarity=result.residual,
        iterations=result.iterations,
        eps=eps,
        solver=config.inner_solver,
        converged=converged,
    )
    return rho, diagnostics


@dataclass
class FlowTrajectory:
    """
    Densities ρ^τ_0 … ρ^τ_K of one run with their diagnostics.

    ``diagnostics[k - 1]`` belongs to ``steps[k]``. A failed run keeps the
    steps computed before the failure and records where and why it stopped.
    """

    config: JkoConfig
    steps: list[DiscreteDensity]
    diagnostics: list[StepDiagnostics] = field(default_factory=list)
    failure_index: int | None = None
    failure_reason: str | None = None

    @property
    def complete(self) -> bool:
        return self.failure_index is None and len(self.steps) == self.config.n_steps + 1

    @property
    def times(self) -> Array:
        return self.config.tau * np.arange(len(self.steps))

    @property
    def energies(self) -> Array:
        rho0, config = self.steps[0], self.config
        first = config.beta_inv * entropy(rho0) + drift(rho0, config.psi)
        return np.array([first] + [d.energy for d in self.diagnostics])

    def at(self, t: float) -> DiscreteDensity:
        """Piecewise-constant interpolant: steps[k] for t in ((k-1)τ, kτ], steps[0] at t = 0."""
        if t < 0:
            raise DomainError(f"negative time {t}")
        k = 0 if t == 0 else int(math.ceil(t / self.config.tau - 1e-9))
        if k >= len(self.steps):
            raise DomainError(f"time {t} lies beyond the computed trajectory")
        return self.steps[k]

    def write(self, out_dir: Path) -> None:
        """Write steps/step_XXXX.csv per density and diagnostics.csv."""
        steps_dir = out_dir / "steps"
        steps_dir.mkdir(parents=True, exist_ok=True)
        for k, rho in enumerate(self.steps):
            write_density_csv(rho, steps_dir / f"step_{k:04d}.csv")
        rows = [
            [d.index, d.objective, d.entropy, d.drift, d.second_moment, d.transport, d.el_residual]
            for d in self.diagnostics
        ]
        np.savetxt(
            out_dir / "diagnostics.csv",
            np.array(rows, dtype=float).reshape(-1, 7),
            delimiter=",",
            header="k,J_k,E,D,M,T_c,el_residual",
            comments="",
            fmt=["%d"] + ["%.17g"] * 6,
        )


def run_flow(
    rho0: DiscreteDensity,
    config: JkoConfig,
    x0: ArrayLike | None = None,
    fields: Sequence[VectorField] | None = None,
    el_residuals: bool = True,
    progress: Callable[[int, int], None] | None = None,
) -> FlowTrajectory:
    """
    Run ceil(t_end/τ) steps from ρ0.

    Args:
        rho0: Initial density
        config: Scheme parameters
        x0: Reference point for second moments; the box centre when omitted
        fields: Test fields for the Euler-Lagrange residual
        el_residuals: Compute the Euler-Lagrange residual of every step
        progress: Called with (k, K) after each step

    Returns:
        The trajectory. Errors do not propagate: the partial trajectory is
        returned with ``failure_index`` and ``failure_reason`` set.
    """
    domain = rho0.domain
    x0 = np.mean(domain.bounds, axis=1) if x0 is None else np.asarray(x0, dtype=float)
    fields = list(fields) if fields is not None else default_fields(domain)
    trajectory = FlowTrajectory(config, [rho0])
    total = config.n_steps
    try:
        context = StepContext.create(domain, config)
    except BregmanJkoError as e:
        trajectory.failure_index, trajectory.failure_reason = 1, str(e)
        return trajectory

    for k in range(1, total + 1):
        rho_prev = trajectory.steps[-1]
        try:
            rho, diagnostics = jko_step(rho_prev, config, context, index=k)
            moment = second_moment(rho, x0)
            el, tag = float("nan"), ""
            if el_residuals:
                plan = plan_for_diagnostics(rho, rho_prev, config, context.eps)
                el = float(np.max(euler_lagrange_residual(rho, rho_prev, plan, config, fields)))
                tag = plan.solver_tag
        except BregmanJkoError as e:
            logger.warning("flow stopped at step %d: %s", k, e)
            trajectory.failure_index, trajectory.failure_reason = k, f"{type(e).__name__}: {e}"
            return trajectory
        trajectory.steps.append(rho)
        trajectory.diagnostics.append(
            replace(diagnostics, second_moment=moment, el_residual=el, el_plan=tag)
        )
        logger.debug(
            "step %d/%d: energy %.10g, stationarity %.2e",
            k,
            total,
            diagnostics.energy,
            diagnostics.stationarity,
        )
        if progress is not None:
            progress(k, total)
    return trajectory


# =============================================================================
# OPTIMALITY DIAGNOSTICS
# =============================================================================


def default_fields(domain: DiscreteDomain) -> list[VectorField]:
    """ξ_a(x) = sin(π(x_a - lo_a)/L_a)·e_a, one field per axis, tangential at the box."""
    fields = []
    for a in range(domain.dim):
        lo, hi = domain.bounds[a]

        def xi(x: Array, a: int = a, lo: float = lo, length: float = hi - lo) -> Array:
            out = np.zeros_like(x, dtype=float)
            out[..., a] = np.sin(np.pi * (x[..., a] - lo) / length)
            return out

        fields.append(xi)
    return fields


def divergence_g(domain: DiscreteDomain, xi: VectorField) -> Array:
    """div_g ξ at the nodes of the grid."""
    return domain.divergence(xi(domain.nodes))


def _plan_first_variation(
    cost: CostFunction, plan: TransportPlan, xs: Array, ys: Array, xi_values: Array
) -> float:
    """∬ ∇_x c(x, y)·ξ(x) dπ."""
    rows, cols = np.nonzero(plan.coupling)
    mass = plan.coupling[rows, cols]
    if cost.grad_x_fn is not None:
        grads = np.asarray(cost.grad_x_fn(xs[rows], ys[cols]), dtype=float).reshape(len(rows), -1)
    else:
        grads = np.array([cost.grad_x(xs[i], ys[j]) for i, j in zip(rows, cols, strict=True)])
    return float(np.sum(mass * np.sum(grads * xi_values[rows], axis=-1)))


def euler_lagrange_residual(
    rho_next: DiscreteDensity,
    rho_prev: DiscreteDensity,
    plan: TransportPlan | None,
    config: JkoConfig,
    fields: Sequence[VectorField] | None = None,
) -> Array:
    """
    Residual of the first-order optimality condition per test field.

    For each ξ returns |β⁻¹∫div_g ξ dρ - ∫⟨∇ψ, ξ⟩ dρ - (1/τ)∬⟨∇_x c(x, y), ξ(x)⟩ dπ|.

    Args:
        rho_next: The step output
        rho_prev: The step input
        plan: Optimal plan from rho_next to rho_prev; computed when None
        config: Scheme parameters
        fields: Vector fields tangential at the boundary; sine fields by default
    """
    domain = rho_next.domain
    plan = plan or plan_for_diagnostics(rho_next, rho_prev, config)
    fields = list(fields) if fields is not None else default_fields(domain)
    m = rho_next.masses
    grad_psi = config.psi.gradients(domain)
    residuals = []
    for xi in fields:
        xi_values = np.asarray(xi(domain.nodes), dtype=float).reshape(domain.size, domain.dim)
        diffusion = config.beta_inv * float(m @ divergence_g(domain, xi))
        drift_term = float(m @ np.sum(grad_psi * xi_values, axis=-1))
        transport_term = _plan_first_variation(
            config.cost, plan, domain.nodes, rho_prev.domain.nodes, xi_values
        )
        residuals.append(abs(diffusion - drift_term - transport_term / config.tau))
    return np.array(residuals)


@dataclass(frozen=True)
class FirstVariationReport:
    """Finite-difference derivatives along a pushforward next to their closed forms."""

    entropy_fd: float
    entropy_formula: float
    drift_fd: float
    drift_formula: float
    transport_fd: float
    transport_formula: float

    @property
    def max_error(self) -> float:
        return max(
            abs(self.entropy_fd - self.entropy_formula),
            abs(self.drift_fd - self.drift_formula),
            abs(self.transport_fd - self.transport_formula),
        )


def first_variation_check(
    rho: DiscreteDensity,
    rho_prev: DiscreteDensity,
    config: JkoConfig,
    xi: VectorField,
    s: float = 1e-5,
) -> FirstVariationReport:
    """
    Differentiate E, D and T_c along x ↦ x + sξ(x) and compare to the formulas.

    Masses stay attached to the moved nodes. The pushed density at a moved
    node is ρ/J_s with J_s = det(I + sDξ)·√g(x + sξ)/√g(x); its entropy
    derivative is -∫div_g ξ dρ, the drift derivative ∫⟨∇ψ, ξ⟩ dρ and the
    transport derivative ∬⟨∇_x c, ξ⟩ dπ for the optimal π.
    """
    domain = rho.domain
    nodes = domain.nodes
    m = rho.masses
    xi_values = np.asarray(xi(nodes), dtype=float).reshape(domain.size, domain.dim)
    positive = m > 0

    h = 1e-6
    jac = np.stack(
        [
            (np.asarray(xi(nodes + h * e)) - np.asarray(xi(nodes - h * e))) / (2.0 * h)
            for e in np.eye(domain.dim)
        ],
        axis=-1,
    )
    sqrt_det = domain.sqrt_det

    def pushed(sign: float) -> tuple[float, float, float]:
        moved = nodes + sign * s * xi_values
        jacobian = np.linalg.det(np.eye(domain.dim) + sign * s * jac)
        jacobian = jacobian * domain.metric.sqrt_det(moved) / sqrt_det
        density = rho.values[positive] / jacobian[positive]
        ent = float(m[positive] @ np.log(density))
        dr = float(m @ np.asarray(config.psi.psi(moved), dtype=float))
        matrix = CostMatrix(config.cost.pairwise(moved, rho_prev.domain.nodes))
        tr = exact_ot(matrix, m, rho_prev.masses, size_cap=config.exact_size_cap).cost_value
        return ent, dr, tr

    plus, minus = pushed(1.0), pushed(-1.0)
    fd = [(p - q) / (2.0 * s) for p, q in zip(plus, minus, strict=True)]
    plan = exact_transport(config.cost, rho, rho_prev, config.exact_size_cap)
    return FirstVariationReport(
        entropy_fd=fd[0],
        entropy_formula=-float(m @ divergence_g(domain, xi)),
        drift_fd=fd[1],
        drift_formula=float(m @ np.sum(config.psi.gradients(domain) * xi_values, axis=-1)),
        transport_fd=fd[2],
        transport_formula=_plan_first_variation(
            config.cost, plan, nodes, rho_prev.domain.nodes, xi_values
        ),
    )


# =============================================================================
# TRAJECTORY DIAGNOSTICS
# =============================================================================


@dataclass(frozen=True)
class DescentReport:
    max_energy_violation: float
    max_objective_violation: float
    violations: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def descent_report(traj: FlowTrajectory, tol: float | None = None) -> DescentReport:
    """Count steps where β⁻¹E + D or J_k rose by more than ``tol`` (inner_tol by default)."""
    tol = traj.config.inner_tol if tol is None else tol
    energy_jumps = np.diff(traj.energies)
    objective_jumps = np.array([d.objective - d.objective_prev for d in traj.diagnostics])
    jumps = np.maximum(energy_jumps, objective_jumps) if len(objective_jumps) else energy_jumps
    return DescentReport(
        max_energy_violation=float(max(0.0, *energy_jumps)) if len(energy_jumps) else 0.0,
        max_objective_violation=float(max(0.0, *objective_jumps))
        if len(objective_jumps)
        else 0.0,
        violations=int(np.count_nonzero(jumps > tol)),
    )


@dataclass(frozen=True)
class TelescopingReport:
    """
    Attributes:
        lhs: (1/τ)·Σ_k T_c(ρ_{k+1}, ρ_k)
        rhs: E+D(ρ_0) - E+D(ρ_K) + K·inner_tol
        max_adjacent: max_k T_c(ρ_{k+1}, ρ_k)
        adjacent_bound: τ·(E+D(ρ_0) + log Vol), using E+D ≥ -log Vol on a bounded box
    """

    lhs: float
    rhs: float
    max_adjacent: float
    adjacent_bound: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs and self.max_adjacent <= self.adjacent_bound


def telescoping_report(traj: FlowTrajectory) -> TelescopingReport:
    config = traj.config
    transports = np.array([d.transport for d in traj.diagnostics])
    energies = traj.energies
    k = len(traj.diagnostics)
    floor = -config.beta_inv * math.log(traj.steps[0].domain.volume)
    return TelescopingReport(
        lhs=float(transports.sum() / config.tau),
        rhs=float(energies[0] - energies[-1] + k * config.inner_tol),
        max_adjacent=float(transports.max()) if k else 0.0,
        adjacent_bound=float(config.tau * (energies[0] - floor + k * config.inner_tol)),
    )


@dataclass(frozen=True)
class TimeRegularityReport:
    """
    Attributes:
        pairs: (N, N', T_c(ρ_N', ρ_N)) for the sampled index pairs
        constant: max T_c/(τ|N - N'|) over the pairs
        w2_constant: The same ratio for W₂² in the given metric, if one was given
    """

    pairs: list[tuple[int, int, float]]
    constant: float
    w2_constant: float | None = None

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.constant))

    def ratio_to(self, other: "TimeRegularityReport") -> float:
        """Ratio of the larger to the smaller constant."""
        lo, hi = sorted([self.constant, other.constant])
        return hi / lo if lo > 0 else np.inf


def time_regularity_report(
    traj: FlowTrajectory,
    metric: MetricModel | None = None,
    strides: Sequence[int] = (1, 2, 4, 8),
    max_pairs: int = 8,
) -> TimeRegularityReport:
    """
    Empirical constant in T_c(ρ_N', ρ_N) ≤ Cτ|N' - N|.

    For each stride, up to ``max_pairs`` evenly spread pairs (N, N + stride)
    are evaluated with the configured transport cost; with a metric, W₂² is
    evaluated on the same pairs.
    """
    config = traj.config
    n = len(traj.steps)
    context = StepContext.create(traj.steps[0].domain, config)
    pairs: list[tuple[int, int, float]] = []
    w2_ratio = 0.0
    for stride in strides:
        if stride >= n:
            continue
        starts = np.unique(np.linspace(0, n - 1 - stride, min(max_pairs, n - stride)).astype(int))
        for start in starts:
            later, earlier = traj.steps[start + stride], traj.steps[start]
            value = transport_cost(later, earlier, config, context)
            pairs.append((int(start), int(start + stride), value))
            if metric is not None:
                w2 = wasserstein2_sq(later, earlier, metric)
                w2_ratio = max(w2_ratio, w2 / (config.tau * stride))
    constant = max((max(v, 0.0) / (config.tau * (b - a)) for a, b, v in pairs), default=0.0)
    return TimeRegularityReport(pairs, constant, w2_ratio if metric is not None else None)


@dataclass(frozen=True)
class SecondMomentReport:
    values: Array
    bound: float


def second_moment_report(
    traj: FlowTrajectory, x0: ArrayLike | None = None, metric: MetricModel | None = None
) -> SecondMomentReport:
    """M(ρ_k) for every step and the empirical uniform bound max_k M(ρ_k)."""
    domain = traj.steps[0].domain
    x0 = np.mean(domain.bounds, axis=1) if x0 is None else np.asarray(x0, dtype=float)
    values = np.array([second_moment(rho, x0, metric) for rho in traj.steps])
    return SecondMomentReport(values, float(values.max()))


@dataclass(frozen=True)
class TruncationReport:
    boundary_mass: Array
    threshold: float

    @property
    def max_boundary_mass(self) -> float:
        return float(self.boundary_mass.max())

    @property
    def holds(self) -> bool:
        return self.max_boundary_mass < self.threshold


def truncation_check(traj: FlowTrajectory, threshold: float = 1e-10) -> TruncationReport:
    """Mass on boundary cells at every step of a run on a truncated box."""
    mask = traj.steps[0].domain.boundary_mask
    masses = np.array([float(rho.masses[mask].sum()) for rho in traj.steps])
    return TruncationReport(masses, threshold)


@dataclass(frozen=True)
class MomentComparison:
    """T_c(ρ_0, ρ_1) against the lower bound λ(½M(ρ_0) - M(ρ_1))."""

    transport: float
    lower_bound: float
    lambda_hat: float

    @property
    def holds(self) -> bool:
        return self.transport >= self.lower_bound - 1e-12


def moment_comparison_check(
    rho0: DiscreteDensity,
    rho1: DiscreteDensity,
    cost: CostFunction,
    x0: ArrayLike,
    metric: MetricModel | None = None,
    n_samples: int = 200,
    seed: int = 0,
) -> MomentComparison:
    """
    Check T_c(ρ_0, ρ_1) ≥ λ̂·(½M(ρ_0) - M(ρ_1)).

    The bound follows from c ≥ λd² and d²(x, x0) ≤ 2d²(x, y) + 2d²(y, x0);
    λ̂ is estimated by sampling the box.
    """
    metric = metric or rho0.domain.metric
    estimate = estimate_comparability(cost, metric, rho0.domain.bounds, n_samples, seed=seed)
    transport = exact_transport(cost, rho0, rho1).cost_value
    bound = estimate.lambda_hat * (
        0.5 * second_moment(rho0, x0, metric) - second_moment(rho1, x0, metric)
    )
    return MomentComparison(transport, bound, estimate.lambda_hat)
