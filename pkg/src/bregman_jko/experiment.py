#!/usr/bin/env python3
"""
Sweep runner: JKO flows against an oracle over a grid of (τ, resolution).

For every sweep point the runner builds the domain, runs the flow, evaluates
the oracle at t_end and records one report row. A failing point becomes a
row marked ``failed`` with the reason; the sweep carries on.

Artifacts under the configured output directory:

    report.csv                     one row per sweep point
    report.yaml                    rows plus resolved config and environment stamp
    tau_<τ>_n<N>/steps/...         per-run densities
    tau_<τ>_n<N>/diagnostics.csv   per-step diagnostics
    oracle_n<N>.csv                oracle density at t_end
"""

import csv
import logging
import math
import platform
import time
from collections.abc import Callable
from concurrent.futures import Future, ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import metadata
from pathlib import Path

import numpy as np
from filelock import FileLock
from ruamel.yaml import YAML

from . import __version__
from .config import (
    ExperimentConfig,
    build_domain,
    build_initial,
    build_jko_config,
    dump_config,
    resolve_cost,
    resolve_drift,
    number,
    resolve_metric,
)
from .errors import BregmanJkoError, ConfigError
from .fokker_planck import (
    SmoothBump,
    fd_solve,
    heat_cosine_density,
    ou_analytic,
    stationary_density,
    test_function_dictionary,
    weak_distances,
    weak_residual,
)
from .geometry import check_a1_a2, estimate_comparability, induced_metric
from .jko import (
    SOLVERS,
    FlowTrajectory,
    descent_report,
    run_flow,
    telescoping_report,
    time_regularity_report,
)
from .measures import (
    DiscreteDensity,
    DiscreteDomain,
    gaussian_density,
    l1_distance,
    mean,
    variance,
    write_density_csv,
)


logger = logging.getLogger(__name__)

ORACLES = ("fd", "analytic-heat", "analytic-ou", "stationary", "none")
LOCK_NAME = ".bregman-jko.lock"
LOCK_TIMEOUT = 10
VALIDATION_SAMPLES = 200
DEGENERACY_RATIO = 1e-2


# =============================================================================
# REPORT
# =============================================================================


@dataclass
class ReportRow:
    """
    Metrics of one sweep point.

    ``status`` is "ok" or "failed"; a failed row carries ``reason`` and the
    metrics that could still be computed, NaN elsewhere. Metrics that need an
    oracle stay NaN when the config has ``oracle.kind: none``.
    """

    tau: float
    resolution: int
    status: str = "ok"
    reason: str = ""
    steps: int = 0
    l1_error: float = math.nan
    mean_error: float = math.nan
    variance_error: float = math.nan
    max_descent_violation: float = math.nan
    max_el_residual: float = math.nan
    weak_residual: float = math.nan
    max_weak_distance: float = math.nan
    time_regularity: float = math.nan
    telescoping_holds: bool = False
    wall_time: float = math.nan
    weak_distances: list[float] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.status != "ok"


CSV_COLUMNS = [f.name for f in fields(ReportRow) if f.name != "weak_distances"]


@dataclass
class RunReport:
    name: str
    rows: list[ReportRow]
    config: dict
    environment: dict

    @property
    def failed_rows(self) -> list[ReportRow]:
        return [row for row in self.rows if row.failed]

    def row(self, tau: float, resolution: int) -> ReportRow:
        for row in self.rows:
            if row.resolution == resolution and math.isclose(row.tau, tau):
                return row
        raise KeyError((tau, resolution))

    def write(self, out_dir: Path) -> None:
        """Write report.csv and report.yaml."""
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _csv_value(v) for k, v in asdict(row).items()})

        yaml = YAML()
        yaml.default_flow_style = False
        document = {
            "name": self.name,
            "version": __version__,
            "environment": self.environment,
            "config": self.config,
            "rows": [_plain(asdict(row)) for row in self.rows],
        }
        with open(out_dir / "report.yaml", "w") as f:
            yaml.dump(document, f)


def _csv_value(value: object) -> object:
    if isinstance(value, float):
        return repr(value)
    return value


def _plain(value: object) -> object:
    """numpy scalars and containers to plain Python for the YAML dumper."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def environment_stamp() -> dict:
    stamp = {"bregman-jko": __version__, "python": platform.python_version()}
    for package in ("numpy", "scipy", "pot", "ruamel.yaml", "filelock"):
        try:
            stamp[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            stamp[package] = "missing"
    stamp["platform"] = platform.platform()
    return stamp


# =============================================================================
# ORACLE
# =============================================================================


def oracle_density(
    config: ExperimentConfig, domain: DiscreteDomain, rho0: DiscreteDensity
) -> DiscreteDensity | None:
    """
    Reference density at t_end, or None for ``oracle.kind: none``.

    Kinds:
        fd: fd_solve with oracle.dt (default 1e-4), oracle.scheme, oracle.upwind
        analytic-heat: cosine eigenmode with initial.amplitude
        analytic-ou: Gaussian with ou_analytic moments from initial.mean/variance
        stationary: e^{-ψ/β⁻¹} normalised

    Raises:
        ConfigError: For an unknown kind.
    """
    spec = config.oracle
    kind = spec.get("kind", "fd")
    if kind == "none":
        return None
    if kind == "fd":
        solution = fd_solve(
            rho0,
            resolve_drift(config.psi),
            config.t_end,
            number(spec, "dt", 1e-4, "oracle"),
            beta_inv=config.beta_inv,
            scheme=spec.get("scheme", "implicit"),
            upwind=bool(spec.get("upwind", False)),
            store_every=int(number(spec, "store_every", 1_000_000, "oracle")),
        )
        return solution.final
    if kind == "analytic-heat":
        amplitude = number(config.initial, "amplitude", 0.5, "initial")
        return heat_cosine_density(domain, config.t_end, amplitude, config.beta_inv)
    if kind == "analytic-ou":
        m, v = ou_analytic(
            number(config.initial, "mean", 0.0, "initial"),
            number(config.initial, "variance", 1.0, "initial"),
            config.t_end,
            config.beta_inv,
        )
        return gaussian_density(domain, m, v)
    if kind == "stationary":
        return stationary_density(domain, resolve_drift(config.psi), config.beta_inv)
    raise ConfigError(f"unknown oracle {kind!r}", [f"oracle.kind must be one of {ORACLES}"])


def run_oracle(config: ExperimentConfig) -> list[Path]:
    """Evaluate the oracle at every resolution and write oracle_n<N>.csv files."""
    config.output.mkdir(parents=True, exist_ok=True)
    written = []
    with FileLock(config.output / LOCK_NAME, timeout=LOCK_TIMEOUT):
        for resolution in config.resolutions:
            domain = build_domain(config, resolution)
            reference = oracle_density(config, domain, build_initial(config, domain))
            if reference is None:
                logger.warning("oracle.kind is none, nothing to write")
                break
            path = config.output / f"oracle_n{resolution}.csv"
            write_density_csv(reference, path)
            written.append(path)
    return written


# =============================================================================
# SWEEP
# =============================================================================


def run_dir(config: ExperimentConfig, tau: float, resolution: int) -> Path:
    return config.output / f"tau_{tau:g}_n{resolution}"


def _fill_metrics(
    row: ReportRow,
    config: ExperimentConfig,
    trajectory: FlowTrajectory,
    reference: DiscreteDensity | None,
) -> None:
    domain = trajectory.steps[0].domain
    psi = trajectory.config.psi
    row.steps = len(trajectory.diagnostics)
    row.max_descent_violation = descent_report(trajectory).max_energy_violation
    residuals = [d.el_residual for d in trajectory.diagnostics if not math.isnan(d.el_residual)]
    row.max_el_residual = max(residuals, default=math.nan)
    if trajectory.diagnostics:
        row.telescoping_holds = telescoping_report(trajectory).holds
        row.time_regularity = time_regularity_report(trajectory).constant

    dictionary = test_function_dictionary(domain)
    bump = SmoothBump(config.bump_support or 0.8 * config.t_end)
    if trajectory.times[-1] >= bump.support:
        row.weak_residual = max(
            weak_residual(trajectory, zeta, bump, psi, config.beta_inv) for zeta in dictionary
        )

    if reference is not None:
        final = trajectory.steps[-1]
        row.l1_error = l1_distance(final, reference)
        row.mean_error = float(np.max(np.abs(mean(final) - mean(reference))))
        row.variance_error = float(np.max(np.abs(variance(final) - variance(reference))))
        distances = weak_distances(final, reference, dictionary)
        row.weak_distances = [float(d) for d in distances]
        row.max_weak_distance = float(distances.max())


def run_point(config: ExperimentConfig, tau: float, resolution: int) -> ReportRow:
    """
    Run one sweep point and write its trajectory files.

    Never raises for numerical or configuration problems; those end up in the
    row's ``reason``.
    """
    row = ReportRow(tau=tau, resolution=resolution)
    start = time.perf_counter()
    try:
        domain = build_domain(config, resolution)
        rho0 = build_initial(config, domain)
        jko_config = build_jko_config(config, tau)
        trajectory = run_flow(rho0, jko_config, el_residuals=config.el_residuals)
        trajectory.write(run_dir(config, tau, resolution))
        reference = oracle_density(config, domain, rho0)
        _fill_metrics(row, config, trajectory, reference)
        if not trajectory.complete:
            row.status = "failed"
            row.reason = f"step {trajectory.failure_index}: {trajectory.failure_reason}"
    except (BregmanJkoError, OSError) as e:
        row.status, row.reason = "failed", f"{type(e).__name__}: {e}"
    row.wall_time = time.perf_counter() - start
    if row.failed:
        logger.warning("tau=%g n=%d failed: %s", tau, resolution, row.reason)
    return row


def _collect(future: Future, tau: float, resolution: int) -> ReportRow:
    """A worker that died still leaves a failed row in its place."""
    try:
        return future.result()
    except Exception as e:
        logger.exception("tau=%g n=%d: worker failed", tau, resolution)
        return ReportRow(
            tau=tau, resolution=resolution, status="failed", reason=f"{type(e).__name__}: {e}"
        )


def run_experiment(
    config: ExperimentConfig,
    workers: int = 1,
    progress: Callable[[ReportRow], None] | None = None,
) -> RunReport:
    """
    Run every sweep point and write the report.

    Points run in a process pool when ``workers > 1``. Rows are assembled in
    sweep order (resolutions outer, τ inner) whatever order the workers
    finish in, and the output directory is locked for the whole run.

    Raises:
        filelock.Timeout: If another run holds the output directory.
    """
    config.output.mkdir(parents=True, exist_ok=True)
    points = config.sweep_points
    with FileLock(config.output / LOCK_NAME, timeout=LOCK_TIMEOUT):
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(run_point, config, tau, n) for tau, n in points]
                rows = []
                for (tau, n), future in zip(points, futures, strict=True):
                    rows.append(_collect(future, tau, n))
                    if progress is not None:
                        progress(rows[-1])
        else:
            rows = []
            for tau, n in points:
                rows.append(run_point(config, tau, n))
                if progress is not None:
                    progress(rows[-1])

        report = RunReport(config.name, rows, _plain(dump_config(config)), environment_stamp())
        report.write(config.output)
    return report


# =============================================================================
# VALIDATION
# =============================================================================


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error", "warning" or "info"
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.message}"


def _check_points(bounds: np.ndarray, n_random: int, seed: int) -> list[np.ndarray]:
    """Box centre, corners and uniform samples."""
    lows, highs = bounds[:, 0], bounds[:, 1]
    corners = np.array(np.meshgrid(*bounds, indexing="ij")).reshape(len(bounds), -1).T
    rng = np.random.default_rng(seed)
    samples = rng.uniform(lows, highs, size=(n_random, len(bounds)))
    return [0.5 * (lows + highs), *corners, *samples]


def validate_config(config: ExperimentConfig) -> list[Diagnostic]:
    """
    Resolve every name and check the cost on samples from the box.

    Reports resolution failures as errors, flagged mixed-Hessian samples and
    degenerate induced metrics as warnings, and the sampled comparability
    constants λ̂, Λ̂ as info. Never raises.
    """
    out: list[Diagnostic] = []
    dim = config.dim

    def attempt(label: str, build: Callable[[], object]) -> object | None:
        try:
            return build()
        except ConfigError as e:
            out.extend(Diagnostic("error", f"{label}: {d}") for d in e.diagnostics or [str(e)])
        except BregmanJkoError as e:
            out.append(Diagnostic("error", f"{label}: {e}"))
        return None

    metric = attempt("metric", lambda: resolve_metric(config.metric, config.potential, dim))
    cost = attempt("cost", lambda: resolve_cost(config.cost, config.potential, dim))
    psi = attempt("psi", lambda: resolve_drift(config.psi))
    if config.solver not in SOLVERS:
        out.append(Diagnostic("error", f"jko.solver must be one of {SOLVERS}"))
    elif cost is not None and psi is not None:
        for tau in config.taus:
            attempt(f"tau={tau:g}", lambda tau=tau: build_jko_config(config, tau))
    if metric is not None:
        domain = attempt("domain", lambda: build_domain(config, min(config.resolutions)))
        if isinstance(domain, DiscreteDomain):
            attempt("initial", lambda: build_initial(config, domain))
    kind = config.oracle.get("kind", "fd")
    if kind not in ORACLES:
        out.append(Diagnostic("error", f"oracle.kind {kind!r} must be one of {ORACLES}"))
    if config.bump_support is not None and config.bump_support > config.t_end:
        out.append(Diagnostic("error", "weak.bump_support exceeds jko.t_end"))
    if cost is None or metric is None:
        return out

    bounds = np.asarray(config.bounds, dtype=float)
    points = _check_points(bounds, VALIDATION_SAMPLES // 10, config.seed)
    try:
        report = check_a1_a2(cost, [(x, x) for x in points])
        if not report.ok:
            flagged = len(report.flagged)
            out.append(Diagnostic("warning", f"mixed Hessian near singular at {flagged} points"))
        eigenvalues = []
        for x in points:
            try:
                eigenvalues.append(float(np.linalg.eigvalsh(induced_metric(cost, x))[0]))
            except BregmanJkoError:
                eigenvalues.append(0.0)
        estimate = estimate_comparability(
            cost, metric, bounds, VALIDATION_SAMPLES, seed=config.seed
        )
    except BregmanJkoError as e:
        out.append(Diagnostic("warning", f"cost checks skipped: {e}"))
        return out

    out.append(
        Diagnostic(
            "info",
            f"comparability λ̂ = {estimate.lambda_hat:.4g}, Λ̂ = {estimate.Lambda_hat:.4g}"
            f" ({estimate.n_samples} pairs)",
        )
    )
    top = max(max(eigenvalues), estimate.Lambda_hat)
    if estimate.lambda_hat < DEGENERACY_RATIO * estimate.Lambda_hat:
        out.append(
            Diagnostic("warning", f"λ̂ ≈ 0 ({estimate.lambda_hat:.3g}): cost degenerates on the box")
        )
    elif min(eigenvalues) < DEGENERACY_RATIO * top:
        out.append(
            Diagnostic(
                "warning",
                f"induced metric degenerates on the box (smallest eigenvalue"
                f" {min(eigenvalues):.3g}), λ̂ ≈ 0 near that point",
            )
        )
    return out
