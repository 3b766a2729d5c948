#!/usr/bin/env python3
"""
Declarative experiment configuration.

An experiment is one YAML document (``schema_version: 1``). Its fields are
mapped onto ``ExperimentConfig`` by a table of ``FieldSpec`` entries using
dotted paths, and named objects (potentials, costs, metrics, drifts) are
resolved through the registries below. Every problem found while resolving
is collected, so a broken config reports all of its errors at once.

Example:

    schema_version: 1
    name: heat-cosine
    domain:
      bounds: [0.0, 1.0]
      metric: euclidean
    initial: {kind: cosine, amplitude: 0.5}
    cost: quadratic
    psi: {kind: zero}
    jko: {t_end: 0.25, solver: entropic-proximal}
    oracle: {kind: fd, dt: 1.0e-5}
    sweep: {tau: [8.0e-3, 4.0e-3, 2.0e-3], resolution: [128]}
    output: out/heat-cosine
"""

import copy
import re
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from ruamel.yaml import YAML

from .errors import ConfigError
from .geometry import (
    ConvexPotential,
    CostFunction,
    MetricModel,
    bregman_cost,
    dirichlet_log_cost,
    euclidean_metric,
    gaussian_log_partition_potential,
    hessian_metric,
    mahalanobis_cost,
    polynomial_potential,
    quadratic_cost,
    quadratic_potential,
    quartic_potential,
    scaled_metric,
    shifted_quartic_potential,
)
from .jko import JkoConfig
from .measures import (
    DiscreteDensity,
    DiscreteDomain,
    DriftPotential,
    constant_drift,
    gaussian_density,
    make_domain,
    normalize,
    quadratic_drift,
    read_density_csv,
    uniform_density,
    zero_drift,
)


SCHEMA_VERSION = 1


# =============================================================================
# PATH HELPERS
# =============================================================================


_SEGMENT = re.compile(r"^(\w+)((?:\[\d+\])*)$")


def _parse_path(path: str) -> list[str | int]:
    """Split "sweep.tau[0]" into ["sweep", "tau", 0]."""
    keys: list[str | int] = []
    for segment in path.split("."):
        match = _SEGMENT.match(segment)
        if match is None:
            keys.append(segment)
            continue
        keys.append(match.group(1))
        keys.extend(int(i) for i in re.findall(r"\[(\d+)\]", match.group(2)))
    return keys


def _step(container: Any, key: str | int) -> tuple[bool, Any]:
    if isinstance(key, int):
        found = isinstance(container, list) and key < len(container)
    else:
        found = isinstance(container, dict) and key in container
    return found, container[key] if found else None


def get_nested(obj: dict | None, path: str, default: Any = None) -> Any:
    """
    Look up a dotted path such as "jko.t_end" or "sweep.tau[1]".

    Missing keys, short lists and explicit nulls all give `default`.
    """
    value: Any = obj
    for key in _parse_path(path):
        found, value = _step(value, key)
        if not found:
            return default
    return default if value is None else value


def _slot(container: dict | list, key: str | int, filler: Any) -> None:
    """Make sure container[key] exists, padding lists with `filler`."""
    if isinstance(key, int):
        assert isinstance(container, list)
        container.extend(filler() for _ in range(key + 1 - len(container)))
    else:
        assert isinstance(container, dict)
        if key not in container:
            container[key] = filler()


def set_nested(obj: dict, path: str, value: Any) -> None:
    """Assign at a dotted path, creating the dicts and lists it runs through."""
    *route, last = _parse_path(path)
    nxt = [*route[1:], last]
    container: Any = obj
    for key, following in zip(route, nxt, strict=True):
        _slot(container, key, list if isinstance(following, int) else dict)
        container = container[key]
    _slot(container, last, lambda: None)
    container[last] = value


# =============================================================================
# TRANSFORMS
# =============================================================================


def _as_list(value: Any) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _bounds(value: Any) -> list[list[float]]:
    box = np.asarray(value, dtype=float).reshape(-1, 2)
    if np.any(box[:, 1] <= box[:, 0]):
        raise ValueError(f"empty box {box.tolist()}")
    return box.tolist()


def _positive_floats(value: Any) -> list[float]:
    values = [float(v) for v in _as_list(value)]
    if not values or any(v <= 0 for v in values):
        raise ValueError(f"expected a nonempty list of positive numbers, got {value}")
    return values


def _resolutions(value: Any) -> list[int]:
    values = [int(v) for v in _as_list(value)]
    if not values or any(v < 3 for v in values):
        raise ValueError(f"expected a nonempty list of resolutions ≥ 3, got {value}")
    return values


def _optional_float(value: Any) -> float | None:
    return None if value is None else float(value)


def _strict_bool(value: Any) -> bool:
    # "false" would be truthy
    if not isinstance(value, bool):
        raise TypeError(f"expected true or false, got {type(value).__name__}")
    return value


class Transforms:
    """Registry of named value conversions applied while reading a config."""

    REGISTRY: dict[str, Callable[[Any], Any]] = {
        "float": float,
        "int": int,
        "bool": _strict_bool,
        "str": str,
        "dict": dict,
        "path": Path,
        "bounds": _bounds,
        "positive_floats": _positive_floats,
        "resolutions": _resolutions,
        "optional_float": _optional_float,
    }

    @staticmethod
    def apply(value: Any, transform_name: str | None) -> Any:
        """
        Apply a named transform.

        Raises:
            ValueError: If the value cannot be converted or the name is unknown.
        """
        if transform_name is None or value is None:
            return value
        try:
            transform = Transforms.REGISTRY[transform_name]
        except KeyError:
            raise ValueError(f"unknown transform {transform_name!r}") from None
        try:
            return transform(value)
        except (TypeError, ValueError) as e:
            raise ValueError(f"{value!r} is not a valid {transform_name}: {e}") from e


# =============================================================================
# FIELD SPEC
# =============================================================================


@dataclass
class FieldSpec:
    """
    Mapping of one YAML path onto an ExperimentConfig attribute.

    Attributes:
        yaml_path: Dot-notation path in the document (e.g. "sweep.tau")
        attr: Attribute name on ExperimentConfig
        transform: Optional transform name (see Transforms)
        default: Value used when the path is missing
        required: Whether a missing path is an error
    """

    yaml_path: str
    attr: str
    transform: str | None = None
    default: Any = None
    required: bool = False


FIELD_MAPPINGS = [
    # --- Identity ---
    FieldSpec("schema_version", "schema_version", "int", required=True),
    FieldSpec("name", "name", "str", default="experiment"),
    FieldSpec("seed", "seed", "int", default=0),
    # --- Domain ---
    FieldSpec("domain.bounds", "bounds", "bounds", required=True),
    FieldSpec("domain.metric", "metric", "str", default="euclidean"),
    # --- Initial density, cost, potential and drift ---
    FieldSpec("initial", "initial", "dict", default={"kind": "uniform"}),
    FieldSpec("cost", "cost", "str", default="quadratic"),
    FieldSpec("potential", "potential", "dict", default={}),
    FieldSpec("psi", "psi", "dict", default={"kind": "zero"}),
    # --- Scheme ---
    FieldSpec("jko.t_end", "t_end", "float", required=True),
    FieldSpec("jko.beta_inv", "beta_inv", "float", default=1.0),
    FieldSpec("jko.solver", "solver", "str", default="entropic-proximal"),
    FieldSpec("jko.eps", "eps", "optional_float"),
    FieldSpec("jko.eps_factor", "eps_factor", "float", default=1e-2),
    FieldSpec("jko.continuation", "continuation", "bool", default=True),
    FieldSpec("jko.inner_tol", "inner_tol", "float", default=1e-8),
    FieldSpec("jko.inner_max_iters", "inner_max_iters", "int", default=20_000),
    FieldSpec("jko.el_residuals", "el_residuals", "bool", default=True),
    # --- Oracle ---
    FieldSpec("oracle", "oracle", "dict", default={"kind": "fd"}),
    FieldSpec("weak.bump_support", "bump_support", "optional_float"),
    # --- Sweep and output ---
    FieldSpec("sweep.tau", "taus", "positive_floats", required=True),
    FieldSpec("sweep.resolution", "resolutions", "resolutions", required=True),
    FieldSpec("output", "output", "path", default=Path("out")),
]


@dataclass
class ExperimentConfig:
    """
    A resolved experiment.

    ``initial``, ``potential``, ``psi`` and ``oracle`` keep their YAML blocks
    as plain dicts; the ``build_*`` functions below turn them into objects.
    """

    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    seed: int = 0
    bounds: list[list[float]] = field(default_factory=lambda: [[0.0, 1.0]])
    metric: str = "euclidean"
    initial: dict = field(default_factory=lambda: {"kind": "uniform"})
    cost: str = "quadratic"
    potential: dict = field(default_factory=dict)
    psi: dict = field(default_factory=lambda: {"kind": "zero"})
    t_end: float = 0.1
    beta_inv: float = 1.0
    solver: str = "entropic-proximal"
    eps: float | None = None
    eps_factor: float = 1e-2
    continuation: bool = True
    inner_tol: float = 1e-8
    inner_max_iters: int = 20_000
    el_residuals: bool = True
    oracle: dict = field(default_factory=lambda: {"kind": "fd"})
    bump_support: float | None = None
    taus: list[float] = field(default_factory=lambda: [1e-2])
    resolutions: list[int] = field(default_factory=lambda: [64])
    output: Path = Path("out")
    source: Path | None = None

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def sweep_points(self) -> list[tuple[float, int]]:
        """(tau, resolution) pairs in a fixed order: resolutions outer, taus inner."""
        return [(tau, n) for n in self.resolutions for tau in self.taus]


def parse_config(data: dict, source: Path | None = None) -> ExperimentConfig:
    """
    Map a loaded YAML document onto an ExperimentConfig.

    Raises:
        ConfigError: With every missing or malformed field listed.
    """
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping", ["top level is not a mapping"])
    problems: list[str] = []
    values: dict[str, Any] = {}
    for spec in FIELD_MAPPINGS:
        raw = get_nested(data, spec.yaml_path)
        if raw is None:
            if spec.required:
                problems.append(f"missing required field '{spec.yaml_path}'")
            elif spec.default is not None:
                values[spec.attr] = copy.deepcopy(spec.default)
            continue
        try:
            values[spec.attr] = Transforms.apply(raw, spec.transform)
        except ValueError as e:
            problems.append(f"{spec.yaml_path}: {e}")

    version = values.get("schema_version")
    if version is not None and version != SCHEMA_VERSION:
        problems.append(f"unsupported schema_version {version}, expected {SCHEMA_VERSION}")
    if problems:
        raise ConfigError(f"{source or 'config'}: {len(problems)} problem(s)", problems)

    config = ExperimentConfig(**values, source=source)
    if source is not None and not config.output.is_absolute():
        config.output = source.parent / config.output
    return config


def load_config(path: Path) -> ExperimentConfig:
    """
    Load an experiment from a YAML file.

    Raises:
        ConfigError: If the file is missing, unparsable or incomplete.
    """
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", [f"{path} does not exist"])
    yaml = YAML(typ="safe")
    try:
        with open(path) as f:
            data = yaml.load(f)
    except Exception as e:
        raise ConfigError(f"cannot parse {path}", [str(e)]) from e
    return parse_config(data, source=path)


def dump_config(config: ExperimentConfig) -> dict:
    """Inverse of parse_config, for stamping reports with the resolved config."""
    out: dict = {}
    for spec in FIELD_MAPPINGS:
        value = getattr(config, spec.attr)
        if value is None:
            continue
        if isinstance(value, Path):
            value = str(value)
        set_nested(out, spec.yaml_path, value)
    return out


# =============================================================================
# REGISTRIES
# =============================================================================


def _split(name: str) -> tuple[str, str | None]:
    head, _, tail = name.partition(":")
    return head.strip(), (tail.strip() or None)


def number(params: dict, key: str, default: float, where: str) -> float:
    """
    Read a numeric parameter from a registry block such as ``initial`` or ``psi``.

    Raises:
        ConfigError: If the value is not a number.
    """
    value = params.get(key, default)
    try:
        return float(value)
    except (TypeError, ValueError):
        message = f"{where}.{key} must be a number, got {value!r}"
        raise ConfigError(message, [message]) from None


def vector(params: dict, key: str, default: float, where: str) -> np.ndarray:
    """Like ``number`` but accepts a scalar or a list of coordinates."""
    value = params.get(key, default)
    try:
        return np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        message = f"{where}.{key} must be a number or a list of numbers, got {value!r}"
        raise ConfigError(message, [message]) from None


POTENTIALS: dict[str, Callable[[dict, int], ConvexPotential]] = {
    "quadratic": lambda params, dim: quadratic_potential(dim),
    "quartic": lambda params, dim: quartic_potential(dim),
    "polynomial": lambda params, dim: polynomial_potential(
        params["coefficients"], number(params, "quadratic_floor", 0.0, "potential"), dim
    ),
    "shifted_quartic": lambda params, dim: shifted_quartic_potential(
        number(params, "shift", 0.0, "potential"),
        number(params, "quadratic_floor", 1.0, "potential"),
        dim,
    ),
    "log_partition": lambda params, dim: gaussian_log_partition_potential(),
}


def resolve_potential(name: str, params: dict, dim: int) -> ConvexPotential:
    """
    Raises:
        ConfigError: For an unknown name or missing parameters.
    """
    try:
        factory = POTENTIALS[name]
    except KeyError:
        raise ConfigError(f"unknown potential {name!r}", [f"unknown potential {name!r}"]) from None
    try:
        potential = factory(params, dim)
    except KeyError as e:
        raise ConfigError(
            f"potential {name!r} needs parameter {e}", [f"potential {name!r}: missing {e}"]
        ) from None
    if potential.dim != dim:
        raise ConfigError(
            f"potential {name!r} has dimension {potential.dim}, domain has {dim}",
            [f"potential {name!r} does not match the domain dimension {dim}"],
        )
    return potential


def resolve_cost(name: str, params: dict, dim: int) -> CostFunction:
    """Costs: quadratic, bregman:<potential>, mahalanobis:<potential>, dirichlet_log."""
    kind, potential_name = _split(name)
    if kind == "quadratic":
        return quadratic_cost(dim)
    if kind == "dirichlet_log":
        return dirichlet_log_cost(dim)
    if kind in ("bregman", "mahalanobis"):
        if potential_name is None:
            raise ConfigError(f"cost {name!r} needs a potential", [f"{name}: use {kind}:<name>"])
        potential = resolve_potential(potential_name, params, dim)
        return bregman_cost(potential) if kind == "bregman" else mahalanobis_cost(potential)
    raise ConfigError(f"unknown cost {name!r}", [f"unknown cost {name!r}"])


def resolve_metric(name: str, params: dict, dim: int) -> MetricModel:
    """Metrics: euclidean, scaled:<c>, hessian:<potential>."""
    kind, argument = _split(name)
    if kind == "euclidean":
        return euclidean_metric(dim)
    if kind == "scaled":
        try:
            return scaled_metric(float(argument or ""), dim)
        except ValueError:
            raise ConfigError(
                f"bad metric {name!r}", [f"{name}: scaled metric needs a number"]
            ) from None
    if kind == "hessian":
        if argument is None:
            raise ConfigError(f"metric {name!r} needs a potential", [f"{name}: use hessian:<name>"])
        return hessian_metric(resolve_potential(argument, params, dim))
    raise ConfigError(f"unknown metric {name!r}", [f"unknown metric {name!r}"])


DRIFTS: dict[str, Callable[[dict], DriftPotential]] = {
    "zero": lambda spec: zero_drift(),
    "constant": lambda spec: constant_drift(number(spec, "value", 0.0, "psi")),
    "quadratic": lambda spec: quadratic_drift(
        vector(spec, "center", 0.0, "psi"), number(spec, "stiffness", 1.0, "psi")
    ),
}


def resolve_drift(spec: dict) -> DriftPotential:
    kind = spec.get("kind", "zero")
    try:
        return DRIFTS[kind](spec)
    except KeyError:
        raise ConfigError(f"unknown drift {kind!r}", [f"unknown drift {kind!r}"]) from None


# =============================================================================
# BUILDERS
# =============================================================================


def build_domain(config: ExperimentConfig, resolution: int) -> DiscreteDomain:
    metric = resolve_metric(config.metric, config.potential, config.dim)
    return make_domain(config.bounds, resolution, metric)


def build_initial(config: ExperimentConfig, domain: DiscreteDomain) -> DiscreteDensity:
    """
    Initial densities: uniform, gaussian(mean, variance), cosine(amplitude), file(path).

    ``cosine`` is 1 + A·cos(π s_0) with s_0 the first coordinate rescaled to [0, 1].

    Raises:
        ConfigError: For an unknown kind, a missing path or a non-numeric parameter.
        DomainError: If the density file cannot be read or does not match the grid.
    """
    spec = config.initial
    kind = spec.get("kind", "uniform")
    if kind == "uniform":
        return uniform_density(domain)
    if kind == "gaussian":
        mean = vector(spec, "mean", 0.0, "initial")
        if mean.size not in (1, domain.dim):
            message = f"initial.mean needs 1 or {domain.dim} coordinates, got {mean.size}"
            raise ConfigError(message, [message])
        return gaussian_density(domain, mean, vector(spec, "variance", 1.0, "initial"))
    if kind == "cosine":
        lo, hi = domain.bounds[0]
        s = (domain.nodes[:, 0] - lo) / (hi - lo)
        amplitude = number(spec, "amplitude", 0.5, "initial")
        return normalize(domain, 1.0 + amplitude * np.cos(np.pi * s))
    if kind == "file":
        if not isinstance(spec.get("path"), str):
            message = "initial.path must name a density CSV file"
            raise ConfigError(message, [message])
        path = Path(spec["path"])
        if config.source is not None and not path.is_absolute():
            path = config.source.parent / path
        return read_density_csv(path, domain)
    raise ConfigError(f"unknown initial density {kind!r}", [f"unknown initial density {kind!r}"])


def build_jko_config(config: ExperimentConfig, tau: float) -> JkoConfig:
    return JkoConfig(
        tau=tau,
        t_end=config.t_end,
        cost=resolve_cost(config.cost, config.potential, config.dim),
        psi=resolve_drift(config.psi),
        beta_inv=config.beta_inv,
        inner_solver=config.solver,
        eps=config.eps,
        eps_factor=config.eps_factor,
        continuation=config.continuation,
        inner_tol=config.inner_tol,
        inner_max_iters=config.inner_max_iters,
    )
