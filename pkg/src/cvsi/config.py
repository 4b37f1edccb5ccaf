"""JSON run configuration: schema, defaults and fail-closed validation.

Every key is checked against the dataclass schema below; unknown keys, wrong
types and out-of-range values raise :class:`ConfigError` naming the key.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

from .estimators import Estimator
from .sampler import IS_ESTIMATORS
from .schedule import SCHEDULE_KINDS

EXPERIMENTS = (
    "variance-profile",
    "coeff-profile",
    "sample",
    "nll",
    "posterior-check",
    "idem-compare",
    "dw4-distances",
)
TARGET_KINDS = ("random-gmm", "gmm-file", "gaussian", "dw4")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _spec(kind, default=MISSING, key=None, **kw):
    """Dataclass field carrying its JSON type tag (and optional JSON key)."""
    meta = {"type": kind}
    if key is not None:
        meta["key"] = key
    if default is MISSING:
        return field(metadata=meta, **kw)
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: type(default)(default), metadata=meta, **kw)
    return field(default=default, metadata=meta, **kw)


@dataclass(frozen=True)
class TargetSpec:
    kind: str = _spec("str")
    dim: int = _spec("int", 2)
    n_components: int = _spec("int", 40)
    scale: float = _spec("float", 10.0)
    wishart_dof: int | None = _spec("int?", None)
    seed: int | None = _spec("int?", None)
    path: str | None = _spec("str?", None)
    sigma: float = _spec("float", 1.0)
    b: float = _spec("float", -4.0)
    c: float = _spec("float", 0.9)
    d0: float = _spec("float", 4.0)
    tau: float = _spec("float", 1.0)

    def validate(self, where):
        if self.kind not in TARGET_KINDS:
            raise ConfigError(f"{where}.kind", f"expected one of {TARGET_KINDS}, got {self.kind!r}")
        _positive(self.dim, f"{where}.dim")
        _positive(self.n_components, f"{where}.n_components")
        _positive(self.scale, f"{where}.scale")
        _positive(self.sigma, f"{where}.sigma")
        _positive(self.tau, f"{where}.tau")
        if self.kind == "random-gmm":
            dof = 2 * self.dim if self.wishart_dof is None else self.wishart_dof
            if dof < self.dim:
                raise ConfigError(f"{where}.wishart_dof", f"must be >= dim ({self.dim})")
        if self.kind == "gmm-file":
            if self.path is None:
                raise ConfigError(f"{where}.path", "required for kind 'gmm-file'")
            if not Path(self.path).is_file():
                raise ConfigError(f"{where}.path", f"file not found: {self.path}")
        if self.kind == "dw4" and self.c <= 0:
            raise ConfigError(f"{where}.c", "must be positive")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = _spec("str", "vp-linear")
    sigma_min: float = _spec("float", 1e-2)
    sigma_max: float | str = _spec("float|auto", "auto")
    beta_min: float = _spec("float", 0.1)
    beta_max: float = _spec("float", 20.0)
    cosine_offset: float = _spec("float", 0.008)
    t_min: float = _spec("float", 1e-3)
    t_max: float | None = _spec("float?", None)

    def validate(self, where):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"{where}.kind", f"expected one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if not 0 < self.t_min < 0.5:
            raise ConfigError(f"{where}.t_min", "must lie in (0, 0.5)")
        if self.t_max is not None and not 0.5 < self.t_max <= 1:
            raise ConfigError(f"{where}.t_max", "must lie in (0.5, 1]")
        _positive(self.sigma_min, f"{where}.sigma_min")
        if self.sigma_max != "auto":
            _positive(self.sigma_max, f"{where}.sigma_max")
        _positive(self.beta_min, f"{where}.beta_min")
        _positive(self.beta_max, f"{where}.beta_max")


@dataclass(frozen=True)
class MalaSpec:
    step_size: float = _spec("float", 0.1)
    n_chains: int = _spec("int", 64)
    burn_in: int = _spec("int", 100_000)
    thin: int = _spec("int", 1)
    init_scale: float = _spec("float", 2.0)
    drift_clip: float | None = _spec("float?", 2.0)

    def validate(self, where):
        _positive(self.step_size, f"{where}.step_size")
        _positive(self.n_chains, f"{where}.n_chains")
        _positive(self.thin, f"{where}.thin")
        _positive(self.init_scale, f"{where}.init_scale")
        if self.drift_clip is not None:
            _positive(self.drift_clip, f"{where}.drift_clip")
        if self.burn_in < 0:
            raise ConfigError(f"{where}.burn_in", "must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration (see README for the JSON layout)."""

    experiment: str = _spec("str")
    seed: int = _spec("int")
    target: TargetSpec = _spec(TargetSpec)
    schedule: ScheduleSpec = _spec(ScheduleSpec, None)
    estimators: list = _spec("str[]", ["dsi", "tsi", "tsm-global", "cvsi"])
    t_grid: list | None = _spec("float[]?", None)
    t_grid_num: int = _spec("int", 32)
    xt_values: list | None = _spec("float[]?", None)
    k_values: list = _spec("int[]", [10])
    dims: list = _spec("int[]", [])
    component_counts: list = _spec("int[]", [])
    n_xt: int = _spec("int", 64)
    n_steps: int = _spec("int", 500)
    n_chains: int = _spec("int", 1000)
    lam: float = _spec("float", 1.0, key="lambda")
    n_seeds: int = _spec("int", 5)
    n_reference: int = _spec("int", 100_000)
    histogram_bins: int = _spec("int", 100)
    clip_c: bool = _spec("bool", False)
    independent_c_batch: bool = _spec("bool", False)
    reweight_moments: bool = _spec("bool", False)
    score_clip: float | None = _spec("float?", None)
    mcmc: MalaSpec = _spec(MalaSpec, None)
    output_dir: str | None = _spec("str?", None)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError("experiment", f"expected one of {EXPERIMENTS}, got {self.experiment!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        self.target.validate("target")
        self.schedule.validate("schedule")
        self.mcmc.validate("mcmc")
        for i, name in enumerate(self.estimators):
            if name in ("exact",) + IS_ESTIMATORS:
                continue
            try:
                Estimator.parse(name)
            except ValueError as err:
                raise ConfigError(f"estimators[{i}]", str(err)) from None
        for i, k in enumerate(self.k_values):
            if k < 1:
                raise ConfigError(f"k_values[{i}]", f"must be >= 1, got {k}")
        for name in ("t_grid_num", "n_xt", "n_steps", "n_chains", "n_seeds", "n_reference", "histogram_bins"):
            _positive(getattr(self, name), name)
        for name in ("dims", "component_counts"):
            for i, v in enumerate(getattr(self, name)):
                _positive(v, f"{name}[{i}]")
        if self.score_clip is not None and self.score_clip <= 0:
            raise ConfigError("score_clip", "must be positive")
        if self.lam < 0:
            raise ConfigError("lambda", "must be >= 0")
        if self.t_grid is not None:
            for i, t in enumerate(self.t_grid):
                if not 0 < t <= 1:
                    raise ConfigError(f"t_grid[{i}]", "must lie in (0, 1]")
        needs = {
            "variance-profile": ("random-gmm", "gmm-file", "gaussian"),
            "coeff-profile": ("random-gmm", "gmm-file", "gaussian"),
            "nll": ("random-gmm",),
            "posterior-check": ("random-gmm", "gmm-file", "gaussian"),
            "idem-compare": ("random-gmm", "gmm-file", "gaussian"),
            "dw4-distances": ("dw4",),
        }.get(self.experiment)
        if needs and self.target.kind not in needs:
            raise ConfigError("target.kind", f"experiment {self.experiment!r} needs one of {needs}")
        if self.experiment == "nll" and not (self.dims and self.component_counts):
            raise ConfigError("dims", "the nll experiment needs non-empty 'dims' and 'component_counts'")
        if self.experiment in ("variance-profile", "coeff-profile") and min(self.k_values) < 2:
            raise ConfigError("k_values", "profiles need K >= 2")

    def to_json_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.metadata.get("key", f.name)] = asdict(value) if hasattr(value, "__dataclass_fields__") else value
        return out


def _positive(value, key):
    if value <= 0:
        raise ConfigError(key, f"must be positive, got {value}")


def _check(value, kind, key):
    if isinstance(kind, type):
        return _build(kind, value, key)
    optional = kind.endswith("?")
    base = kind.rstrip("?")
    if value is None:
        if optional:
            return None
        raise ConfigError(key, f"expected {base}, got null")
    if base == "float|auto":
        if value == "auto":
            return value
        base = "float"
    if base.endswith("[]"):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list of {base[:-2]}, got {type(value).__name__}")
        return [_check(v, base[:-2], f"{key}[{i}]") for i, v in enumerate(value)]
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise AssertionError(kind)


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(where or "<root>", "expected a JSON object")
    by_key = {f.metadata.get("key", f.name): f for f in fields(cls)}
    for key in data:
        if key not in by_key:
            raise ConfigError(_join(where, key), f"unknown key (allowed: {', '.join(sorted(by_key))})")
    kwargs = {}
    for key, f in by_key.items():
        if key in data:
            kwargs[f.name] = _check(data[key], f.metadata["type"], _join(where, key))
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(_join(where, key), "required key is missing")
        elif f.default is None and isinstance(f.metadata["type"], type):
            kwargs[f.name] = f.metadata["type"]()
    return cls(**kwargs)


def _join(where, key):
    return f"{where}.{key}" if where else key


def config_from_dict(data: dict, base_dir: Path | None = None) -> RunConfig:
    """Build and validate a config; relative target paths resolve against ``base_dir``."""
    if isinstance(data, dict) and isinstance(data.get("target"), dict) and base_dir is not None:
        path = data["target"].get("path")
        if isinstance(path, str) and not Path(path).is_absolute():
            data = {**data, "target": {**data["target"], "path": str(Path(base_dir) / path)}}
    try:
        config = _build(RunConfig, data, "")
    except TypeError as err:  # dataclass constructor rejected a field
        raise ConfigError("<root>", str(err)) from None
    config.validate()
    return config


def parse_config(path) -> RunConfig:
    """Read a UTF-8 JSON config file and validate it."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError("<file>", f"invalid JSON: {err}") from None
    return config_from_dict(data, base_dir=path.parent)


def with_overrides(config: RunConfig, seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if output_dir is not None:
        changes["output_dir"] = output_dir
    if not changes:
        return config
    out = replace(config, **changes)
    out.validate()
    return out
