"""
Experiment configuration: preset defaults, INI config files and CLI overrides.

Values are resolved in three layers, later layers winning: the preset, the
config file, the command line.
"""
import configparser
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Mapping, Optional, Union, get_args, get_origin, get_type_hints

from exceptions import ConfigError
from presets import Preset, get_preset
from rkhs import KERNEL_KINDS, KernelSpec

logger = logging.getLogger(__name__)

INNER_SOLVERS = ("hrf", "newton", "policy")
OUTER_METHODS = ("gd", "gn")
PLACEMENTS = ("grid", "random")

# INI section -> ExperimentConfig fields it may set
SECTIONS: Dict[str, tuple] = {
    "experiment": ("preset", "n_per_axis", "n_time", "seed"),
    "observations": ("m_obs", "v_obs", "placement", "noise"),
    "weights": ("alpha", "beta", "gamma"),
    "kernel": ("kernel", "lengthscale", "smoothness", "jitter", "time_lengthscale"),
    "solver": ("solver", "method", "tol", "outer_tol", "max_iter", "gd_metric"),
    "output": ("out_dir",),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Everything one inversion run depends on.

    ``solver`` may be "all" and ``method`` may be "both"; the runner expands
    them into the (solver x method) comparison.
    """

    preset: str
    n_per_axis: int
    n_time: Optional[int]
    m_obs: int
    v_obs: int
    placement: str
    noise: float
    alpha: float
    beta: float
    gamma: float
    kernel: str = "periodic_gaussian"
    lengthscale: float = 0.2
    smoothness: float = 1.5
    jitter: float = 1e-8
    time_lengthscale: float = 0.2
    solver: str = "hrf"
    method: str = "gn"
    tol: Optional[float] = None
    outer_tol: float = 1e-6
    max_iter: int = 200
    gd_metric: str = "euclidean"
    out_dir: str = "output"
    seed: int = 0

    def __post_init__(self):
        if self.n_per_axis < 2:
            raise ConfigError(f"n_per_axis must be at least 2, got {self.n_per_axis}")
        if self.n_time is not None and self.n_time < 2:
            raise ConfigError(f"n_time must be at least 2, got {self.n_time}")
        for name in ("m_obs", "v_obs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_iter < 0:
            raise ConfigError(f"max_iter must be non-negative, got {self.max_iter}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("weights alpha, beta, gamma must be non-negative")
        _check_choice("placement", self.placement, PLACEMENTS)
        _check_choice("solver", self.solver, INNER_SOLVERS + ("all",))
        _check_choice("method", self.method, OUTER_METHODS + ("both",))
        _check_choice("kernel", self.kernel, KERNEL_KINDS[:2])
        _check_choice("gd_metric", self.gd_metric, ("euclidean", "kernel"))
        if self.placement == "grid":
            if self.m_obs > self.available_m_nodes:
                raise ConfigError(f"m_obs={self.m_obs} exceeds the {self.available_m_nodes} available grid nodes")
            if self.v_obs > self.spatial_nodes:
                raise ConfigError(f"v_obs={self.v_obs} exceeds the {self.spatial_nodes} available grid nodes")

    @property
    def dim(self) -> int:
        return get_preset(self.preset).dim

    @property
    def spatial_nodes(self) -> int:
        return self.n_per_axis ** self.dim

    @property
    def available_m_nodes(self) -> int:
        """Interior space-time nodes for time-dependent runs, spatial nodes otherwise."""
        if self.n_time is None:
            return self.spatial_nodes
        return (self.n_time - 1) * self.spatial_nodes

    @property
    def solvers(self) -> tuple:
        return INNER_SOLVERS if self.solver == "all" else (self.solver,)

    @property
    def methods(self) -> tuple:
        return OUTER_METHODS if self.method == "both" else (self.method,)

    def kernel_spec(self) -> KernelSpec:
        """Spatial kernel for stationary runs, its product with a time kernel otherwise."""
        kind = self.kernel if self.n_time is None else "spacetime_product"
        return KernelSpec(kind=kind, lengthscale=self.lengthscale, smoothness=self.smoothness,
                          jitter=self.jitter, time_lengthscale=self.time_lengthscale, spatial_kind=self.kernel)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every result-relevant field."""
        payload = {k: v for k, v in asdict(self).items() if k != "out_dir"}
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def _check_choice(name: str, value: str, allowed: tuple) -> None:
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {', '.join(allowed)}; got {value!r}")


def config_from_preset(preset: Union[str, Preset], **overrides) -> ExperimentConfig:
    """ExperimentConfig carrying the preset's constants, then ``overrides`` (None values ignored)."""
    if isinstance(preset, str):
        preset = get_preset(preset)
    base = ExperimentConfig(
        preset=preset.name,
        n_per_axis=preset.n_per_axis,
        n_time=preset.n_time,
        m_obs=preset.m_obs,
        v_obs=preset.v_obs,
        placement=preset.placement,
        noise=preset.noise,
        alpha=preset.alpha,
        beta=preset.beta,
        gamma=preset.gamma,
        gd_metric=preset.gd_metric,
    )
    if not preset.is_time_dependent and overrides.get("n_time") is not None:
        logger.warning("Preset %s is stationary, ignoring n_time=%s", preset.name, overrides["n_time"])
        overrides["n_time"] = None
    if not overrides:
        return base
    return base.with_overrides(**overrides)


def _coerce(key: str, raw: str, hint) -> Any:
    if get_origin(hint) is Union:
        if raw.strip().lower() in ("", "none"):
            return None
        hint = next(arg for arg in get_args(hint) if arg is not type(None))
    try:
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot read {raw!r} as {hint.__name__}") from e
    return raw.strip()


def read_config_file(path: str) -> Dict[str, Any]:
    """
    Parse an INI config file into ExperimentConfig overrides.

    Raises:
        ConfigError: Unreadable file, unknown section, or a key that does not
            belong to its section
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e

    hints = get_type_hints(ExperimentConfig)
    overrides: Dict[str, Any] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            overrides[key] = _coerce(key, raw, hints[key])
    logger.debug("Read %d config values from %s", len(overrides), path)
    return overrides


def resolve_config(preset: Optional[str] = None, config_path: Optional[str] = None,
                   cli_overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Merge preset, config file and CLI values; CLI wins over the file, the file over the preset."""
    file_values = read_config_file(config_path) if config_path else {}
    cli_values = {k: v for k, v in (cli_overrides or {}).items() if v is not None}
    preset_name = cli_values.pop("preset", None) or preset or file_values.pop("preset", None)
    file_values.pop("preset", None)
    if preset_name is None:
        raise ConfigError("no preset given; pass a preset name or set preset in [experiment]")
    return config_from_preset(preset_name, **{**file_values, **cli_values})


def write_config_file(cfg: ExperimentConfig, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    parser = configparser.ConfigParser(interpolation=None)
    values = cfg.to_dict()
    for section, keys in SECTIONS.items():
        parser[section] = {k: "none" if values[k] is None else repr(values[k]) if isinstance(values[k], float)
                           else str(values[k]) for k in keys}
    with open(path, "w", encoding="utf-8") as handle:
        parser.write(handle)
