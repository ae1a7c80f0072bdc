"""
Run configuration for the mining pipeline.

Values come from, lowest to highest precedence: dataclass defaults, a JSON
config file, the environment (STLMINE_SEED, STLMINE_THREADS, LOG_LEVEL, with
.env loaded by the entry point) and command-line overrides.
"""
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from utils.logging_utils import get_logger
from .gp import GpConfig
from .kernel import FDistParams
from .miner import BoConfig
from .templates import ParameterGrid, TemplateError
from .trajectories import DatasetError, Mu0Params

logger = get_logger("config")

SEARCH_MODES = ("exact", "ivf", "pq", "ivfpq")


class ConfigError(ValueError):
    """Raised for unknown keys or invalid values in a run configuration."""


@dataclass(frozen=True)
class TrajectoryConfig:
    """mu0 base measure and the linear benchmark generator."""

    delta: float = 1.0
    a: float = 0.0
    b: float = 100.0
    start_mean: float = 0.0
    start_std: float = 1.0
    variation_mean: float = 0.0
    variation_std: float = 1.0
    q: float = 0.1
    n_pos: int = 100
    n_neg: int = 100
    n_points: int = 100
    x0: float = 1.0
    rate: float = 0.03
    noise_variance: float = 0.04

    def mu0_params(self):
        return Mu0Params(self.delta, self.a, self.b, self.start_mean, self.start_std, self.variation_mean,
                         self.variation_std, self.q)


@dataclass(frozen=True)
class EnumerationConfig:
    max_nodes: int = 4
    n_vars: int = 1
    value_range: tuple = (-4.0, 4.0)
    n_values: int = 10
    time_range: tuple = (0.0, 100.0)
    n_times: int = 10
    tau_sim: float = 0.9
    cap: int = 10_000
    signature_size: int = 100

    def grid(self):
        return ParameterGrid.linear(self.value_range, self.n_values, self.time_range, self.n_times)


@dataclass(frozen=True)
class EmbeddingConfig:
    """Reference set size and the anchor formula distribution."""

    n_train: int = 1000
    n_mc: int = 10_000
    squash: bool = False
    n_vars: int = 3
    p_leaf: float = 0.5
    max_depth: int = 4
    p_unbounded: float = 0.1
    value_range: tuple = (-4.0, 4.0)
    time_range: tuple = (0, 100)

    def fdist_params(self):
        return FDistParams(p_leaf=self.p_leaf, n_vars=self.n_vars, value_range=self.value_range,
                           time_range=self.time_range, max_depth=self.max_depth, p_unbounded=self.p_unbounded)


@dataclass(frozen=True)
class DatabaseConfig:
    node_limits: tuple = (4, 5)
    search_mode: str = "exact"
    nlist: int = 0
    nprobe: int = 8
    ivf_max_iter: int = 50
    pq_m: int = 8
    pq_nbits: int = 8


@dataclass(frozen=True)
class CrossValidationConfig:
    n_folds: int = 5
    single_fold: bool = False
    fold_seed: int = 0
    test_fraction: float = 0.2


@dataclass(frozen=True)
class RetrievalEvalConfig:
    n_queries: int = 1000
    omega: float = 0.9
    k: int = 5
    n_traj: int = 10_000
    max_query_nodes: int = 4
    bucket_edges: tuple = (0, 5, 10, 15, 20)


@dataclass(frozen=True)
class RunPaths:
    reference: str = None

    def reference_path(self, db_path):
        """Reference-set file: the configured one, else the database path with a .ref suffix."""
        if self.reference:
            return self.reference
        return str(Path(db_path).with_suffix(".ref"))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = None
    log_level: str = "INFO"
    trajectories: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    enumeration: EnumerationConfig = field(default_factory=EnumerationConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    database: DatabaseConfig = field(default_factory=DatabaseConfig)
    bo: BoConfig = field(default_factory=BoConfig)
    cross_validation: CrossValidationConfig = field(default_factory=CrossValidationConfig)
    retrieval_eval: RetrievalEvalConfig = field(default_factory=RetrievalEvalConfig)
    paths: RunPaths = field(default_factory=RunPaths)

    def to_dict(self):
        """Effective configuration as plain data (echoed into every report)."""
        return dataclasses.asdict(self)


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, data, prefix=""):
    """Instantiate a config dataclass from a (partial) mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix or 'config'}' must be an object, got {type(data).__name__}")
    defaults = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    values = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            values[name] = _build(type(current), value, f"{prefix}{name}.")
        else:
            values[name] = _coerce(value, current)
    try:
        return cls(**values)
    except (ValueError, TypeError, DatasetError, TemplateError) as exc:
        raise ConfigError(f"invalid '{prefix.rstrip('.') or 'config'}' section: {exc}") from exc


def _merge(base, data):
    """Deep-merge a nested mapping into a dataclass instance's dict form."""
    merged = dataclasses.asdict(base)

    def update(target, source):
        for key, value in source.items():
            if isinstance(value, dict) and isinstance(target.get(key), dict):
                update(target[key], value)
            else:
                target[key] = value

    update(merged, data)
    return merged


def apply_overrides(config, overrides):
    """
    Apply dotted-key overrides such as {"seed": 7, "bo.escalate_mcr": 0.1}.

    None values are ignored, so unset command-line flags leave the config alone.
    """
    nested = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    if not nested:
        return config
    return _build(RunConfig, _merge(config, nested))


def environment_overrides(environ=None):
    """Overrides taken from STLMINE_SEED, STLMINE_THREADS and LOG_LEVEL."""
    environ = os.environ if environ is None else environ
    overrides = {}
    for var, key in (("STLMINE_SEED", "seed"), ("STLMINE_THREADS", "threads")):
        raw = environ.get(var)
        if raw:
            try:
                overrides[key] = int(raw)
            except ValueError as exc:
                raise ConfigError(f"{var} must be an integer, got {raw!r}") from exc
    if environ.get("LOG_LEVEL"):
        overrides["log_level"] = environ["LOG_LEVEL"]
    return overrides


def validate(config):
    """Cross-field checks that individual sections cannot make on their own."""
    if config.threads is not None and config.threads < 1:
        raise ConfigError(f"threads must be >= 1, got {config.threads}")
    enum = config.enumeration
    if enum.max_nodes < 1 or enum.n_vars < 1:
        raise ConfigError("enumeration.max_nodes and enumeration.n_vars must be >= 1")
    if not 0.0 <= enum.tau_sim <= 1.0:
        raise ConfigError(f"enumeration.tau_sim must lie in [0, 1], got {enum.tau_sim}")
    if enum.cap < 1 or enum.signature_size < 1:
        raise ConfigError("enumeration.cap and enumeration.signature_size must be >= 1")
    if enum.n_vars > config.embedding.n_vars:
        raise ConfigError(f"enumeration.n_vars={enum.n_vars} exceeds the reference-set dimension "
                          f"embedding.n_vars={config.embedding.n_vars}")
    if config.embedding.n_train < 1 or config.embedding.n_mc < 1:
        raise ConfigError("embedding.n_train and embedding.n_mc must be >= 1")
    db = config.database
    if db.search_mode not in SEARCH_MODES:
        raise ConfigError(f"database.search_mode must be one of {SEARCH_MODES}, got {db.search_mode!r}")
    if db.search_mode.startswith("ivf") and db.nlist < 1:
        raise ConfigError(f"database.search_mode '{db.search_mode}' needs database.nlist >= 1")
    if db.search_mode.endswith("pq"):
        if db.pq_m < 1 or config.embedding.n_train % db.pq_m:
            raise ConfigError(f"database.pq_m={db.pq_m} must divide embedding.n_train={config.embedding.n_train}")
        if not 1 <= db.pq_nbits <= 8:
            raise ConfigError(f"database.pq_nbits must lie in 1..8, got {db.pq_nbits}")
    if not db.node_limits or config.bo.max_nodes not in db.node_limits:
        raise ConfigError(f"bo.max_nodes={config.bo.max_nodes} is not one of database.node_limits {db.node_limits}")
    cv = config.cross_validation
    if cv.n_folds < 2 or not 0.0 < cv.test_fraction < 1.0:
        raise ConfigError("cross_validation.n_folds must be >= 2 and test_fraction in (0, 1)")
    ev = config.retrieval_eval
    if ev.k < 1 or ev.n_queries < 1 or ev.n_traj < 1 or not 0.0 <= ev.omega <= 1.0:
        raise ConfigError("retrieval_eval needs k, n_queries, n_traj >= 1 and omega in [0, 1]")
    # Building these surfaces grid and distribution errors before any work starts.
    try:
        config.trajectories.mu0_params()
        enum.grid()
        config.embedding.fdist_params()
    except (ValueError, DatasetError, TemplateError) as exc:
        raise ConfigError(str(exc)) from exc
    return config


def load_config(path=None, overrides=None, environ=None):
    """
    Load the effective run configuration.

    Args:
        path: Optional JSON config file
        overrides: Dotted-key overrides from the command line (highest precedence)
        environ: Environment mapping (default: os.environ)

    Returns:
        A validated RunConfig

    Raises:
        ConfigError: unreadable file, unknown keys or invalid values
    """
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        logger.info(f"Loaded config from {path}")
    config = _build(RunConfig, data)
    config = apply_overrides(config, environment_overrides(environ))
    config = apply_overrides(config, overrides or {})
    return validate(config)
