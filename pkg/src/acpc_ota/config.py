"""Experiment configuration: INI files plus command-line overrides."""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

DATA_DIR_ENV = "ACPC_DATA_DIR"

TASKS = ("mnist_logistic", "synth_quadratic", "oracle_theorem1", "oracle_example1")
ALGORITHMS = ("acpc", "naive", "uniform")
MNIST_CLASSES = 10


class ConfigError(ValueError):
    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    task: str = "mnist_logistic"
    algorithm: str = "acpc"
    out: str = "runs/run"
    data_dir: str = ""
    # federation
    clients: int = 10
    non_iid_p: int = 10
    balance: str = "equal"
    dirichlet_gamma: float = 1.0
    lam: float = 0.0
    dim: int = 10
    heterogeneity: float = 1.0
    grad_sigma: float = 0.1
    # channel
    snr_db: float = 10.0
    power: float = 100.0
    fading: str = "none"
    rayleigh_scale: float = 1.0
    # training
    rounds: int = 200
    eta: float = 0.05
    eta_schedule: str = "constant"
    beta_rule: str = "known_delta"
    beta: float = 1.0
    G: float = 0.0
    g_bound_alpha: str = "max"
    tau_max: int = 50
    tau_fixed: int = 10
    batch_size: int = 32
    # oracles
    oracle_L: float = 1.0
    oracle_sigma: float = 1.0
    oracle_sigma_c: float = 0.1
    oracle_T: int = 500
    oracle_reps: int = 10000

    def resolved_data_dir(self) -> Path:
        return Path(self.data_dir or os.environ.get(DATA_DIR_ENV, "data/mnist"))

    def to_ini(self) -> str:
        lines = []
        for section, keys in SECTIONS.items():
            lines.append(f"[{section}]")
            values = asdict(self)
            lines.extend(f"{k} = {values[k]}" for k in keys)
            lines.append("")
        return "\n".join(lines)


SECTIONS = {
    "experiment": ("task", "algorithm", "seed", "out", "data_dir"),
    "federation": ("clients", "non_iid_p", "balance", "dirichlet_gamma", "lam", "dim",
                   "heterogeneity", "grad_sigma"),
    "channel": ("snr_db", "power", "fading", "rayleigh_scale"),
    "training": ("rounds", "eta", "eta_schedule", "beta_rule", "beta", "G", "g_bound_alpha",
                 "tau_max", "tau_fixed", "batch_size"),
    "oracle": ("oracle_L", "oracle_sigma", "oracle_sigma_c", "oracle_T", "oracle_reps"),
}

_TYPES = {f.name: {"int": int, "float": float, "str": str}[f.type] for f in fields(ExperimentConfig)}


def coerce_value(name: str, raw, line=None):
    if name not in _TYPES:
        raise ConfigError(f"unknown key {name!r}", field=name, line=line)
    kind = _TYPES[name]
    try:
        if kind is int and isinstance(raw, str):
            return int(raw.strip(), 0)
        return kind(raw.strip() if isinstance(raw, str) else raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {kind.__name__}", field=name,
                          line=line) from None


def _key_line(text: str, key: str) -> int | None:
    for n, line in enumerate(text.splitlines(), 1):
        if line.split("=", 1)[0].strip().lower() == key.lower():
            return n
    return None


def read_config_text(text: str, source: str = "<config>") -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        raise ConfigError(f"parse error in {source}: {exc}", line=line) from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", line=_key_line(text, f"[{section}]"))
        for key, raw in parser.items(section):
            line = _key_line(text, key)
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", field=key, line=line)
            values[key] = coerce_value(key, raw, line)
    return values


def validate(cfg: ExperimentConfig, check_files: bool = True) -> ExperimentConfig:
    def bad(field, message):
        raise ConfigError(f"{field}: {message}", field=field)

    if cfg.task not in TASKS:
        bad("task", f"must be one of {TASKS}")
    if cfg.algorithm not in ALGORITHMS:
        bad("algorithm", f"must be one of {ALGORITHMS}")
    for name in ("clients", "rounds", "tau_max", "tau_fixed", "batch_size", "dim",
                 "oracle_T", "oracle_reps"):
        if getattr(cfg, name) < 1:
            bad(name, "must be >= 1")
    if cfg.task == "mnist_logistic" and not 1 <= cfg.non_iid_p <= MNIST_CLASSES:
        bad("non_iid_p", f"must lie in [1, {MNIST_CLASSES}]")
    if cfg.non_iid_p < 1:
        bad("non_iid_p", "must be >= 1")
    if cfg.balance not in ("equal", "dirichlet"):
        bad("balance", "must be 'equal' or 'dirichlet'")
    if cfg.fading not in ("none", "rayleigh"):
        bad("fading", "must be 'none' or 'rayleigh'")
    if cfg.eta_schedule not in ("constant", "sqrt"):
        bad("eta_schedule", "must be 'constant' or 'sqrt'")
    if cfg.beta_rule not in ("known_delta", "g_bound", "fixed"):
        bad("beta_rule", "must be known_delta, g_bound or fixed")
    if cfg.g_bound_alpha not in ("max", "per_client"):
        bad("g_bound_alpha", "must be 'max' or 'per_client'")
    for name in ("power", "eta", "beta", "rayleigh_scale", "dirichlet_gamma", "oracle_L"):
        if getattr(cfg, name) <= 0:
            bad(name, "must be positive")
    for name in ("lam", "G", "grad_sigma", "heterogeneity", "oracle_sigma", "oracle_sigma_c"):
        if getattr(cfg, name) < 0:
            bad(name, "must be non-negative")
    if check_files and cfg.task == "mnist_logistic":
        root = cfg.resolved_data_dir()
        for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                     "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"):
            if not ((root / stem).exists() or (root / f"{stem}.gz").exists()):
                bad("data_dir", f"missing {stem} in {root} (set {DATA_DIR_ENV})")
    return cfg


def parse_config(path=None, overrides: dict | None = None, check_files: bool = True) -> ExperimentConfig:
    """Load ``path`` (if given), apply ``overrides`` on top, validate.

    ``seed`` must be given explicitly, in the file or as an override.
    """
    values = {}
    if path is not None:
        path = Path(path)
        values.update(read_config_text(path.read_text(), source=str(path)))
    for key, raw in (overrides or {}).items():
        if raw is not None:
            values[key] = coerce_value(key, raw)
    if "seed" not in values:
        raise ConfigError("seed: an explicit seed is required", field="seed")
    return validate(ExperimentConfig(**values), check_files=check_files)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    coerced = {k: coerce_value(k, v) for k, v in changes.items()}
    return validate(replace(cfg, **coerced), check_files=False)
