"""INI-style config files with a strict per-command schema.

Unknown sections or keys are errors, not warnings; every value is parsed and
validated before any work starts.  Overrides arrive as ``section.key=value``
strings and go through the same schema.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .experiments import ExperimentConfig
from .theory import BoundCheckConfig


class ConfigError(ValueError):
    """Config file or override failed schema validation."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> tuple:
    return tuple(int(v.strip()) for v in text.split(",") if v.strip())


def _parse_float_tuple(text: str) -> tuple:
    return tuple(float(v.strip()) for v in text.split(",") if v.strip())


def _parse_str_tuple(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _parse_opt_float(text: str) -> Optional[float]:
    t = text.strip()
    return None if t in ("", "none") else float(t)


# schema: section -> key -> (parser, target attribute on the config object)
EXPERIMENT_SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str]]] = {
    "experiment": {
        "name": (str, "name"),
        "kind": (str, "kind"),
    },
    "model": {
        "m": (int, "m"),
        "l": (int, "l"),
        "n": (int, "N"),
    },
    "policies": {
        "policies": (_parse_str_tuple, "policies"),
    },
    "training": {
        "steps": (int, "steps"),
        "batch": (int, "batch"),
        "lr": (float, "lr"),
        "optimizer": (str, "optimizer"),
        "beta1": (float, "beta1"),
        "beta2": (float, "beta2"),
        "weight_decay": (float, "weight_decay"),
        "seeds": (_parse_int_tuple, "seeds"),
    },
    "schedule": {
        "t": (int, "schedule_T"),
        "beta_start": (float, "beta_start"),
        "beta_end": (float, "beta_end"),
    },
    "logging": {
        "log_interval": (int, "log_interval"),
        "window": (int, "window"),
        "ema_decay": (float, "ema_decay"),
        "checkpoint_interval": (int, "checkpoint_interval"),
        "m0_probes": (int, "m0_probes"),
        "m0_ascent_steps": (int, "m0_ascent_steps"),
    },
    "scenario": {
        "loss_threshold": (_parse_opt_float, "loss_threshold"),
        "kappa_grid": (_parse_float_tuple, "kappa_grid"),
        "unsafe_kappa": (_parse_bool, "unsafe_kappa"),
        "ls_channels": (int, "ls_channels"),
        "ls_ratio": (int, "ls_ratio"),
    },
}

THEORY_SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str]]] = {
    "check": {
        "kind": (str, "kind"),
        "seeds": (int, "seeds"),
        "probes": (int, "probes"),
        "rho": (float, "rho"),
        "kappa_grid": (_parse_float_tuple, "kappa_grid"),
        "min_r_squared": (_parse_opt_float, "min_r_squared"),
        "min_spearman": (_parse_opt_float, "min_spearman"),
        "eps_grid": (_parse_float_tuple, "eps_grid"),
        "sigma_grid": (_parse_float_tuple, "sigma_grid"),
        "ascent_steps": (int, "ascent_steps"),
        "seed": (int, "seed"),
    },
    "model": {
        "m": (int, "m"),
        "l": (int, "l"),
        "n": (int, "N"),
    },
    "schedule": {
        "t": (int, "schedule_T"),
        "beta_start": (float, "beta_start"),
        "beta_end": (float, "beta_end"),
    },
}

MATHCHECK_SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str]]] = {
    "mathcheck": {
        "samples": (int, "samples"),
        "seed": (int, "seed"),
    },
}


@dataclass
class TheoryCheckConfig:
    kind: str = "hidden-norm"  # hidden-norm | gradient-norm | robustness | noise
    m: int = 64
    l: int = 2
    N: int = 12
    seeds: int = 20
    probes: int = 64
    rho: float = 0.5
    kappa_grid: tuple = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)
    min_r_squared: Optional[float] = None
    min_spearman: Optional[float] = None
    eps_grid: tuple = (0.0, 0.05, 0.1, 0.2)
    sigma_grid: tuple = (0.0, 0.1, 0.2, 0.4)
    ascent_steps: int = 30
    seed: int = 0
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self) -> None:
        if self.kind not in ("hidden-norm", "gradient-norm", "robustness", "noise"):
            raise ConfigError(f"unknown theory check kind {self.kind!r}")
        if self.kind in ("hidden-norm", "gradient-norm"):
            if len(self.kappa_grid) < 3:
                raise ConfigError("kappa_grid needs at least 3 values")
            if len(set(self.kappa_grid)) == 1:
                raise ConfigError("kappa_grid is degenerate: all values equal")

    def bound_config(self) -> BoundCheckConfig:
        return BoundCheckConfig(m=self.m, l=self.l, N=self.N, seeds=self.seeds,
                                rho=self.rho, probes=self.probes,
                                kappa_grid=tuple(self.kappa_grid))


@dataclass
class MathCheckConfig:
    samples: int = 100_000
    seed: int = 0


def _read_ini(path: str) -> configparser.ConfigParser:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"config file {path} failed to parse: {exc}") from exc
    return parser


def _apply(schema, target, section: str, key: str, raw: str, origin: str) -> None:
    sec = schema.get(section)
    if sec is None:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    entry = sec.get(key.lower())
    if entry is None:
        raise ConfigError(f"{origin}: unknown key {section}.{key}")
    parse, attr = entry
    try:
        value = parse(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{origin}: bad value for {section}.{key}: {raw!r} ({exc})") from exc
    setattr(target, attr, value)


def _load(schema, target, path: str, overrides: list[str]):
    parser = _read_ini(path)
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply(schema, target, section, key, raw, path)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply(schema, target, section.strip(), key.strip(), raw.strip(), f"override {item!r}")
    return target


def load_experiment_config(path: str, overrides: list[str],
                           validate: bool = True) -> ExperimentConfig:
    cfg = _load(EXPERIMENT_SCHEMA, ExperimentConfig(), path, overrides)
    if validate:
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def load_theory_config(path: str, overrides: list[str]) -> TheoryCheckConfig:
    cfg = _load(THEORY_SCHEMA, TheoryCheckConfig(), path, overrides)
    cfg.validate()
    return cfg


def load_mathcheck_config(path: Optional[str], overrides: list[str]) -> MathCheckConfig:
    cfg = MathCheckConfig()
    if path is not None:
        _load(MATHCHECK_SCHEMA, cfg, path, overrides)
    elif overrides:
        for item in overrides:
            dotted, raw = item.split("=", 1)
            section, key = dotted.split(".", 1)
            _apply(MATHCHECK_SCHEMA, cfg, section.strip(), key.strip(), raw.strip(),
                   f"override {item!r}")
    return cfg


def schema_help() -> str:
    """Human-readable schema listing for --help."""
    lines = ["config schema (INI sections and keys):", "", "experiment command:"]
    for section, keys in EXPERIMENT_SCHEMA.items():
        lines.append(f"  [{section}]  " + ", ".join(sorted(keys)))
    lines.append("theory-check command:")
    for section, keys in THEORY_SCHEMA.items():
        lines.append(f"  [{section}]  " + ", ".join(sorted(keys)))
    lines.append("math-check command:")
    for section, keys in MATHCHECK_SCHEMA.items():
        lines.append(f"  [{section}]  " + ", ".join(sorted(keys)))
    return "\n".join(lines)
