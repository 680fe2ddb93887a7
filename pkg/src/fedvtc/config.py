"""Run configuration and its INI serialization.

A config file holds one ``[run]`` section::

    [run]
    schema_version = 1
    name = fedvtc-singular
    profile = mnist
    rounds = 20
    ...

Suite files add ``[suite]`` (``seeds``, ``repeats``) and one ``[variant:<name>]``
section per member, each overriding keys of ``[run]``.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional

from .errors import ConfigError

SCHEMA_VERSION = 1
TC_MODES = ("singular", "regular")
TRAIN_MODES = ("full", "elbo_only")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class RunConfig:
    name: str = "fedvtc"
    profile: str = "mnist"
    data_root: str = "data/mnist"
    toy_data: bool = False
    train_cap: Optional[int] = None
    test_cap: Optional[int] = None
    data_seed: int = 0
    clients: int = 10
    participants: int = 3
    clusters: int = 2
    alpha: float = 0.1
    rounds: int = 20
    finetune_rounds: int = 5
    epochs: int = 1
    batch_size: int = 16
    optimizer: str = "adam"
    lr: float = 1e-3
    finetune_lr: Optional[float] = None
    lam: float = 0.1
    synthetic: int = 100
    sigma_init: float = 1.0
    tc_mode: str = "singular"
    train_mode: str = "full"
    seed: int = 1

    def __post_init__(self):
        positive = ("clients", "participants", "clusters", "rounds", "batch_size", "synthetic")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("epochs", "finetune_rounds"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be nonnegative, got {getattr(self, key)}")
        if self.participants > self.clients:
            raise ConfigError(f"participants ({self.participants}) exceeds clients ({self.clients})")
        if self.tc_mode not in TC_MODES:
            raise ConfigError(f"tc_mode must be one of {TC_MODES}, got {self.tc_mode!r}")
        if self.train_mode not in TRAIN_MODES:
            raise ConfigError(f"train_mode must be one of {TRAIN_MODES}, got {self.train_mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr < 0 or (self.finetune_lr is not None and self.finetune_lr < 0):
            raise ConfigError("learning rates must be nonnegative")
        if self.lam < 0:
            raise ConfigError(f"lam must be nonnegative, got {self.lam}")
        if not self.alpha > 0 or not self.sigma_init > 0:
            raise ConfigError("alpha and sigma_init must be positive")

    @property
    def effective_finetune_lr(self) -> float:
        return self.lr if self.finetune_lr is None else self.finetune_lr

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    raw = raw.strip()
    if "Optional" in str(kind) and raw.lower() in ("", "none"):
        return None
    try:
        if "bool" in str(kind):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in str(kind):
            return int(raw)
        if "float" in str(kind):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_section(section: Dict[str, str], base: Optional[RunConfig] = None) -> RunConfig:
    values = {k: _coerce(k, v) for k, v in section.items() if k != "schema_version"}
    return replace(base or RunConfig(), **values)


def _parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(interpolation=None, default_section="__none__")


def _check_schema(cp: configparser.ConfigParser, origin) -> None:
    if "run" not in cp:
        raise ConfigError(f"{origin}: missing [run] section")
    version = cp["run"].get("schema_version")
    if version is None or int(version) != SCHEMA_VERSION:
        raise ConfigError(f"{origin}: schema_version must be {SCHEMA_VERSION}, got {version!r}")


def loads_config(text: str, origin="<string>") -> RunConfig:
    cp = _parser()
    cp.read_string(text, source=str(origin))
    _check_schema(cp, origin)
    return parse_section(dict(cp["run"]))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return loads_config(path.read_text(), path)


def dumps_config(cfg: RunConfig) -> str:
    lines = ["[run]", f"schema_version = {SCHEMA_VERSION}"]
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ExperimentSuite:
    name: str
    base: RunConfig
    variants: Dict[str, RunConfig]
    seeds: List[int]


def default_variants(base: RunConfig) -> Dict[str, RunConfig]:
    return {
        "fedvtc-singular": base.with_overrides(name="fedvtc-singular", tc_mode="singular", train_mode="full"),
        "fedvtc-regular": base.with_overrides(name="fedvtc-regular", tc_mode="regular", train_mode="full"),
        "elbo-only": base.with_overrides(name="elbo-only", tc_mode="singular", train_mode="elbo_only"),
        "no-finetune": base.with_overrides(name="no-finetune", tc_mode="singular", train_mode="full", finetune_rounds=0),
    }


def load_suite(path, repeats: Optional[int] = None) -> ExperimentSuite:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"suite file not found: {path}")
    cp = _parser()
    cp.read(path)
    _check_schema(cp, path)
    base = parse_section(dict(cp["run"]))
    suite_sec = cp["suite"] if "suite" in cp else {}
    variants = {}
    for sec in cp.sections():
        if sec.startswith("variant:"):
            vname = sec.split(":", 1)[1].strip()
            variants[vname] = parse_section({**dict(cp[sec]), "name": vname}, base)
    if not variants:
        variants = default_variants(base)
    n = repeats or int(suite_sec.get("repeats", 3))
    if "seeds" in suite_sec:
        seeds = [int(s) for s in suite_sec["seeds"].replace(",", " ").split()][:n]
    else:
        seeds = [base.seed + i for i in range(n)]
    return ExperimentSuite(suite_sec.get("name", path.stem), base, variants, seeds)
