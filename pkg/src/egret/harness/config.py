"""Experiment configuration, client populations and seeded random streams.

Configs are JSON documents.  Any field can be overridden from the command
line with a dotted path, e.g. ``--set hp.lr=1e-3 --set dscom.lam=4``.

Population files are JSON too::

    {"clients": [{"d": 3.0, "f": 1.5, "b": 0.4, "mu": 0.01, "nu": 0.001,
                  "alpha": 0.1, "beta": 1.0, "gamma": 1.0}, ...],
     "capacities": [5, 10, ..., 50],
     "available": [true, ...]}          # optional
"""
from __future__ import annotations

import copy
import json
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..market import ClientProfile, ResourceCatalog
from ..rl.policy import PolicyConfig
from ..rl.ppo import HyperParams

REFERENCE_POPULATION_SEED = 20240517


class ConfigError(ValueError):
    pass


@dataclass
class PopulationSpec:
    n_clients: int = 5
    d_mean: float = 3.0
    d_sd: float = 0.1
    f_low: float = 1.0
    f_high: float = 2.0
    b_low: float = 0.30
    b_high: float = 0.50
    mu: float = 1e-2
    nu: float = 1e-3
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 1.0
    seed: int = REFERENCE_POPULATION_SEED
    file: str = ""


@dataclass
class CatalogSpec:
    capacities: list = field(default_factory=lambda: [5.0 * k for k in range(1, 11)])


@dataclass
class DscomSpec:
    episode_length: int = 20
    interval: float = 3.0
    n_max: int = 20
    arrivals: str = "uniform"
    lam: float = 2.0
    static_set_size: int = 10
    perturb: str = ""          # "", "data" or "bandwidth"
    mu_bd: float = 40.0


@dataclass
class TrainSpec:
    method: str = "egret"
    eval_every: int = 50_000
    eval_episodes: int = 20
    eval_traces: int = 10
    final_eval_episodes: int = 200
    n_envs: int = 8


@dataclass
class ExperimentConfig:
    mode: str = "scom"
    seed: int = 0
    population: PopulationSpec = field(default_factory=PopulationSpec)
    catalog: CatalogSpec = field(default_factory=CatalogSpec)
    dscom: DscomSpec = field(default_factory=DscomSpec)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    hp: HyperParams = field(default_factory=HyperParams)
    train: TrainSpec = field(default_factory=TrainSpec)
    out: str = "runs"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        kinds = dict(population=PopulationSpec, catalog=CatalogSpec, dscom=DscomSpec,
                     hp=HyperParams, train=TrainSpec)
        kw = {}
        known = {f.name for f in fields(cls)}
        for k, v in d.items():
            if k not in known:
                raise ConfigError(f"{k}: unknown field")
            try:
                if k == "policy":
                    kw[k] = PolicyConfig.from_dict(v)
                elif k in kinds:
                    kw[k] = kinds[k](**v)
                else:
                    kw[k] = v
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{k}: {e}") from e
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self):
        if self.mode not in ("scom", "dscom"):
            raise ConfigError(f"mode: expected 'scom' or 'dscom', got {self.mode!r}")
        p = self.population
        if p.n_clients < 1:
            raise ConfigError("population.n_clients: must be positive")
        if not (p.d_mean > 0 and p.d_sd >= 0 and 0 < p.f_low <= p.f_high and 0 < p.b_low <= p.b_high):
            raise ConfigError("population: distribution parameters must be positive and ordered")
        try:
            ResourceCatalog(tuple(self.catalog.capacities))
        except ValueError as e:
            raise ConfigError(f"catalog.capacities: {e}") from e
        s = self.dscom
        if s.episode_length < 1 or s.interval <= 0 or s.n_max < 0:
            raise ConfigError("dscom: episode_length, interval must be positive, n_max non-negative")
        if s.arrivals not in ("uniform", "poisson"):
            raise ConfigError(f"dscom.arrivals: unknown mode {s.arrivals!r}")
        if s.perturb not in ("", "data", "bandwidth"):
            raise ConfigError(f"dscom.perturb: unknown mode {s.perturb!r}")
        if self.train.n_envs < 1:
            raise ConfigError("train.n_envs: must be positive")
        if s.arrivals == "poisson" and not s.lam > 0:
            raise ConfigError("dscom.lam: must be positive")


def default_config(mode: str = "scom") -> ExperimentConfig:
    cfg = ExperimentConfig(mode=mode)
    if mode == "dscom":
        cfg.population.n_clients = 20
        cfg.hp.total_steps = 2_000_000     # desk-scale budget
    cfg.validate()
    return cfg


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``path.to.field=value`` overrides to a config dict."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        path, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"{item}: expected path=value")
        keys = path.strip().split(".")
        node = d
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"{path}: no such section {k!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"{path}: unknown field")
        node[keys[-1]] = _coerce(value.strip())
    return d


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path: str = "", overrides=(), mode: str = "") -> ExperimentConfig:
    """Defaults for the mode, then the file (if any), then dotted overrides."""
    d = {}
    if path:
        with open(path) as fh:
            d = json.load(fh)
    mode = mode or d.get("mode", "scom")
    d = _merge(default_config(mode).to_dict(), d)
    d["mode"] = mode
    return ExperimentConfig.from_dict(apply_overrides(d, overrides))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one concern (population, traces, policy, env, eval...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def draw_population(spec: PopulationSpec, n: int = None) -> list:
    rng = rng_stream(spec.seed, "population")
    n = spec.n_clients if n is None else n
    out = []
    for _ in range(n):
        d = float(rng.normal(spec.d_mean, spec.d_sd)) if spec.d_sd > 0 else spec.d_mean
        while d <= 0:
            d = float(rng.normal(spec.d_mean, spec.d_sd))
        f = float(rng.uniform(spec.f_low, spec.f_high))
        b = float(rng.uniform(spec.b_low, spec.b_high))
        out.append(ClientProfile(d, f, b, spec.mu, spec.nu, spec.alpha, spec.beta, spec.gamma))
    return out


def load_population(path: str):
    with open(path) as fh:
        d = json.load(fh)
    clients = [ClientProfile(**c) for c in d["clients"]]
    cat = ResourceCatalog(tuple(d["capacities"]), tuple(d["available"]) if "available" in d else None)
    return clients, cat


def dump_population(clients, catalog) -> str:
    return json.dumps(dict(clients=[c.to_dict() for c in clients], capacities=list(catalog.capacities),
                           available=list(catalog.available)), indent=2) + "\n"


def population_and_catalog(cfg: ExperimentConfig):
    if cfg.population.file:
        return load_population(cfg.population.file)
    return draw_population(cfg.population), ResourceCatalog(tuple(cfg.catalog.capacities))
