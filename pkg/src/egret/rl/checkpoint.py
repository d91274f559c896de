"""Policy checkpoints as self-describing JSON.

Layout::

    {"format": "egret-policy", "version": 1,
     "dims": {"obs": D, "clients": N, "instances": M},
     "policy_config": {...},
     "actor":  {"layers": [{"shape": [fan_in, fan_out], "weight": [...], "bias": [...]}, ...]},
     "critic": {...},
     "log_std": [...],
     "obs_rms": {...}, "rew_rms": {...},
     "meta": {...}}

Weights are row-major flat lists.  Python writes floats with the shortest
repr that parses back to the same double, so a save/load cycle is bit-exact.
"""
from __future__ import annotations

import json

import numpy as np

from .normalize import RunningMeanStd
from .policy import ActorCritic, PolicyConfig

FORMAT = "egret-policy"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def _net(mlp) -> dict:
    layers = []
    for k in range(mlp.n_layers):
        W, b = mlp.params[2 * k], mlp.params[2 * k + 1]
        layers.append(dict(shape=list(W.shape), weight=_floats(W), bias=_floats(b)))
    return dict(layers=layers)


def _rms(r: RunningMeanStd) -> dict:
    st = r.state_dict()
    st["mean"], st["var"] = _floats(st["mean"]), _floats(st["var"])
    return st


def to_dict(policy: ActorCritic, meta: dict = None) -> dict:
    return dict(format=FORMAT, version=VERSION,
                dims=dict(obs=policy.obs_dim, clients=policy.n_clients, instances=policy.n_instances),
                policy_config=policy.cfg.to_dict(),
                actor=_net(policy.actor), critic=_net(policy.critic),
                log_std=_floats(policy.log_std),
                obs_rms=_rms(policy.obs_rms), rew_rms=_rms(policy.rew_rms),
                meta=meta or {})


def dumps(policy: ActorCritic, meta: dict = None) -> str:
    return json.dumps(to_dict(policy, meta), indent=1) + "\n"


def save(policy: ActorCritic, path: str, meta: dict = None) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(policy, meta))


def _load_net(mlp, d, name):
    layers = d["layers"]
    if len(layers) != mlp.n_layers:
        raise CheckpointError(f"{name}: expected {mlp.n_layers} layers, found {len(layers)}")
    for k, layer in enumerate(layers):
        W, b = mlp.params[2 * k], mlp.params[2 * k + 1]
        if tuple(layer["shape"]) != W.shape:
            raise CheckpointError(f"{name}.layers[{k}]: shape {layer['shape']} != {list(W.shape)}")
        W[...] = np.asarray(layer["weight"], dtype=np.float64).reshape(W.shape)
        b[...] = np.asarray(layer["bias"], dtype=np.float64)


def from_dict(d: dict) -> ActorCritic:
    if d.get("format") != FORMAT or d.get("version") != VERSION:
        raise CheckpointError("not an egret policy checkpoint")
    dims = d["dims"]
    policy = ActorCritic(dims["obs"], dims["clients"], dims["instances"],
                         PolicyConfig.from_dict(d["policy_config"]), rng=np.random.default_rng(0))
    _load_net(policy.actor, d["actor"], "actor")
    _load_net(policy.critic, d["critic"], "critic")
    if len(d["log_std"]) != policy.n_instances:
        raise CheckpointError("log_std: length does not match the instance count")
    policy.log_std[...] = d["log_std"]
    policy.obs_rms = RunningMeanStd.from_state(d["obs_rms"])
    policy.rew_rms = RunningMeanStd.from_state(d["rew_rms"])
    return policy


def load(path: str) -> tuple:
    """Return ``(policy, meta)``."""
    with open(path) as fh:
        d = json.load(fh)
    return from_dict(d), d.get("meta", {})
