"""Actor/critic for the composite (client, price vector) action.

The actor emits ``N + M`` numbers per state: the first ``N`` are logits of a
categorical over clients (visited clients masked out), the last ``M`` are
means of independent Gaussians over raw prices.  Raw samples map to posted
prices through ``price_scale * softplus(raw)`` and are optionally sorted so
higher-capacity instances never get cheaper offers.  Log-probabilities are
always taken on the raw, unsorted sample.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..nn import MLP, pack
from .normalize import RunningMeanStd

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class PolicyConfig:
    hidden: tuple = (64, 64, 64)
    price_scale: float = 10.0
    rank: bool = True
    learn_client: bool = True
    learn_prices: bool = True
    full_state: bool = False
    random_price_range: tuple = (0.0, 50.0)
    log_std_init: float = 0.0
    normalize_obs: bool = True
    normalize_reward: bool = True

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["random_price_range"] = list(self.random_price_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", cls.hidden))
        d["random_price_range"] = tuple(d.get("random_price_range", cls.random_price_range))
        return cls(**d)


@dataclass
class ActionSample:
    client: int
    raw: np.ndarray       # raw price sample (uniform draw for random-price policies)
    posted: np.ndarray    # prices handed to the environment
    logp: float
    value: float


def masked_log_softmax(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    zm = np.where(mask, z, -np.inf)
    mx = zm.max(axis=-1, keepdims=True)
    lse = mx + np.log(np.exp(zm - mx).sum(axis=-1, keepdims=True))
    return zm - lse


def rank_prices(prices) -> np.ndarray:
    """Sort posted prices ascending so they rise with instance capacity."""
    return np.sort(np.asarray(prices, dtype=np.float64), axis=-1)


def price_transform(raw, scale: float) -> np.ndarray:
    return scale * np.logaddexp(0.0, raw)


def composite_log_prob(z, mean, log_std, client, raw, mask, learn_client=True, learn_prices=True):
    """Batched log-density of (client, raw prices); parts not learned contribute nothing."""
    lp = np.zeros(z.shape[0])
    if learn_client:
        ls = masked_log_softmax(z, mask)
        lp = lp + ls[np.arange(z.shape[0]), client]
    if learn_prices:
        std = np.exp(log_std)
        u = (raw - mean) / std
        lp = lp + (-0.5 * u * u - log_std - _HALF_LOG_2PI).sum(axis=-1)
    return lp


def composite_entropy(z, log_std, mask, learn_client=True, learn_prices=True):
    h = np.zeros(z.shape[0])
    if learn_client:
        ls = masked_log_softmax(z, mask)
        p = np.exp(ls)
        h = h - np.where(mask, p * np.where(mask, ls, 0.0), 0.0).sum(axis=-1)
    if learn_prices:
        h = h + (log_std + 0.5 + _HALF_LOG_2PI).sum()
    return h


class ActorCritic:
    def __init__(self, obs_dim: int, n_clients: int, n_instances: int,
                 cfg: Optional[PolicyConfig] = None, rng=None):
        self.cfg = cfg or PolicyConfig()
        self.obs_dim, self.n_clients, self.n_instances = obs_dim, n_clients, n_instances
        hid = list(self.cfg.hidden)
        self.actor = MLP([obs_dim] + hid + [n_clients + n_instances], rng, out_gain=0.01)
        self.critic = MLP([obs_dim] + hid + [1], rng, out_gain=1.0)
        self.actor_flat, views = pack(self.actor.params + [np.full(n_instances, float(self.cfg.log_std_init))])
        self.actor.params, self.log_std = views[:-1], views[-1]
        self.critic_flat, self.critic.params = pack(self.critic.params)
        self.obs_rms = RunningMeanStd((obs_dim,))
        self.rew_rms = RunningMeanStd((), center=False)

    # parameter groups handed to the optimisers
    @property
    def actor_params(self):
        return self.actor.params + [self.log_std]

    @property
    def critic_params(self):
        return self.critic.params

    def clamp(self):
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def prep_obs(self, obs, update: bool = False):
        if not self.cfg.normalize_obs:
            return np.asarray(obs, dtype=np.float64)
        if update:
            self.obs_rms.update(obs)
        return self.obs_rms.normalize(obs)

    def heads(self, obs_n):
        out, acts = self.actor.forward(np.atleast_2d(obs_n))
        return out[:, :self.n_clients], out[:, self.n_clients:], acts

    def value(self, obs_n) -> np.ndarray:
        return self.critic(np.atleast_2d(obs_n))[:, 0]

    def post(self, raw) -> np.ndarray:
        if not self.cfg.learn_prices:
            posted = np.asarray(raw, dtype=np.float64)
        else:
            posted = price_transform(raw, self.cfg.price_scale)
        return rank_prices(posted) if self.cfg.rank else posted

    def sample_actions(self, obs_n, masks, rng: np.random.Generator):
        """Sample one composite action per row of ``obs_n``.

        Returns ``(clients, raw, posted, logp, values)`` as arrays.
        """
        obs_n = np.atleast_2d(obs_n)
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        if not masks.any(axis=1).all():
            raise ValueError("no valid client to visit; the episode should have ended")
        K = obs_n.shape[0]
        z, mean, _ = self.heads(obs_n)
        if self.cfg.learn_client:
            p = np.exp(masked_log_softmax(z, masks))
        else:
            p = masks / masks.sum(axis=1, keepdims=True)
        cum = np.cumsum(p, axis=1)
        u = rng.random(K)[:, None] * cum[:, -1:]
        clients = np.minimum((cum <= u).sum(axis=1), self.n_clients - 1)
        if not masks[np.arange(K), clients].all():
            raise RuntimeError("sampled a masked client")
        if self.cfg.learn_prices:
            raw = mean + np.exp(self.log_std) * rng.standard_normal((K, self.n_instances))
        else:
            lo, hi = self.cfg.random_price_range
            raw = rng.uniform(lo, hi, (K, self.n_instances))
        logp = composite_log_prob(z, mean, self.log_std, clients, raw, masks,
                                  self.cfg.learn_client, self.cfg.learn_prices)
        return clients, raw, self.post(raw), logp, self.value(obs_n)

    def sample_action(self, obs_n, mask, rng: np.random.Generator) -> ActionSample:
        c, raw, posted, logp, v = self.sample_actions(obs_n, mask, rng)
        return ActionSample(int(c[0]), raw[0], posted[0], float(logp[0]), float(v[0]))

    def greedy_action(self, obs_n, mask, rng: Optional[np.random.Generator] = None) -> ActionSample:
        """Mode of the learned heads; random heads (baselines) still draw from ``rng``."""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("no valid client to visit; the episode should have ended")
        z, mean, _ = self.heads(obs_n)
        z, mean = z[0], mean[0]
        if self.cfg.learn_client:
            client = int(np.argmax(np.where(mask, z, -np.inf)))
        else:
            client = int(rng.choice(np.flatnonzero(mask)))
        if self.cfg.learn_prices:
            raw = mean.copy()
        else:
            lo, hi = self.cfg.random_price_range
            raw = rng.uniform(lo, hi, self.n_instances)
        return ActionSample(client, raw, self.post(raw), 0.0, 0.0)
