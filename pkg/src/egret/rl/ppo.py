"""Clipped-surrogate policy optimisation with generalised advantage estimation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..nn import SGD, Adam, clip_grad_norm, flat_grad
from .policy import ActorCritic, composite_entropy, composite_log_prob, masked_log_softmax


@dataclass
class HyperParams:
    lr: float = 3e-4
    lr_decay: bool = True
    clip: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    gamma: float = 0.99
    lam: float = 0.95
    T: int = 2048
    minibatch: int = 64
    epochs: int = 10
    total_steps: int = 1_000_000
    max_grad_norm: float = 0.5
    optimizer: str = "adam"
    advantage: str = "gae"       # "gae" or "rtg" (discounted reward-to-go, no baseline)
    norm_adv: bool = True

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.T < 1 or self.minibatch < 1 or self.epochs < 0 or self.total_steps < 0:
            raise ValueError("T, minibatch, epochs and total_steps must be positive")
        if self.optimizer not in ("adam", "sga"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.advantage not in ("gae", "rtg"):
            raise ValueError(f"unknown advantage estimator {self.advantage!r}")

    def to_dict(self):
        return asdict(self)


def gae(rewards, values, dones, gamma: float, lam: float):
    """Advantages and discounted reward-to-go targets for one rollout.

    ``values`` has one more entry than ``rewards``: the estimate for the
    state reached after the final step, used only if that step did not end
    an episode.  ``dones[t]`` marks that step ``t`` ended an episode.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    T = len(r)
    if len(v) != T + 1 or len(d) != T:
        raise ValueError("need len(values) == len(rewards) + 1 == len(dones) + 1")
    adv = np.zeros(T)
    ret = np.zeros(T)
    last_adv = 0.0
    last_ret = v[T]
    for t in reversed(range(T)):
        nonterm = 0.0 if d[t] else 1.0
        nxt = v[t + 1] * nonterm
        delta = r[t] + gamma * nxt - v[t]
        last_adv = delta + gamma * lam * nonterm * last_adv
        adv[t] = last_adv
        last_ret = r[t] + gamma * nonterm * last_ret
        ret[t] = last_ret
    return adv, ret


class TrajectoryBuffer:
    """Rollout storage for ``n_envs`` environments stepped in lockstep.

    Row ``t * n_envs + e`` holds step ``t`` of environment ``e``.
    """

    def __init__(self, capacity: int, obs_dim: int, n_clients: int, n_instances: int, n_envs: int = 1):
        if capacity % n_envs:
            raise ValueError("capacity must be a multiple of n_envs")
        self.capacity = capacity
        self.n_envs = n_envs
        self.obs = np.zeros((capacity, obs_dim))
        self.mask = np.zeros((capacity, n_clients), dtype=bool)
        self.client = np.zeros(capacity, dtype=np.int64)
        self.raw = np.zeros((capacity, n_instances))
        self.logp = np.zeros(capacity)
        self.reward = np.zeros(capacity)
        self.value = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.adv = np.zeros(capacity)
        self.target = np.zeros(capacity)
        self.n = 0

    @property
    def full(self) -> bool:
        return self.n >= self.capacity

    def add(self, obs, mask, client, raw, logp, reward, value, done):
        """Append one row per environment (leading axis of length ``n_envs``)."""
        k, e = self.n, self.n_envs
        if k + e > self.capacity:
            raise IndexError("trajectory buffer is full")
        sl = slice(k, k + e)
        self.obs[sl] = obs
        self.mask[sl] = mask
        self.client[sl] = client
        self.raw[sl] = raw
        self.logp[sl] = logp
        self.reward[sl] = reward
        self.value[sl] = value
        self.done[sl] = done
        self.n = k + e

    def finish(self, last_values, hp: HyperParams):
        e = self.n_envs
        last_values = np.broadcast_to(np.asarray(last_values, dtype=np.float64), (e,))
        for c in range(e):
            idx = slice(c, self.n, e)
            vals = np.append(self.value[idx], last_values[c])
            adv, ret = gae(self.reward[idx], vals, self.done[idx], hp.gamma, hp.lam)
            self.adv[idx] = ret if hp.advantage == "rtg" else adv
            self.target[idx] = ret

    def clear(self):
        self.n = 0

    def batch(self, idx) -> dict:
        return dict(obs=self.obs[idx], mask=self.mask[idx], client=self.client[idx], raw=self.raw[idx],
                    logp=self.logp[idx], adv=self.adv[idx], target=self.target[idx])


def surrogate(ratio, adv, clip: float):
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)


def loss_and_grads(policy: ActorCritic, batch: dict, hp: HyperParams, norm_adv=None):
    """Loss ``-(L_clip - c1 * L_vf + c2 * S)`` and its gradients.

    Returns ``(report, actor_grads, critic_grads)``; ``actor_grads`` follows
    ``policy.actor_params`` (network weights then log-std).
    """
    cfg = policy.cfg
    obs, mask, client, raw = batch["obs"], batch["mask"], batch["client"], batch["raw"]
    B = obs.shape[0]
    adv = batch["adv"]
    if hp.norm_adv if norm_adv is None else norm_adv:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8) if B > 1 else adv * 0.0
    N = policy.n_clients
    out, acts = policy.actor.forward(obs)
    z, mean = out[:, :N], out[:, N:]
    log_std = policy.log_std
    lc, lpr = cfg.learn_client, cfg.learn_prices

    logp = composite_log_prob(z, mean, log_std, client, raw, mask, lc, lpr)
    ratio = np.exp(logp - batch["logp"])
    surr = surrogate(ratio, adv, hp.clip)
    ent = composite_entropy(z, log_std, mask, lc, lpr)
    unclipped = (ratio * adv) <= (np.clip(ratio, 1 - hp.clip, 1 + hp.clip) * adv)

    # d loss / d logp per sample
    g_logp = -(ratio * adv * unclipped) / B
    dz = np.zeros_like(z)
    dmean = np.zeros_like(mean)
    dlogstd = np.zeros_like(log_std)
    if lc:
        ls = masked_log_softmax(z, mask)
        p = np.where(mask, np.exp(ls), 0.0)
        onehot = np.zeros_like(z)
        onehot[np.arange(B), client] = 1.0
        dz += g_logp[:, None] * (onehot - p)
        h_cat = -(p * np.where(mask, ls, 0.0)).sum(axis=1)
        dH = -p * (np.where(mask, ls, 0.0) + h_cat[:, None])
        dz += -(hp.c2 / B) * dH
    if lpr:
        inv_var = np.exp(-2.0 * log_std)
        diff = raw - mean
        dmean += g_logp[:, None] * diff * inv_var
        dlogstd += (g_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0)
        dlogstd += -hp.c2 * np.ones_like(log_std)
    a_grads = policy.actor.backward(acts, np.concatenate([dz, dmean], axis=1)) + [dlogstd]

    v, cacts = policy.critic.forward(obs)
    err = v[:, 0] - batch["target"]
    c_grads = policy.critic.backward(cacts, (hp.c1 * 2.0 / B) * err[:, None])

    pol_loss = -float(surr.mean())
    v_loss = float((err ** 2).mean())
    entropy = float(ent.mean())
    report = dict(policy_loss=pol_loss, value_loss=v_loss, entropy=entropy,
                  loss=pol_loss + hp.c1 * v_loss - hp.c2 * entropy,
                  approx_kl=float((batch["logp"] - logp).mean()),
                  clipfrac=float((np.abs(ratio - 1) > hp.clip).mean()))
    return report, a_grads, c_grads


def make_optimizers(policy: ActorCritic, hp: HyperParams):
    cls = Adam if hp.optimizer == "adam" else SGD
    return cls([policy.actor_flat], lr=hp.lr), cls([policy.critic_flat], lr=hp.lr)


def ppo_update(policy: ActorCritic, buffer: TrajectoryBuffer, hp: HyperParams, optimizers,
               rng: np.random.Generator, lr: float = None) -> dict:
    """Several epochs of minibatch ascent on the clipped objective, then clear the buffer."""
    n = buffer.n
    a_opt, c_opt = optimizers
    lr = hp.lr if lr is None else lr
    sums, count = {}, 0
    for _ in range(hp.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, hp.minibatch):
            idx = perm[s:s + hp.minibatch]
            rep, ag, cg = loss_and_grads(policy, buffer.batch(idx), hp)
            if not np.isfinite(rep["loss"]):
                raise FloatingPointError(f"non-finite PPO loss: {rep}")
            ag, rep["actor_grad_norm"] = clip_grad_norm([flat_grad(ag)], hp.max_grad_norm)
            cg, rep["critic_grad_norm"] = clip_grad_norm([flat_grad(cg)], hp.max_grad_norm)
            a_opt.step(ag, lr)
            c_opt.step(cg, lr)
            policy.clamp()
            for k, val in rep.items():
                sums[k] = sums.get(k, 0.0) + val
            count += 1
    buffer.clear()
    return {k: val / max(count, 1) for k, val in sums.items()}
