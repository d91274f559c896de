"""Training and evaluation loops shared by the CLI and the acceptance suite."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..env import ArrivalTrace, CompositeAction, DscomEnv, ScomEnv, gen_traces
from ..market import MechanismViolation, ResourceCatalog
from ..oracle import greedy_plan, exact_plan, payment_matrix
from ..rl.normalize import ReturnScaler
from ..rl.policy import ActorCritic, PolicyConfig
from ..rl.ppo import TrajectoryBuffer, make_optimizers, ppo_update
from .config import ExperimentConfig, population_and_catalog, rng_stream

METHODS = ("egret", "egretn", "rop", "rpp", "begret", "deepspm")


def method_policy_config(method: str, base: PolicyConfig) -> PolicyConfig:
    """Policy variant behind each method name."""
    cfg = PolicyConfig.from_dict(base.to_dict())
    if method == "egretn":
        cfg.rank = False
    elif method == "rop":
        cfg.learn_client = False
    elif method == "rpp":
        cfg.learn_prices = False
    elif method == "begret":
        cfg.full_state = True
    elif method not in ("egret", "deepspm"):
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return cfg


def baseline_policy(kind: str, obs_dim: int, n_clients: int, n_instances: int,
                    base: PolicyConfig = None, rng=None) -> ActorCritic:
    names = {"ROP": "rop", "RPP": "rpp", "EgretN": "egretn", "DeepSPM": "deepspm", "BEgret": "begret",
             "Egret": "egret"}
    method = names.get(kind, kind)
    return ActorCritic(obs_dim, n_clients, n_instances,
                       method_policy_config(method, base or PolicyConfig()), rng)


def perturb_spec(cfg: ExperimentConfig):
    p = cfg.dscom.perturb
    if not p:
        return None
    if p == "bandwidth":
        return dict(mode="bandwidth", mu_bd=cfg.dscom.mu_bd)
    return dict(mode="data")


def static_client_set(cfg: ExperimentConfig, seed: int) -> tuple:
    rng = rng_stream(seed, "static-set")
    n = cfg.population.n_clients
    k = min(cfg.dscom.static_set_size, n)
    return tuple(sorted(rng.choice(n, size=k, replace=False).tolist()))


def make_env(cfg: ExperimentConfig, clients, catalog, full_state=False, trace_source=None):
    if cfg.mode == "scom":
        return ScomEnv(clients, catalog, full_state=full_state)
    return DscomEnv(clients, catalog, trace_source=trace_source, full_state=full_state,
                    perturb=perturb_spec(cfg))


def training_env(cfg: ExperimentConfig, method: str, clients, catalog, seed: int, full_state=False,
                 worker: int = 0):
    if cfg.mode == "scom":
        return make_env(cfg, clients, catalog, full_state)
    s = cfg.dscom
    n = len(clients)
    if method == "deepspm":
        static = ArrivalTrace([static_client_set(cfg, seed)] * s.episode_length, s.interval)
        source = lambda: static
    else:
        rng = rng_stream(seed, f"traces-{worker}" if worker else "traces")
        source = lambda: gen_traces(1, s.episode_length, n, s.arrivals, s.n_max, s.lam, rng, s.interval)[0]
    return make_env(cfg, clients, catalog, full_state, source)


def eval_traces(cfg: ExperimentConfig, n_traces: int, length: int = None, seed: int = None):
    s = cfg.dscom
    rng = rng_stream(cfg.seed if seed is None else seed, "eval-traces")
    return gen_traces(n_traces, length or s.episode_length, cfg.population.n_clients, s.arrivals,
                      s.n_max, s.lam, rng, s.interval)


@dataclass
class EpisodeLog:
    revenue: float
    steps: list = field(default_factory=list)
    planned: float = None


def run_episode(env, act, trace=None, seed=None) -> EpisodeLog:
    obs = env.reset(seed=seed) if trace is None else env.reset(trace, seed=seed)
    steps = []
    while not env.done:
        obs, r, done, info = env.step(act(obs, env))
        steps.append(info)
    return EpisodeLog(env.revenue, steps)


def policy_actor(policy: ActorCritic, rng, greedy=True):
    def act(obs, env):
        obs_n = policy.prep_obs(obs)
        mask = env.client_mask
        s = policy.greedy_action(obs_n, mask, rng) if greedy else policy.sample_action(obs_n, mask, rng)
        return CompositeAction(s.client, s.posted)
    return act


class OracleActor:
    """Full-information seller: re-plans over the clients waiting now and the free instances."""

    def __init__(self, exact: bool = False):
        self.exact = exact
        self.planned = 0.0
        self._cache = (None, None)

    def _matrices(self, env):
        profiles = env.profiles if isinstance(env, DscomEnv) else env.clients
        if self._cache[0] is not profiles:
            if isinstance(profiles, list):
                profiles = dict(enumerate(profiles))
            waiting = sorted(profiles)
            tau = np.zeros((env.n_clients, env.n_instances))
            P = np.zeros_like(tau)
            if waiting:
                t, p = payment_matrix([profiles[i] for i in waiting], ResourceCatalog(env.catalog.capacities))
                tau[waiting], P[waiting] = t, p
            self._cache = (env.profiles if isinstance(env, DscomEnv) else env.clients, (tau, P))
        return self._cache[1]

    def __call__(self, obs, env):
        tau, P = self._matrices(env)
        rows = env.state.rho_client.astype(bool)
        cols = env.state.rho_res.astype(bool)
        live = np.where(rows[:, None] & cols[None, :], tau, 0.0)
        plan = (exact_plan if self.exact else greedy_plan)(live, P)
        m = env.n_instances
        if not plan.trace:
            return CompositeAction(int(np.flatnonzero(rows)[0]), (math.inf,) * m)
        i, j = plan.trace[0], plan.instances[0]
        self.planned += plan.payments[0]
        prices = [p if cols[k] else math.inf for k, p in enumerate(plan.prices[0])]
        return CompositeAction(i, tuple(prices))


def oracle_episode(env, trace=None, seed=None, exact=False) -> EpisodeLog:
    actor = OracleActor(exact)
    log = run_episode(env, actor, trace, seed)
    log.planned = actor.planned
    return log


def evaluate_policy(policy: ActorCritic, cfg: ExperimentConfig, clients, catalog, *, episodes=1,
                    traces=None, seed=0, greedy=True) -> list:
    """Revenues of ``policy`` on the SCOM population or on each DSCOM trace."""
    env = make_env(cfg, clients, catalog, policy.cfg.full_state)
    rng = rng_stream(seed, "eval")
    act = policy_actor(policy, rng, greedy)
    if cfg.mode == "scom":
        return [run_episode(env, act).revenue for _ in range(episodes)]
    return [run_episode(env, act, tr, seed=n).revenue for n, tr in enumerate(traces)]


def oracle_revenues(cfg: ExperimentConfig, clients, catalog, traces=None, exact=False) -> list:
    env = make_env(cfg, clients, catalog)
    if cfg.mode == "scom":
        return [oracle_episode(env, exact=exact).planned]
    return [oracle_episode(env, tr, seed=n, exact=exact).planned for n, tr in enumerate(traces)]


def is_stochastic(policy: ActorCritic) -> bool:
    return not (policy.cfg.learn_client and policy.cfg.learn_prices)


@dataclass
class TrainResult:
    policy: ActorCritic
    curve: list
    method: str
    seed: int
    episodes: int = 0


CURVE_FIELDS = ("step", "episodes", "eval_revenue", "train_revenue", "policy_loss", "value_loss",
                "entropy", "mean_log_std")


def train(cfg: ExperimentConfig, method: str = None, seed: int = None, total_steps: int = None,
          clients=None, catalog=None, log=None) -> TrainResult:
    """Collect rollouts and run clipped-surrogate updates for ``total_steps`` environment steps.

    ``cfg.train.n_envs`` copies of the environment are stepped in lockstep so
    the policy runs on batches; every copy has its own trace stream.
    """
    method = method or cfg.train.method
    seed = cfg.seed if seed is None else seed
    if clients is None:
        clients, catalog = population_and_catalog(cfg)
    pcfg = method_policy_config(method, cfg.policy)
    K = cfg.train.n_envs
    envs = [training_env(cfg, method, clients, catalog, seed, pcfg.full_state, k) for k in range(K)]
    e0 = envs[0]
    hp = cfg.hp
    total = hp.total_steps if total_steps is None else total_steps
    policy = ActorCritic(e0.obs_dim, e0.n_clients, e0.n_instances, pcfg, rng_stream(seed, "init"))
    opts = make_optimizers(policy, hp)
    buf = TrajectoryBuffer(hp.T - hp.T % K or K, e0.obs_dim, e0.n_clients, e0.n_instances, K)
    pol_rng = rng_stream(seed, "policy")
    upd_rng = rng_stream(seed, "minibatch")
    env_rng = rng_stream(seed, "env")
    ev_traces = eval_traces(cfg, cfg.train.eval_traces) if cfg.mode == "dscom" else None
    ev_eps = cfg.train.eval_episodes if is_stochastic(policy) else 1

    def evaluate():
        revs = evaluate_policy(policy, cfg, clients, catalog, episodes=ev_eps, traces=ev_traces, seed=seed)
        return float(np.mean(revs))

    def reset(env):
        o = env.reset(seed=int(env_rng.integers(2 ** 32)))
        if env.done:
            raise MechanismViolation("training environment has no decisions to make")
        return o

    curve = [_curve_row(0, 0, evaluate(), math.nan, {}, policy)]
    stats, recent = {}, []
    episodes = 0
    obs = np.array([reset(e) for e in envs])
    rewards = np.zeros(K)
    dones = np.zeros(K, dtype=bool)
    scale = ReturnScaler(policy.rew_rms, K, hp.gamma)
    step = 0
    next_eval = cfg.train.eval_every
    while step < total:
        obs_n = policy.prep_obs(obs, update=pcfg.normalize_obs)
        masks = np.array([e.client_mask for e in envs])
        clients_, raw, posted, logp, values = policy.sample_actions(obs_n, masks, pol_rng)
        for k, env in enumerate(envs):
            o, rewards[k], dones[k], _ = env.step(CompositeAction(int(clients_[k]), posted[k]))
            if dones[k]:
                recent.append(env.revenue)
                episodes += 1
                o = reset(env)
            obs[k] = o
        if pcfg.normalize_reward:
            r_n = scale(rewards, dones)
        else:
            r_n = rewards.copy()
        buf.add(obs_n, masks, clients_, raw, logp, r_n, values, dones)
        step += K
        if buf.full or step >= total:
            last_v = np.where(dones, 0.0, policy.value(policy.prep_obs(obs)))
            buf.finish(last_v, hp)
            lr = hp.lr * max(1.0 - (step - buf.n) / total, 0.0) if hp.lr_decay else hp.lr
            stats = ppo_update(policy, buf, hp, opts, upd_rng, lr)
        if step >= next_eval or step >= total:
            tr = float(np.mean(recent)) if recent else math.nan
            curve.append(_curve_row(step, episodes, evaluate(), tr, stats, policy))
            recent = []
            next_eval += cfg.train.eval_every
            if log:
                log(curve[-1])
    return TrainResult(policy, curve, method, seed, episodes)


def _curve_row(step, episodes, ev, tr, stats, policy):
    return dict(step=step, episodes=episodes, eval_revenue=ev, train_revenue=tr,
                policy_loss=stats.get("policy_loss", math.nan), value_loss=stats.get("value_loss", math.nan),
                entropy=stats.get("entropy", math.nan), mean_log_std=float(policy.log_std.mean()))


METRIC_FIELDS = ("trace", "episode", "length", "revenue", "oracle", "margin", "margin_per_step")
STEP_FIELDS = ("trace", "episode", "step", "interval", "client", "choice", "x", "utility", "payment")


def episode_metrics(act, cfg: ExperimentConfig, clients, catalog, traces=None, episodes=1,
                    full_state=False, exact=False):
    """Per-episode revenue against the Oracle, plus per-step records.

    SCOM runs ``episodes`` episodes on the static population.  DSCOM runs one
    episode per trace; trace ``n`` seeds its perturbation stream with ``n`` so
    the method and the Oracle face identical clients.
    """
    env = make_env(cfg, clients, catalog, full_state)
    oenv = make_env(cfg, clients, catalog)
    rows, steps = [], []
    if cfg.mode == "scom":
        oracle = oracle_episode(oenv, exact=exact).planned
        jobs = [(0, e, None) for e in range(episodes)]
    else:
        jobs = [(n, 0, tr) for n, tr in enumerate(traces)]
    for n, e, tr in jobs:
        log = run_episode(env, act, tr, seed=n)
        if tr is not None:
            oracle = oracle_episode(oenv, tr, seed=n, exact=exact).planned
        length = len(tr) if tr is not None else len(log.steps)
        margin = oracle - log.revenue
        rows.append(dict(trace=n, episode=e, length=length, revenue=log.revenue, oracle=oracle, margin=margin,
                         margin_per_step=margin / max(length, 1)))
        for k, info in enumerate(log.steps):
            steps.append(dict(trace=n, episode=e, step=k, interval=info.get("interval", 0),
                              client=info["client"], choice=-1 if info["choice"] is None else info["choice"],
                              x=info["x"], utility=info["utility"], payment=info["payment"]))
    return rows, steps


def summarize(rows) -> dict:
    keys = ("revenue", "oracle", "margin", "margin_per_step")
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}
