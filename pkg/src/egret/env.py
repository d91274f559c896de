"""Episodic posted-price environments.

``ScomEnv`` runs one pass of rounds over a static client set.  ``DscomEnv``
strings such passes together over time intervals: clients arrive in
batches, each interval's waiting set is served once, rented instances come
back after their occupancy ends, and unserved clients leave.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .market import (EPS_BUY, ClientProfile, MarketState, MechanismViolation, ResourceCatalog,
                     apply_round, best_response, check_invariants)


@dataclass(frozen=True)
class CompositeAction:
    client: int
    prices: tuple

    @classmethod
    def of(cls, client, prices) -> "CompositeAction":
        return cls(int(client), tuple(float(p) for p in prices))


def obs_dim(n_clients: int, n_instances: int, full_state: bool = False) -> int:
    if full_state:
        return n_clients + n_instances + 2 * n_clients * n_instances
    return n_clients + 3 * n_instances


def _observe(state: MarketState, row: Optional[int], full_state: bool) -> np.ndarray:
    parts = [state.rho_client, state.rho_res]
    if full_state:
        parts += [state.X.ravel(), state.Y.ravel()]
    elif row is None:
        m = state.X.shape[1]
        parts += [np.zeros(m), np.zeros(m)]
    else:
        parts += [state.X[row], state.Y[row]]
    return np.concatenate(parts).astype(np.float64)


class ScomEnv:
    """Single sequential-offloading episode over a fixed client population."""

    def __init__(self, clients: Sequence[ClientProfile], catalog: ResourceCatalog,
                 full_state: bool = False, eps_buy: float = EPS_BUY):
        self.clients = list(clients)
        self.catalog = catalog
        self.full_state = full_state
        self.eps_buy = eps_buy
        self.n_clients = len(self.clients)
        self.n_instances = len(catalog)
        self.obs_dim = obs_dim(self.n_clients, self.n_instances, full_state)
        self.state = None
        self.revenue = 0.0

    @property
    def client_mask(self) -> np.ndarray:
        return self.state.rho_client.astype(bool)

    @property
    def done(self) -> bool:
        return self.state.done

    def reset(self, seed=None) -> np.ndarray:
        # no stochastic elements; seed accepted for interface symmetry
        self.state = MarketState.initial(self.n_clients, self.n_instances,
                                         rho_res=np.asarray(self.catalog.available, dtype=np.int8))
        self.revenue = 0.0
        return _observe(self.state, None, self.full_state)

    def post(self, prices) -> list:
        return [float(p) if r else math.inf for p, r in zip(prices, self.state.rho_res)]

    def step(self, action: CompositeAction):
        if self.state.done:
            raise MechanismViolation("episode already terminated")
        i = action.client
        if not 0 <= i < self.n_clients or not self.state.rho_client[i]:
            raise MechanismViolation(f"client {i} is not waiting")
        posted = self.post(action.prices)
        resp = best_response(self.clients[i], posted, self.catalog, self.eps_buy)
        self.state, pay = apply_round(self.state, i, posted, resp, inplace=True)
        self.revenue += pay
        done = self.state.done
        if done:
            check_invariants(self.state)
            if not math.isclose(self.revenue, self.state.revenue, rel_tol=1e-12, abs_tol=1e-12):
                raise MechanismViolation("episode revenue differs from recorded payments")
        info = dict(client=i, choice=resp.choice, x=resp.x, utility=resp.utility, payment=pay)
        return _observe(self.state, i, self.full_state), pay, done, info


@dataclass
class ArrivalTrace:
    intervals: list
    interval_duration: float = 3.0

    def __post_init__(self):
        self.intervals = [tuple(sorted(int(t) for t in iv)) for iv in self.intervals]
        for iv in self.intervals:
            if len(set(iv)) != len(iv):
                raise ValueError("interval admits the same client type twice")

    def __len__(self):
        return len(self.intervals)


def dump_traces(traces: Sequence[ArrivalTrace]) -> str:
    out = []
    for n, tr in enumerate(traces):
        out.append(f"# trace {n} duration={tr.interval_duration!r}")
        for k, iv in enumerate(tr.intervals):
            out.append(f"{k}: " + ",".join(str(t) for t in iv))
    return "\n".join(out) + "\n"


def load_traces(text: str) -> list:
    traces, cur, dur = [], None, 3.0
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if cur is not None:
                traces.append(ArrivalTrace(cur, dur))
            cur = []
            dur = float(line.split("duration=")[1]) if "duration=" in line else 3.0
            continue
        if cur is None:
            cur = []
        idx, _, rest = line.partition(":")
        if int(idx) != len(cur):
            raise ValueError(f"interval index {idx} out of sequence")
        rest = rest.strip()
        cur.append(tuple(int(t) for t in rest.split(",")) if rest else ())
    if cur is not None:
        traces.append(ArrivalTrace(cur, dur))
    return traces


def truncated_poisson_pmf(lam: float, n_max: int) -> np.ndarray:
    k = np.arange(n_max + 1)
    logp = k * math.log(lam) - lam - np.array([math.lgamma(i + 1) for i in k])
    p = np.exp(logp)
    return p / p.sum()


def gen_traces(n_traces: int, length: int, n_types: int, mode: str = "uniform",
               n_max: Optional[int] = None, lam: float = 2.0, seed=0,
               interval_duration: float = 3.0) -> list:
    """Random arrival traces; each interval admits distinct client types.

    ``uniform`` draws the batch size uniformly from ``0..n_max``; ``poisson``
    draws it from a Poisson(lam) law conditioned on not exceeding ``n_types``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_max = n_types if n_max is None else min(n_max, n_types)
    if mode == "poisson" and not lam > 0:
        raise ValueError("poisson arrivals need lam > 0")
    traces = []
    for _ in range(n_traces):
        ivs = []
        for _ in range(length):
            if mode == "uniform":
                k = int(rng.integers(0, n_max + 1))
            elif mode == "poisson":
                k = int(rng.poisson(lam))
                while k > n_types:
                    k = int(rng.poisson(lam))
            else:
                raise ValueError(f"unknown arrival mode {mode!r}")
            ivs.append(tuple(rng.choice(n_types, size=k, replace=False).tolist()))
        traces.append(ArrivalTrace(ivs, interval_duration))
    return traces


def _positive_normal(rng, mean, sd):
    for _ in range(1000):
        v = float(rng.normal(mean, sd)) if sd > 0 else float(mean)
        if v > 0:
            return v
    raise ValueError(f"cannot draw a positive value from N({mean}, {sd})")


def perturb_profile(profile: ClientProfile, mode: str, rng, low=2.0, high=5.0, sd=0.5,
                    mu_bd=40.0, bd_sd=5.0, bd_scale=100.0) -> ClientProfile:
    if mode == "data":
        return replace(profile, d=_positive_normal(rng, float(rng.uniform(low, high)) if high > low else low, sd))
    if mode == "bandwidth":
        return replace(profile, b=_positive_normal(rng, mu_bd, bd_sd) / bd_scale)
    raise ValueError(f"unknown perturbation {mode!r}")


def perturb_clients(clients: Sequence[ClientProfile], mode: str, params: Optional[dict] = None, seed=0) -> list:
    """Resample each client's data size or bandwidth from the perturbation laws."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [perturb_profile(c, mode, rng, **(params or {})) for c in clients]


class DscomEnv:
    """Dynamic offloading over a trace of arrival intervals with instance recycling."""

    def __init__(self, clients: Sequence[ClientProfile], catalog: ResourceCatalog,
                 trace_source: Optional[Callable] = None, full_state: bool = False,
                 perturb: Optional[dict] = None, eps_buy: float = EPS_BUY):
        self.types = list(clients)
        self.catalog = catalog
        self.trace_source = trace_source
        self.full_state = full_state
        self.perturb = perturb
        self.eps_buy = eps_buy
        self.n_clients = len(self.types)
        self.n_instances = len(catalog)
        self.obs_dim = obs_dim(self.n_clients, self.n_instances, full_state)
        self.state = None
        self._done = True

    @property
    def client_mask(self) -> np.ndarray:
        return self.state.rho_client.astype(bool)

    @property
    def done(self) -> bool:
        return self._done

    @property
    def now(self) -> float:
        return self.k * self.trace.interval_duration

    def reset(self, trace: Optional[ArrivalTrace] = None, seed=None) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        if trace is None:
            if self.trace_source is None:
                raise ValueError("no trace given and no trace source configured")
            trace = self.trace_source()
        if len(trace) == 0:
            raise ValueError("empty arrival trace")
        self.trace = trace
        self.busy = np.zeros(self.n_instances, dtype=bool)
        self.completion = np.zeros(self.n_instances)
        self.windows = [[] for _ in range(self.n_instances)]
        self.revenue = 0.0
        self.interval_revenue = []
        self.k = -1
        self._done = False
        self._advance()
        return _observe(self.state, None, self.full_state)

    def _admit(self, k):
        waiting = np.zeros(self.n_clients, dtype=np.int8)
        profiles = {}
        for t in self.trace.intervals[k]:
            waiting[t] = 1
            pf = self.types[t]
            if self.perturb:
                params = {a: v for a, v in self.perturb.items() if a != "mode"}
                pf = perturb_profile(pf, self.perturb["mode"], self.rng, **params)
            profiles[t] = pf
        return waiting, profiles

    def _close_interval(self):
        if self.state is not None and self.k >= 0:
            check_invariants(self.state)
            self.interval_revenue.append(self.state.revenue)

    def _advance(self):
        """Move to the next interval that needs a decision, or finish the episode."""
        while True:
            self._close_interval()
            self.k += 1
            if self.k >= len(self.trace):
                self._done = True
                total = float(sum(self.interval_revenue))
                if not math.isclose(total, self.revenue, rel_tol=1e-12, abs_tol=1e-12):
                    raise MechanismViolation("episode revenue differs from recorded payments")
                return
            freed = self.busy & (self.completion <= self.now)
            self.busy &= ~freed
            waiting, self.profiles = self._admit(self.k)
            self.state = MarketState.initial(self.n_clients, self.n_instances, rho_client=waiting,
                                             rho_res=(~self.busy & np.asarray(self.catalog.available)).astype(np.int8))
            if not self.state.done:
                return

    def post(self, prices) -> list:
        return [float(p) if r else math.inf for p, r in zip(prices, self.state.rho_res)]

    def step(self, action: CompositeAction):
        if self._done:
            raise MechanismViolation("episode already terminated")
        i = action.client
        if not 0 <= i < self.n_clients or not self.state.rho_client[i]:
            raise MechanismViolation(f"client {i} is not waiting")
        posted = self.post(action.prices)
        pf = self.profiles[i]
        resp = best_response(pf, posted, self.catalog, self.eps_buy)
        self.state, pay = apply_round(self.state, i, posted, resp, inplace=True)
        j = resp.choice
        if j is not None:
            if self.busy[j]:
                raise MechanismViolation(f"instance {j} rented while occupied")
            end = self.now + resp.x / pf.b + resp.x / self.catalog.capacities[j]
            if self.windows[j] and self.windows[j][-1][1] > self.now:
                raise MechanismViolation(f"overlapping occupancy on instance {j}")
            self.windows[j].append((self.now, end))
            self.busy[j] = True
            self.completion[j] = end
        self.revenue += pay
        info = dict(client=i, choice=j, x=resp.x, utility=resp.utility, payment=pay, interval=self.k)
        obs = _observe(self.state, i, self.full_state)
        if self.state.done:
            self._advance()
            if not self._done:
                obs = _observe(self.state, None, self.full_state)
        return obs, pay, self._done, info
