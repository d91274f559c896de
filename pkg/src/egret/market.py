"""Client-side economics of sequential posted-price offloading.

A client holding ``d`` Mb of work splits it between local execution and a
rented edge instance.  Its cost (lower is better) mixes energy, completion
latency and the rent it pays::

    U = alpha * e + beta * t + gamma * tau

with ``t = max(local latency, offload latency)``.  For a fixed instance U is
piecewise linear in the offloaded amount ``x`` with a single kink where the
two latencies meet, so the client's optimum is always one of
``{0, breakpoint, d}``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

EPS_BUY = 1e-9
# serialized stand-in for the "instance not on offer" price
UNAVAILABLE_PRICE = 1e30


class MechanismViolation(RuntimeError):
    """Raised when an allocation breaks the one-client-one-instance rules."""


@dataclass(frozen=True)
class ClientProfile:
    d: float
    f: float
    b: float
    mu: float = 1e-2
    nu: float = 1e-3
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not (self.d > 0 and self.f > 0 and self.b > 0):
            raise ValueError(f"d, f, b must be positive: {self}")
        if min(self.mu, self.nu, self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"mu, nu and utility weights must be non-negative: {self}")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ValueError("at least one utility weight must be positive")

    @property
    def u_ini(self) -> float:
        """Utility of computing everything locally."""
        return self.alpha * self.mu * self.d * self.f ** 2 + self.beta * self.d / self.f

    def to_dict(self) -> dict:
        return dict(d=self.d, f=self.f, b=self.b, mu=self.mu, nu=self.nu,
                    alpha=self.alpha, beta=self.beta, gamma=self.gamma)


@dataclass(frozen=True)
class ResourceCatalog:
    capacities: tuple
    available: tuple = None

    def __post_init__(self):
        caps = tuple(float(c) for c in self.capacities)
        if any(c <= 0 for c in caps):
            raise ValueError("capacities must be positive")
        if any(b <= a for a, b in zip(caps, caps[1:])):
            raise ValueError("capacities must be strictly increasing")
        avail = self.available
        avail = (True,) * len(caps) if avail is None else tuple(bool(a) for a in avail)
        if len(avail) != len(caps):
            raise ValueError("availability flags must match capacities")
        object.__setattr__(self, "capacities", caps)
        object.__setattr__(self, "available", avail)

    def __len__(self):
        return len(self.capacities)

    def with_available(self, available: Sequence[bool]) -> "ResourceCatalog":
        return replace(self, available=tuple(bool(a) for a in available))


@dataclass(frozen=True)
class BestResponse:
    choice: Optional[int]
    x: float
    utility: float
    payment: float


def _u(pf: ClientProfile, p: float, x: float, F: float) -> float:
    energy = pf.mu * (pf.d - x) * pf.f ** 2 + pf.nu * x / pf.b
    latency = max((pf.d - x) / pf.f, x / pf.b + x / F)
    return pf.alpha * energy + pf.beta * latency + pf.gamma * p * x / F


def utility(profile: ClientProfile, p: float, x: float, F: float) -> float:
    """Client utility when offloading ``x`` Mb to an instance of capacity ``F`` at unit price ``p``."""
    if not 0.0 <= x <= profile.d:
        raise ValueError(f"offloaded data {x} outside [0, {profile.d}]")
    if p < 0 or F <= 0:
        raise ValueError("price must be non-negative and capacity positive")
    return _u(profile, p, x, F)


def breakpoint(profile: ClientProfile, F: float) -> float:
    """Offload amount at which local and remote latencies coincide."""
    d, f, b = profile.d, profile.f, profile.b
    return d * b * F / (b * F + f * F + f * b)


def payment(p: float, x: float, F: float) -> float:
    """Rent for occupying capacity ``F`` long enough to process ``x`` Mb."""
    return p * x / F


def best_response(profile: ClientProfile, prices: Sequence[float], catalog: ResourceCatalog,
                  eps_buy: float = EPS_BUY) -> BestResponse:
    """Utility-minimising purchase of ``profile`` facing posted ``prices``.

    Only available instances with a finite price are considered.  A purchase
    happens only if it beats local execution by more than ``eps_buy``; ties
    among purchases go to the larger offload, then the lower instance index.
    """
    if len(prices) != len(catalog):
        raise ValueError(f"expected {len(catalog)} prices, got {len(prices)}")
    d, f, b = profile.d, profile.f, profile.b
    al, be, ga = profile.alpha, profile.beta, profile.gamma
    base = al * profile.mu * d * f * f
    slope = -al * profile.mu * f * f + al * profile.nu / b
    u_ini = base + be * d / f
    cands = []
    for j, F in enumerate(catalog.capacities):
        p = float(prices[j])
        if not catalog.available[j] or not p < UNAVAILABLE_PRICE:
            continue
        if p < 0:
            raise ValueError(f"negative price {p} for instance {j}")
        xm = d * b * F / (b * F + f * F + f * b)
        k = slope + ga * p / F
        cands.append((base + xm * k + be * (d - xm) / f, xm, j, p))
        cands.append((base + d * k + be * (d / b + d / F), d, j, p))
    if not cands:
        return BestResponse(None, 0.0, u_ini, 0.0)
    best = min(c[0] for c in cands)
    if best >= u_ini - eps_buy:
        return BestResponse(None, 0.0, u_ini, 0.0)
    u, x, j, p = min((c for c in cands if c[0] <= best + eps_buy), key=lambda c: (-c[1], c[2]))
    return BestResponse(j, x, u, payment(p, x, catalog.capacities[j]))


@dataclass
class MarketState:
    rho_client: np.ndarray
    rho_res: np.ndarray
    X: np.ndarray
    Y: np.ndarray

    @classmethod
    def initial(cls, n_clients: int, n_instances: int, rho_client=None, rho_res=None) -> "MarketState":
        rc = np.ones(n_clients, dtype=np.int8) if rho_client is None else np.asarray(rho_client, dtype=np.int8).copy()
        rr = np.ones(n_instances, dtype=np.int8) if rho_res is None else np.asarray(rho_res, dtype=np.int8).copy()
        return cls(rc, rr, np.zeros((n_clients, n_instances), dtype=np.int8),
                   np.zeros((n_clients, n_instances)))

    def copy(self) -> "MarketState":
        return MarketState(self.rho_client.copy(), self.rho_res.copy(), self.X.copy(), self.Y.copy())

    @property
    def done(self) -> bool:
        return not self.rho_client.any() or not self.rho_res.any()

    @property
    def revenue(self) -> float:
        return float(self.Y.sum())


def check_invariants(state: MarketState) -> None:
    X, Y = state.X, state.Y
    if (X.sum(axis=1) > 1).any():
        raise MechanismViolation("a client holds more than one instance")
    if (X.sum(axis=0) > 1).any():
        raise MechanismViolation("an instance is rented to more than one client")
    if ((Y != 0) & (X == 0)).any() or (Y < 0).any():
        raise MechanismViolation("payment recorded without allocation")
    if (state.rho_res[X.any(axis=0)] != 0).any():
        raise MechanismViolation("rented instance still marked free")


def apply_round(state: MarketState, client: int, prices: Sequence[float], response: BestResponse,
                inplace: bool = False) -> tuple[MarketState, float]:
    """Record one posted-price round; returns the new state and the payment collected.

    The allocation constraints are asserted incrementally: the chosen
    instance must be free and untouched, and the client must hold nothing.
    """
    if not state.rho_client[client]:
        raise MechanismViolation(f"client {client} was already visited")
    s = state if inplace else state.copy()
    s.rho_client[client] = 0
    pay = 0.0
    j = response.choice
    if j is not None:
        if not s.rho_res[j] or not prices[j] < UNAVAILABLE_PRICE:
            raise MechanismViolation(f"instance {j} is not on offer")
        if s.X[client].any() or s.X[:, j].any():
            raise MechanismViolation(f"allocation ({client}, {j}) breaks one-to-one renting")
        if response.payment < 0:
            raise MechanismViolation("negative payment")
        s.X[client, j] = 1
        s.Y[client, j] = response.payment
        s.rho_res[j] = 0
        pay = response.payment
    return s, pay
