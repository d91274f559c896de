"""Full-information pricing benchmark.

With every client's parameters known, the seller can compute for each
(client, instance) pair the highest unit price the client still accepts,
the rent that price extracts, and then pick a visiting order.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .market import (ClientProfile, ResourceCatalog, UNAVAILABLE_PRICE, best_response,
                     breakpoint, payment)

DELTA_POST = 1e-6
EXACT_MAX_SIDE = 10


@dataclass(frozen=True)
class MaxPrice:
    p_star: float
    x: float
    p_a: float
    p_b: float
    sellable: bool = True
    priceable: bool = True

    @property
    def payment_per_capacity(self) -> float:
        return self.p_star * self.x


@dataclass
class PricePlan:
    trace: list
    instances: list
    prices: list            # posted price vector per visit
    payments: list          # planned payment per visit, at the undiscounted p*
    expected_revenue: float = field(init=False)

    def __post_init__(self):
        if len(set(self.trace)) != len(self.trace):
            raise ValueError("visiting trace repeats a client")
        self.expected_revenue = float(sum(self.payments))

    def rows(self):
        for k, (i, j, pv, pay) in enumerate(zip(self.trace, self.instances, self.prices, self.payments)):
            yield k, i, j, pv[j], pay


def indifference_prices(profile: ClientProfile, F: float) -> tuple[float, float]:
    """Prices making the breakpoint offload (p_a) or full offload (p_b) exactly as good as staying local."""
    pf = profile
    am = pf.alpha * pf.mu * pf.f ** 2
    p_a = (F / pf.gamma) * (am - pf.alpha * pf.nu / pf.b + pf.beta / pf.f)
    p_b = (F / pf.gamma) * (pf.beta / pf.f + am - (pf.alpha * pf.nu + pf.beta) / pf.b) - pf.beta / pf.gamma
    return p_a, p_b


def max_price(profile: ClientProfile, F: float) -> MaxPrice:
    """Largest unit price for capacity ``F`` that ``profile`` would still pay.

    Returns the price together with the amount the client offloads just
    below it.  A client that ignores rent (gamma = 0) has no such price and
    is reported as unpriceable.
    """
    if F <= 0:
        raise ValueError("capacity must be positive")
    if profile.gamma == 0:
        return MaxPrice(math.inf, profile.d, math.inf, math.inf, sellable=True, priceable=False)
    p_a, p_b = indifference_prices(profile, F)
    if p_a <= 0 and p_b <= 0:
        return MaxPrice(0.0, 0.0, p_a, p_b, sellable=False)
    if p_b >= p_a:
        return MaxPrice(p_b, profile.d, p_a, p_b)
    return MaxPrice(p_a, breakpoint(profile, F), p_a, p_b)


def max_revenue_price(profile: ClientProfile, F: float, grid: int = 20001) -> tuple[float, float]:
    """Unit price maximising the rent a lone client pays for capacity ``F``.

    Unlike :func:`max_price` this accounts for the offload amount shrinking as
    the price rises.  Returns ``(price, payment)``; the candidate set is the
    analytic kinks plus a uniform grid up to the indifference price.
    """
    cat = ResourceCatalog((F,))
    mp = max_price(profile, F)
    if not mp.sellable or not mp.priceable:
        return 0.0, 0.0
    pf = profile
    # below p_c the full-offload segment slopes downward, so the client sends everything
    p_c = (F / pf.gamma) * (pf.alpha * pf.mu * pf.f ** 2 - (pf.alpha * pf.nu + pf.beta) / pf.b) - pf.beta / pf.gamma
    cands = [p - DELTA_POST for p in (mp.p_a, mp.p_b, p_c) if p - DELTA_POST > 0]
    cands.extend(np.linspace(0.0, mp.p_star, grid)[1:-1])
    best = (0.0, 0.0)
    for p in cands:
        r = best_response(profile, [p], cat)
        if r.payment > best[1]:
            best = (float(p), r.payment)
    return best


def payment_matrix(clients: Sequence[ClientProfile], catalog: ResourceCatalog):
    """Maximum extractable rent ``tau[i, j]`` and the matching prices ``P[i, j]``."""
    n, m = len(clients), len(catalog)
    tau = np.zeros((n, m))
    P = np.zeros((n, m))
    for i, c in enumerate(clients):
        for j, F in enumerate(catalog.capacities):
            mp = max_price(c, F)
            if not mp.priceable:
                raise ValueError(f"client {i} does not weigh rent; no finite price exists")
            P[i, j] = mp.p_star
            tau[i, j] = payment(mp.p_star, mp.x, F)
    return tau, P


def _posted(P: np.ndarray, row: int, col: int, free: np.ndarray, delta: float) -> list:
    pv = [float(P[row, k]) if free[k] else math.inf for k in range(P.shape[1])]
    pv[col] = max(float(P[row, col]) - delta, 0.0)
    return pv


def greedy_plan(tau: np.ndarray, P: Optional[np.ndarray] = None, delta: float = DELTA_POST) -> PricePlan:
    """Visit clients in order of the largest remaining extractable rent.

    Ties resolve to the lowest row, then the lowest column.  Stops once no
    positive rent is left or ``min(N, M)`` visits are planned.
    """
    tau = np.asarray(tau, dtype=float)
    P = tau if P is None else np.asarray(P, dtype=float)
    n, m = tau.shape
    work = tau.copy()
    free = np.ones(m, dtype=bool)
    live = np.ones((n, m), dtype=bool)
    trace, cols, prices, pays = [], [], [], []
    for _ in range(min(n, m)):
        masked = np.where(live, work, -np.inf)
        flat = int(np.argmax(masked))       # first occurrence: row-major tie-break
        row, col = divmod(flat, m)
        if not masked[row, col] > 0:
            break
        trace.append(row)
        cols.append(col)
        prices.append(_posted(P, row, col, free, delta))
        pays.append(float(tau[row, col]))
        live[row, :] = False
        live[:, col] = False
        free[col] = False
    return PricePlan(trace, cols, prices, pays)


def exact_plan(tau: np.ndarray, P: Optional[np.ndarray] = None, delta: float = DELTA_POST) -> PricePlan:
    """Revenue-maximising one-to-one assignment of clients to instances."""
    tau = np.asarray(tau, dtype=float)
    P = tau if P is None else np.asarray(P, dtype=float)
    n, m = tau.shape
    if min(n, m) > EXACT_MAX_SIDE:
        raise ValueError(f"exact assignment limited to min(N, M) <= {EXACT_MAX_SIDE}; use greedy_plan")
    rows, cols = linear_sum_assignment(tau, maximize=True)
    pairs = [(float(tau[r, c]), int(r), int(c)) for r, c in zip(rows, cols) if tau[r, c] > 0]
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    free = np.ones(m, dtype=bool)
    trace, inst, prices, pays = [], [], [], []
    for v, r, c in pairs:
        trace.append(r)
        inst.append(c)
        prices.append(_posted(P, r, c, free, delta))
        pays.append(v)
        free[c] = False
    return PricePlan(trace, inst, prices, pays)


def brute_force_revenue(tau: np.ndarray) -> float:
    """Best assignment revenue by enumerating injections of the smaller side."""
    tau = np.asarray(tau, dtype=float)
    if tau.shape[0] > tau.shape[1]:
        tau = tau.T
    n, m = tau.shape
    best = 0.0
    for cols in itertools.permutations(range(m), n):
        best = max(best, sum(max(tau[i, c], 0.0) for i, c in enumerate(cols)))
    return best


def plan_for(clients: Sequence[ClientProfile], catalog: ResourceCatalog, exact: bool = False) -> PricePlan:
    tau, P = payment_matrix(clients, catalog)
    avail = np.asarray(catalog.available, dtype=bool)
    tau = np.where(avail[None, :], tau, 0.0)
    plan = exact_plan(tau, P) if exact else greedy_plan(tau, P)
    for pv in plan.prices:
        for k in np.flatnonzero(~avail):
            pv[k] = math.inf
    return plan


def plan_csv_rows(plan: PricePlan, label: str = "greedy"):
    for k, i, j, price, pay in plan.rows():
        yield [label, k, i, j, repr(float(price)), repr(float(pay))]


__all__ = ["MaxPrice", "PricePlan", "max_price", "max_revenue_price", "indifference_prices",
           "payment_matrix", "greedy_plan", "exact_plan", "brute_force_revenue", "plan_for",
           "UNAVAILABLE_PRICE", "DELTA_POST"]
