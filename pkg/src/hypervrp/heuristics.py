"""Classical CVRP baselines and the exact small-instance oracle.

Three solvers share the :class:`~hypervrp.routes.Solution` output type:

* :func:`nearest_neighbor` — greedy construction from the depot,
* :func:`clarke_wright` — parallel savings with end-point merges,
* :func:`exact_oracle` — provably optimal for ``n <= ORACLE_MAX_N``
  customers, by enumerating set partitions with per-block optimal
  orderings.

All candidate costs go through the same ``fsum``-based cost function
used everywhere else, so cross-method comparisons are never confounded
by summation order.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import TooLargeError
from .instances import Instance
from .routes import Solution, solution_cost, visits_from_routes

__all__ = [
    "nearest_neighbor",
    "clarke_wright",
    "exact_oracle",
    "ORACLE_MAX_N",
    "GapRow",
    "gap_table",
    "relative_gap",
]

ORACLE_MAX_N = 8


def _distance_matrix(inst: Instance) -> np.ndarray:
    coords = inst.coords()
    diff = coords[:, None, :] - coords[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def nearest_neighbor(inst: Instance) -> Solution:
    """Greedy construction: from the current position, repeatedly visit
    the nearest unvisited customer that fits the remaining capacity;
    return to the depot when none fits.  Distance ties break toward the
    lowest customer index."""
    dist = _distance_matrix(inst)
    unvisited = set(range(1, inst.n + 1))
    visits = [0]
    current = 0
    remaining = inst.capacity
    while unvisited:
        best = None
        best_d = math.inf
        for c in sorted(unvisited):
            if inst.demand_of(c) > remaining:
                continue
            d = dist[current, c]
            if d < best_d:
                best_d = d
                best = c
        if best is None:
            visits.append(0)
            current = 0
            remaining = inst.capacity
            continue
        visits.append(best)
        unvisited.remove(best)
        current = best
        remaining -= inst.demand_of(best)
    if visits[-1] != 0:
        visits.append(0)
    return Solution.from_visits(visits, inst)


def clarke_wright(inst: Instance) -> Solution:
    """Parallel savings: start from one out-and-back route per customer,
    then repeatedly merge route ends in descending savings order
    ``s(i,j) = d(0,i) + d(0,j) - d(i,j)`` while the merged demand fits.

    Only strictly positive savings are applied, so the result never
    exceeds the star solution's cost.  Ties break by ``(i, j)`` index
    order.
    """
    n = inst.n
    dist = _distance_matrix(inst)
    routes: dict[int, list[int]] = {c: [c] for c in range(1, n + 1)}
    loads: dict[int, int] = {c: inst.demand_of(c) for c in range(1, n + 1)}
    route_of = {c: c for c in range(1, n + 1)}  # customer -> route key

    savings = []
    for i in range(1, n + 1):
        for j in range(i + 1, n + 1):
            s = dist[0, i] + dist[0, j] - dist[i, j]
            if s > 0.0:
                savings.append((s, i, j))
    savings.sort(key=lambda t: (-t[0], t[1], t[2]))

    for _, i, j in savings:
        ri, rj = route_of[i], route_of[j]
        if ri == rj:
            continue
        route_i, route_j = routes[ri], routes[rj]
        # the merge joins i and j directly, so each must sit at an end
        # of its route; reverse as needed so i ends route_i and j starts
        # route_j
        if route_i[0] == i:
            route_i = route_i[::-1]
        elif route_i[-1] != i:
            continue
        if route_j[-1] == j:
            route_j = route_j[::-1]
        elif route_j[0] != j:
            continue
        if loads[ri] + loads[rj] > inst.capacity:
            continue
        merged = route_i + route_j
        routes[ri] = merged
        loads[ri] += loads[rj]
        del routes[rj], loads[rj]
        for c in merged:
            route_of[c] = ri
    ordered = [routes[k] for k in sorted(routes)]
    return Solution.from_visits(visits_from_routes(ordered), inst)


def _best_block_order(block: tuple[int, ...], dist: np.ndarray) -> tuple[float, tuple[int, ...]]:
    """Cheapest depot-to-depot ordering of one customer block, by full
    permutation enumeration; ties break toward the lexicographically
    smallest ordering."""
    best_cost = math.inf
    best_perm = block
    for perm in itertools.permutations(block):
        if perm[0] > perm[-1]:
            continue  # each tour equals its reverse; keep one orientation
        legs = [dist[0, perm[0]]]
        legs.extend(dist[a, b] for a, b in zip(perm[:-1], perm[1:]))
        legs.append(dist[perm[-1], 0])
        c = math.fsum(legs)
        if c < best_cost:
            best_cost = c
            best_perm = perm
    return best_cost, best_perm


def _partitions(items: tuple[int, ...]):
    """All set partitions of ``items``, generated deterministically:
    the first element anchors its block, the rest recurse."""
    if not items:
        yield []
        return
    head, rest = items[0], items[1:]
    for r in range(len(rest) + 1):
        for combo in itertools.combinations(rest, r):
            block = (head, *combo)
            remainder = tuple(x for x in rest if x not in combo)
            for sub in _partitions(remainder):
                yield [block, *sub]


def exact_oracle(inst: Instance) -> Solution:
    """Provably optimal solution for small instances.

    Enumerates every set partition of the customers into
    capacity-feasible blocks; each block is toured in its cheapest order
    (memoized permutation enumeration).  Every complete candidate is
    scored with the flat ``fsum`` cost of its full visit sequence — the
    same metric every other solver reports — and the cheapest one wins
    (first encountered on exact ties, which makes the result
    deterministic).

    Raises :class:`TooLargeError` above ``ORACLE_MAX_N`` customers.
    """
    if inst.n > ORACLE_MAX_N:
        raise TooLargeError(
            f"exact oracle supports n <= {ORACLE_MAX_N}, got n = {inst.n}")
    dist = _distance_matrix(inst)
    demands = inst.demands
    capacity = inst.capacity
    order_cache: dict[tuple[int, ...], tuple[float, tuple[int, ...]] | None] = {}

    def block_order(block: tuple[int, ...]):
        hit = order_cache.get(block)
        if hit is None and block not in order_cache:
            if sum(int(demands[c - 1]) for c in block) > capacity:
                hit = None
            else:
                hit = _best_block_order(block, dist)
            order_cache[block] = hit
        return order_cache[block]

    best_cost = math.inf
    best_routes: list[tuple[int, ...]] | None = None
    customers = tuple(range(1, inst.n + 1))
    for partition in _partitions(customers):
        ordered_blocks = []
        feasible = True
        for block in partition:
            entry = block_order(block)
            if entry is None:
                feasible = False
                break
            ordered_blocks.append(entry[1])
        if not feasible:
            continue
        visits = visits_from_routes([list(b) for b in ordered_blocks])
        cost = solution_cost(visits, inst)
        if cost < best_cost:
            best_cost = cost
            best_routes = ordered_blocks
    if best_routes is None:
        raise RuntimeError("no feasible partition found; unreachable for valid instances")
    return Solution.from_visits(
        visits_from_routes([list(b) for b in best_routes]), inst)


def relative_gap(cost: float, best_known: float) -> float:
    """``(cost - best_known) / best_known``; zero when both are zero."""
    if best_known == 0.0:
        return 0.0
    return (cost - best_known) / best_known


@dataclass(frozen=True)
class GapRow:
    """One (instance, method) evaluation outcome."""

    instance: str
    method: str
    cost: float
    gap: float          # relative to the best known cost across methods
    feasible: bool
    time_ms: float


def gap_table(inst: Instance, solutions: dict[str, Solution],
              times_ms: dict[str, float] | None = None,
              best_known: float | None = None) -> list[GapRow]:
    """Build per-method gap rows for one instance.

    ``best_known`` defaults to the cheapest feasible cost among the
    supplied solutions.
    """
    times_ms = times_ms or {}
    if best_known is None:
        feasible_costs = [s.cost for s in solutions.values() if s.feasible]
        if not feasible_costs:
            raise ValueError("no feasible solution to anchor the gap")
        best_known = min(feasible_costs)
    return [
        GapRow(instance=inst.name, method=name, cost=sol.cost,
               gap=relative_gap(sol.cost, best_known), feasible=sol.feasible,
               time_ms=float(times_ms.get(name, 0.0)))
        for name, sol in solutions.items()
    ]
