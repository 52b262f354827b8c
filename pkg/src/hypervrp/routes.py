"""Solutions, route bookkeeping, costs, and feasibility checks.

A solution is a flat visit sequence over node indices (0 = depot,
``1..n`` = customers) that starts and ends at the depot.  Depot visits
split the sequence into routes.  Costs are Euclidean tour lengths summed
with ``math.fsum`` (correctly rounded), which makes the total cost
exactly invariant under reversing any route and under permuting route
order — properties the tests assert with strict equality.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedSolutionError
from .instances import Instance

__all__ = [
    "Solution",
    "ValidationReport",
    "routes_from_visits",
    "visits_from_routes",
    "solution_cost",
    "reward",
    "validate_solution",
    "format_solution",
    "parse_solution",
]


def routes_from_visits(visits: list[int] | tuple[int, ...], n: int) -> list[list[int]]:
    """Split a depot-delimited visit sequence into routes of customers.

    ``visits`` must start and end at the depot; consecutive depot visits
    (an empty route) are malformed, as are node indices outside
    ``0..n``.  Raises :class:`MalformedSolutionError`.
    """
    visits = list(visits)
    if len(visits) < 3:
        raise MalformedSolutionError(
            f"a solution needs at least depot-customer-depot, got {visits}")
    if visits[0] != 0 or visits[-1] != 0:
        raise MalformedSolutionError(
            f"visit sequence must start and end at the depot, got {visits[0]}..{visits[-1]}")
    routes: list[list[int]] = []
    current: list[int] = []
    for pos, v in enumerate(visits):
        if not 0 <= v <= n:
            raise MalformedSolutionError(
                f"node index {v} out of range 0..{n} at position {pos}")
        if v == 0:
            if pos == 0:
                continue
            if not current:
                raise MalformedSolutionError(
                    f"consecutive depot visits at position {pos} (empty route)")
            routes.append(current)
            current = []
        else:
            current.append(v)
    if current:
        raise MalformedSolutionError("visit sequence does not end at the depot")
    return routes


def visits_from_routes(routes: list[list[int]]) -> list[int]:
    """Inverse of :func:`routes_from_visits`: flatten routes into a
    depot-delimited visit sequence."""
    visits = [0]
    for route in routes:
        if not route:
            raise MalformedSolutionError("empty route")
        visits.extend(route)
        visits.append(0)
    return visits


def solution_cost(visits: list[int] | tuple[int, ...], inst: Instance) -> float:
    """Total Euclidean length of the visit sequence.

    Per-leg distances come from ``math.hypot``; the total is a
    ``math.fsum``, so the result does not depend on leg order.
    """
    coords = inst.coords()
    legs = []
    for a, b in zip(visits[:-1], visits[1:]):
        if not 0 <= a <= inst.n or not 0 <= b <= inst.n:
            raise ValueError(f"node index out of range 0..{inst.n} in {a}->{b}")
        dx = coords[a, 0] - coords[b, 0]
        dy = coords[a, 1] - coords[b, 1]
        legs.append(math.hypot(dx, dy))
    return math.fsum(legs)


def reward(visits: list[int] | tuple[int, ...], inst: Instance) -> float:
    """Negated solution cost (the return maximized by the policy)."""
    return -solution_cost(visits, inst)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of checking a solution against its instance."""

    each_customer_once: bool
    capacity_respected: bool
    violations: tuple[tuple[int, str], ...]  # (route index, description)
    route_count: int

    @property
    def feasible(self) -> bool:
        return (self.each_customer_once and self.capacity_respected
                and not self.violations)


def validate_solution(routes: list[list[int]], inst: Instance) -> ValidationReport:
    """Check that the routes cover each customer exactly once and that no
    route's demand exceeds the capacity.  Violations are reported as
    data, not raised."""
    violations: list[tuple[int, str]] = []
    counts = np.zeros(inst.n + 1, dtype=np.int64)
    for r_idx, route in enumerate(routes):
        if not route:
            violations.append((r_idx, "empty route"))
            continue
        load = 0
        for v in route:
            if not 1 <= v <= inst.n:
                violations.append((r_idx, f"node index {v} out of range 1..{inst.n}"))
                continue
            counts[v] += 1
            load += inst.demand_of(v)
        if load > inst.capacity:
            violations.append(
                (r_idx, f"route demand {load} exceeds capacity {inst.capacity}"))
    missing = [int(c) for c in np.flatnonzero(counts[1:] == 0) + 1]
    repeated = [int(c) for c in np.flatnonzero(counts[1:] > 1) + 1]
    each_once = not missing and not repeated
    if missing:
        violations.append((-1, f"customers never visited: {missing}"))
    if repeated:
        violations.append((-1, f"customers visited more than once: {repeated}"))
    capacity_ok = not any("exceeds capacity" in msg for _, msg in violations)
    return ValidationReport(
        each_customer_once=each_once,
        capacity_respected=capacity_ok,
        violations=tuple(violations),
        route_count=len(routes),
    )


@dataclass(frozen=True)
class Solution:
    """A complete solution: visit sequence, derived routes, cost, and
    feasibility verdict for a fixed instance."""

    visits: tuple[int, ...]
    routes: tuple[tuple[int, ...], ...]
    cost: float
    feasible: bool
    report: ValidationReport = field(repr=False)

    @classmethod
    def from_visits(cls, visits: list[int] | tuple[int, ...], inst: Instance) -> "Solution":
        routes = routes_from_visits(visits, inst.n)
        report = validate_solution(routes, inst)
        return cls(
            visits=tuple(visits),
            routes=tuple(tuple(r) for r in routes),
            cost=solution_cost(visits, inst),
            feasible=report.feasible,
            report=report,
        )

    @classmethod
    def from_routes(cls, routes: list[list[int]], inst: Instance) -> "Solution":
        return cls.from_visits(visits_from_routes(routes), inst)


def format_solution(sol: Solution) -> str:
    """Serialize a solution: one line per route of space-separated
    1-based customer ids, then a ``# cost`` trailer line."""
    lines = [" ".join(str(v + 1) for v in route) for route in sol.routes]
    lines.append(f"# cost {sol.cost!r}")
    return "\n".join(lines) + "\n"


def parse_solution(text: str, inst: Instance) -> Solution:
    """Parse the :func:`format_solution` format back into a
    :class:`Solution` for ``inst``.  The recomputed cost is authoritative;
    the trailer is checked for agreement to 1e-9 when present."""
    routes: list[list[int]] = []
    stated_cost: float | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "cost":
                try:
                    stated_cost = float(parts[1])
                except ValueError:
                    raise MalformedSolutionError(
                        f"line {lineno}: bad cost trailer {line!r}") from None
            continue
        try:
            route = [int(tok) - 1 for tok in line.split()]
        except ValueError:
            raise MalformedSolutionError(
                f"line {lineno}: non-integer customer id in {line!r}") from None
        routes.append(route)
    if not routes:
        raise MalformedSolutionError("no routes found")
    for route in routes:
        for v in route:
            if not 1 <= v <= inst.n:
                raise MalformedSolutionError(
                    f"customer id {v + 1} out of range 2..{inst.n + 1}")
    sol = Solution.from_routes(routes, inst)
    if stated_cost is not None and abs(stated_cost - sol.cost) > 1e-9:
        raise MalformedSolutionError(
            f"stated cost {stated_cost} disagrees with recomputed {sol.cost}")
    return sol
