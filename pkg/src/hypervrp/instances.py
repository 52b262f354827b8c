"""CVRP instance handling: generation, file I/O, and feature construction.

An instance is a depot plus ``n`` customers on the plane with integer
demands and a shared vehicle capacity.  This module owns

* the :class:`Instance` value type,
* random instance generation (uniform coordinates on the unit square,
  uniform integer demands in ``{1..9}``),
* a line-oriented parser/writer for the TSPLIB-style CVRP format
  (``NODE_COORD_SECTION`` / ``DEMAND_SECTION`` / ``DEPOT_SECTION``), and
* the feature augmentation fed to the encoder: each node contributes its
  coordinates, their unit-square complement, and depot-centered polar
  coordinates; customers additionally carry normalized demand.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ParseError

__all__ = [
    "Instance",
    "AugmentedFeatures",
    "generate_instance",
    "polar_transform",
    "augment_features",
    "parse_instance_file",
    "write_instance_file",
    "atomic_write_text",
]


def atomic_write_text(path: str, text: str) -> None:
    """Write ``text`` to ``path`` atomically (temp file + rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


@dataclass(frozen=True, eq=False)
class Instance:
    """A single CVRP instance.

    Customers are indexed ``1..n`` throughout the package; index ``0`` is
    the depot.  ``demands[i]`` is the demand of customer ``i+1``.  Arrays
    are marked read-only on construction.
    """

    name: str
    depot: np.ndarray          # shape (2,), float64
    customers: np.ndarray      # shape (n, 2), float64
    demands: np.ndarray        # shape (n,), int64
    capacity: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        depot = np.asarray(self.depot, dtype=np.float64).reshape(2)
        customers = np.asarray(self.customers, dtype=np.float64)
        demands = np.asarray(self.demands, dtype=np.int64)
        if customers.ndim != 2 or customers.shape[1] != 2:
            raise ValueError(f"customers must be (n, 2), got {customers.shape}")
        if customers.shape[0] == 0:
            raise ValueError("instance must have at least one customer")
        if demands.shape != (customers.shape[0],):
            raise ValueError(
                f"demands shape {demands.shape} does not match "
                f"{customers.shape[0]} customers"
            )
        if int(self.capacity) < 1:
            raise ValueError(f"capacity must be positive, got {self.capacity}")
        if np.any(demands < 1):
            raise ValueError("all demands must be >= 1")
        if np.any(demands > self.capacity):
            raise ValueError(
                "every demand must fit the vehicle capacity "
                f"(max demand {int(demands.max())} > capacity {self.capacity})"
            )
        for arr, attr in ((depot, "depot"), (customers, "customers"), (demands, "demands")):
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        object.__setattr__(self, "capacity", int(self.capacity))

    @property
    def n(self) -> int:
        """Number of customers (excluding the depot)."""
        return self.customers.shape[0]

    def coords(self) -> np.ndarray:
        """All node coordinates as an ``(n+1, 2)`` array, depot first."""
        return np.vstack([self.depot[None, :], self.customers])

    def demand_of(self, node: int) -> int:
        """Demand of node index (0 = depot, with demand 0)."""
        if node == 0:
            return 0
        return int(self.demands[node - 1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.name == other.name
            and self.capacity == other.capacity
            and np.array_equal(self.depot, other.depot)
            and np.array_equal(self.customers, other.customers)
            and np.array_equal(self.demands, other.demands)
        )

    def __repr__(self) -> str:
        return (
            f"Instance(name={self.name!r}, n={self.n}, capacity={self.capacity})"
        )


def generate_instance(n: int, capacity: int, seed: int, name: str | None = None) -> Instance:
    """Draw a random instance: coordinates i.i.d. uniform on the unit
    square, demands i.i.d. uniform integers in ``{1..9}``.

    Deterministic for a given ``(n, capacity, seed)``.  The draw order is
    fixed: depot coordinates, then customer coordinates, then demands.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if capacity < 9:
        raise ValueError(
            f"capacity must be >= 9 so every demand is servable, got {capacity}"
        )
    rng = np.random.default_rng(seed)
    depot = rng.random(2)
    customers = rng.random((n, 2))
    demands = rng.integers(1, 10, size=n)
    if name is None:
        name = f"random-n{n}-q{capacity}-s{seed}"
    return Instance(name=name, depot=depot, customers=customers,
                    demands=demands, capacity=capacity)


def polar_transform(point: tuple[float, float] | np.ndarray,
                    origin: tuple[float, float] | np.ndarray) -> tuple[float, float]:
    """Polar coordinates ``(rho, alpha)`` of ``point`` about ``origin``.

    ``alpha`` lies in ``(-pi, pi]`` (the ``-pi`` branch of atan2 is mapped
    to ``+pi``).  A point coincident with the origin maps to ``(0.0, 0.0)``.
    """
    dx = float(point[0]) - float(origin[0])
    dy = float(point[1]) - float(origin[1])
    if dx == 0.0 and dy == 0.0:
        return (0.0, 0.0)
    rho = math.hypot(dx, dy)
    alpha = math.atan2(dy, dx)
    if alpha == -math.pi:
        alpha = math.pi
    return (rho, alpha)


@dataclass(frozen=True)
class AugmentedFeatures:
    """Per-node encoder input rows for one instance.

    The depot row has 6 entries ``[x, y, 1-x, 1-y, 0, 0]`` (its polar
    coordinates about itself are zero by convention).  Each customer row
    has 7 entries ``[x, y, 1-x, 1-y, rho, alpha, q/Q]`` with ``(rho,
    alpha)`` taken about the depot.
    """

    depot_row: np.ndarray      # shape (6,)
    customer_rows: np.ndarray  # shape (n, 7)

    def __post_init__(self):
        if self.depot_row.shape != (6,):
            raise ValueError(f"depot row must have 6 entries, got {self.depot_row.shape}")
        if self.customer_rows.ndim != 2 or self.customer_rows.shape[1] != 7:
            raise ValueError(
                f"customer rows must be (n, 7), got {self.customer_rows.shape}"
            )

    @property
    def row_count(self) -> int:
        return 1 + self.customer_rows.shape[0]


def augment_features(inst: Instance) -> AugmentedFeatures:
    """Build the augmented feature rows for every node of ``inst``."""
    dx, dy = float(inst.depot[0]), float(inst.depot[1])
    depot_row = np.array([dx, dy, 1.0 - dx, 1.0 - dy, 0.0, 0.0])
    rows = np.empty((inst.n, 7))
    for i in range(inst.n):
        x, y = float(inst.customers[i, 0]), float(inst.customers[i, 1])
        rho, alpha = polar_transform((x, y), inst.depot)
        rows[i] = (x, y, 1.0 - x, 1.0 - y, rho, alpha,
                   float(inst.demands[i]) / inst.capacity)
    return AugmentedFeatures(depot_row=depot_row, customer_rows=rows)


# ---------------------------------------------------------------------------
# TSPLIB-style CVRP files
# ---------------------------------------------------------------------------

_REQUIRED_HEADERS = ("DIMENSION", "CAPACITY")


def _split_header(line: str) -> tuple[str, str] | None:
    if ":" not in line:
        return None
    key, _, value = line.partition(":")
    return key.strip(), value.strip()


def parse_instance_file(path: str, normalize: bool = True) -> Instance:
    """Parse a TSPLIB-style CVRP file.

    Node ids in the file are 1-based with id 1 as the depot; the depot's
    demand must be 0.  With ``normalize=True`` (the default), coordinates
    are rescaled into the unit square only when some coordinate falls
    outside it; the applied scale/offset is recorded in ``meta``.  Files
    already inside the unit square are read back verbatim.

    Raises :class:`ParseError` with a 1-based line number for malformed
    input (missing sections, non-numeric tokens, dimension mismatches,
    nonzero depot demand).
    """
    with open(path) as fh:
        lines = fh.read().splitlines()

    headers: dict[str, str] = {}
    coord_rows: dict[int, tuple[float, float]] = {}
    demand_rows: dict[int, int] = {}
    depot_ids: list[int] = []
    section = None
    section_lines = {"NODE_COORD_SECTION": 0, "DEMAND_SECTION": 0, "DEPOT_SECTION": 0}

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        upper = line.upper()
        if upper in section_lines:
            section = upper
            section_lines[upper] = lineno
            continue
        if section is None:
            parsed = _split_header(line)
            if parsed is None:
                raise ParseError(f"expected 'KEY : VALUE' header, got {line!r}", lineno)
            headers[parsed[0].upper()] = parsed[1]
            continue
        if section == "NODE_COORD_SECTION":
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(
                    f"coordinate rows need 'id x y', got {line!r}", lineno)
            try:
                node_id = int(parts[0])
                x, y = float(parts[1]), float(parts[2])
            except ValueError:
                raise ParseError(f"non-numeric token in {line!r}", lineno) from None
            if node_id in coord_rows:
                raise ParseError(f"duplicate coordinate row for node {node_id}", lineno)
            coord_rows[node_id] = (x, y)
        elif section == "DEMAND_SECTION":
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"demand rows need 'id demand', got {line!r}", lineno)
            try:
                node_id = int(parts[0])
                demand = int(parts[1])
            except ValueError:
                raise ParseError(f"non-numeric token in {line!r}", lineno) from None
            if node_id in demand_rows:
                raise ParseError(f"duplicate demand row for node {node_id}", lineno)
            demand_rows[node_id] = demand
        elif section == "DEPOT_SECTION":
            try:
                value = int(line)
            except ValueError:
                raise ParseError(f"non-numeric depot id {line!r}", lineno) from None
            if value != -1:
                depot_ids.append(value)

    for key in _REQUIRED_HEADERS:
        if key not in headers:
            raise ParseError(f"missing required header {key}")
    for name, at in section_lines.items():
        if at == 0:
            raise ParseError(f"missing section {name}")

    try:
        dimension = int(headers["DIMENSION"])
        capacity = int(headers["CAPACITY"])
    except ValueError as exc:
        raise ParseError(f"non-numeric header value: {exc}") from None

    if dimension < 2:
        raise ParseError(f"DIMENSION must be >= 2, got {dimension}")
    expected_ids = set(range(1, dimension + 1))
    if set(coord_rows) != expected_ids:
        raise ParseError(
            f"NODE_COORD_SECTION has ids {sorted(coord_rows)}, expected 1..{dimension}",
            section_lines["NODE_COORD_SECTION"])
    if set(demand_rows) != expected_ids:
        raise ParseError(
            f"DEMAND_SECTION has ids {sorted(demand_rows)}, expected 1..{dimension}",
            section_lines["DEMAND_SECTION"])
    if depot_ids != [1]:
        raise ParseError(
            f"DEPOT_SECTION must list exactly depot id 1, got {depot_ids}",
            section_lines["DEPOT_SECTION"])
    if demand_rows[1] != 0:
        raise ParseError(
            f"depot demand must be 0, got {demand_rows[1]}",
            section_lines["DEMAND_SECTION"])

    coords = np.array([coord_rows[i] for i in range(1, dimension + 1)])
    demands = np.array([demand_rows[i] for i in range(2, dimension + 1)], dtype=np.int64)

    meta: dict = {"source_path": os.path.abspath(path)}
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    out_of_range = bool((coords < 0.0).any() or (coords > 1.0).any())
    if normalize and out_of_range:
        span = float(max(hi[0] - lo[0], hi[1] - lo[1]))
        if span == 0.0:
            span = 1.0
        coords = (coords - lo[None, :]) / span
        meta["normalized"] = True
        meta["offset"] = (float(lo[0]), float(lo[1]))
        meta["scale"] = span

    name = headers.get("NAME", os.path.splitext(os.path.basename(path))[0])
    return Instance(name=name, depot=coords[0], customers=coords[1:],
                    demands=demands, capacity=capacity, meta=meta)


def write_instance_file(inst: Instance, path: str) -> None:
    """Write ``inst`` in the TSPLIB-style CVRP format (atomically).

    Coordinates are written with repr precision so that a parse of the
    written file reproduces the instance bit for bit (when no
    normalization applies).
    """
    out = [
        f"NAME : {inst.name}",
        "TYPE : CVRP",
        f"DIMENSION : {inst.n + 1}",
        "EDGE_WEIGHT_TYPE : EUC_2D",
        f"CAPACITY : {inst.capacity}",
        "NODE_COORD_SECTION",
        f"1 {float(inst.depot[0])!r} {float(inst.depot[1])!r}",
    ]
    for i in range(inst.n):
        out.append(f"{i + 2} {float(inst.customers[i, 0])!r} "
                   f"{float(inst.customers[i, 1])!r}")
    out.append("DEMAND_SECTION")
    out.append("1 0")
    for i in range(inst.n):
        out.append(f"{i + 2} {int(inst.demands[i])}")
    out.extend(["DEPOT_SECTION", "1", "-1", "EOF", ""])
    atomic_write_text(path, "\n".join(out))


def load_instance_dir(directory: str, normalize: bool = True) -> list[Instance]:
    """Parse every ``*.vrp`` file in ``directory`` in sorted name order."""
    names = sorted(f for f in os.listdir(directory) if f.endswith(".vrp"))
    return [parse_instance_file(os.path.join(directory, f), normalize=normalize)
            for f in names]


def iter_instances(paths: Iterable[str], normalize: bool = True) -> list[Instance]:
    """Parse a mix of files and directories into a flat instance list."""
    out: list[Instance] = []
    for p in paths:
        if os.path.isdir(p):
            out.extend(load_instance_dir(p, normalize=normalize))
        else:
            out.append(parse_instance_file(p, normalize=normalize))
    return out
