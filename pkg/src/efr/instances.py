"""Routing problem instances: containers, generators, and small utilities.

An instance is a complete distance matrix plus (optionally) the coordinates
and demand data it was derived from.  Everything downstream — heuristics,
exact solvers, the neural policy — consumes these containers, so their
invariants are enforced eagerly at construction time:

* ``dist`` is ``(n, n)`` float64, finite, non-negative, zero diagonal;
* symmetric for TSP/CVRP (mirrored once at build time, so equality is exact);
* when coordinates are present, ``dist`` equals their pairwise Euclidean
  distances and the coordinates lie in the unit square;
* CVRP instances carry integer demands (depot demand 0, customer demands
  at least 1 and at most the vehicle capacity).

Arrays are copied in and frozen (read-only) so instances can be shared
between threads and cached without defensive copies.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, FeasibilityError


class ProblemKind(str, enum.Enum):
    TSP = "tsp"
    CVRP = "cvrp"
    ATSP = "atsp"

    @classmethod
    def coerce(cls, value: Union[str, "ProblemKind"]) -> "ProblemKind":
        if isinstance(value, ProblemKind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown problem kind: {value!r}") from None


class Distribution(str, enum.Enum):
    UNIFORM = "uniform"
    EXPLOSION = "explosion"
    IMPLOSION = "implosion"
    GRID = "grid"

    @classmethod
    def coerce(cls, value: Union[str, "Distribution"]) -> "Distribution":
        if isinstance(value, Distribution):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown coordinate distribution: {value!r}") from None


# Constants of the clustered coordinate distributions.  Parameter values are
# recorded in ``instance.meta`` so reports can state exactly what was sampled.
EXPLOSION_RADIUS = 0.3
IMPLOSION_RADIUS = 0.3
IMPLOSION_FACTOR = 0.5
GRID_JITTER = 0.01


def pairwise_euclid(coords: np.ndarray) -> np.ndarray:
    """Full Euclidean distance matrix, mirrored so symmetry is bit-exact."""
    coords = np.asarray(coords, dtype=np.float64)
    delta = coords[:, None, :] - coords[None, :, :]
    d = np.sqrt((delta ** 2).sum(axis=-1))
    upper = np.triu(d, k=1)
    return upper + upper.T


def _freeze(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.array(a)  # private copy
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ProblemInstance:
    """A single routing problem.

    ``n`` counts nodes (for CVRP this includes the depot at index 0).
    ``meta`` holds free-form provenance: generator parameters, file scaling,
    etc.  It is never interpreted by solvers.
    """

    kind: ProblemKind
    n: int
    dist: np.ndarray
    coords: Optional[np.ndarray] = None
    demands: Optional[np.ndarray] = None
    capacity: Optional[int] = None
    seed: Optional[int] = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = ProblemKind.coerce(self.kind)
        object.__setattr__(self, "kind", kind)
        dist = np.array(self.dist, dtype=np.float64)
        if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
            raise ConfigurationError(f"dist must be square, got shape {dist.shape}")
        n = dist.shape[0]
        object.__setattr__(self, "n", int(n))
        if n < 2:
            raise ConfigurationError("an instance needs at least 2 nodes")
        if not np.all(np.isfinite(dist)):
            raise ConfigurationError("dist contains non-finite entries")
        if np.any(dist < 0):
            raise ConfigurationError("dist contains negative entries")
        if np.any(np.diagonal(dist) != 0.0):
            raise ConfigurationError("dist diagonal must be exactly zero")
        if kind in (ProblemKind.TSP, ProblemKind.CVRP) and not np.array_equal(dist, dist.T):
            raise ConfigurationError(f"{kind.value} distance matrix must be symmetric")

        coords = self.coords
        if coords is not None:
            if kind is ProblemKind.ATSP:
                raise ConfigurationError("ATSP instances do not carry coordinates")
            coords = np.array(coords, dtype=np.float64)
            if coords.shape != (n, 2):
                raise ConfigurationError(
                    f"coords must have shape ({n}, 2), got {coords.shape}")
            if np.any(coords < -1e-12) or np.any(coords > 1.0 + 1e-12):
                raise ConfigurationError("coords must lie in the unit square")
            if not np.allclose(dist, pairwise_euclid(coords), rtol=0.0, atol=1e-9):
                raise ConfigurationError("dist does not match the Euclidean "
                                         "distances of coords")

        demands = self.demands
        capacity = self.capacity
        if kind is ProblemKind.CVRP:
            if demands is None or capacity is None:
                raise ConfigurationError("CVRP instances need demands and capacity")
            demands = np.array(demands, dtype=np.int64)
            if demands.shape != (n,):
                raise ConfigurationError(f"demands must have shape ({n},)")
            if demands[0] != 0:
                raise ConfigurationError("depot demand (index 0) must be 0")
            if np.any(demands[1:] < 1):
                raise ConfigurationError("customer demands must be at least 1")
            capacity = int(capacity)
            if capacity < 1:
                raise ConfigurationError("capacity must be a positive integer")
            if np.any(demands > capacity):
                raise ConfigurationError("a customer demand exceeds the vehicle capacity")
        else:
            if demands is not None or capacity is not None:
                raise ConfigurationError(f"{kind.value} instances must not carry "
                                         "demands or capacity")

        object.__setattr__(self, "dist", _freeze(dist))
        object.__setattr__(self, "coords", _freeze(coords))
        object.__setattr__(self, "demands", _freeze(demands))
        object.__setattr__(self, "capacity", capacity)

    # -- convenience -----------------------------------------------------

    @property
    def num_customers(self) -> int:
        if self.kind is not ProblemKind.CVRP:
            raise ConfigurationError("num_customers is only defined for CVRP")
        return self.n - 1

    @property
    def is_symmetric(self) -> bool:
        return self.kind is not ProblemKind.ATSP

    def instance_id(self) -> str:
        return self.name or f"{self.kind.value}{self.n}"


@dataclass(frozen=True)
class SparseGraph:
    """k-nearest-neighbour sparsification of an instance.

    ``adj_code[i, j]`` is 2 on the diagonal, 1 if j is one of the k nearest
    neighbours of i (self excluded, ties to the lower index), else 0.
    ``edge_weight`` is the full distance matrix the codes were derived from.
    """

    adj_code: np.ndarray
    edge_weight: np.ndarray
    k: int

    def __post_init__(self):
        object.__setattr__(self, "adj_code", _freeze(np.array(self.adj_code, dtype=np.int8)))
        object.__setattr__(self, "edge_weight", _freeze(np.array(self.edge_weight, dtype=np.float64)))


@dataclass
class Solution:
    """A feasible route with its (real-valued) length.

    For TSP/ATSP ``route`` is a permutation of all nodes (the closing arc back
    to ``route[0]`` is implied).  For CVRP it is a depot-delimited walk
    ``0, c, ..., 0, c, ..., 0`` that starts and ends at the depot.
    """

    route: np.ndarray
    length: float
    feasible: bool = True

    def __post_init__(self):
        self.route = np.array(self.route, dtype=np.int64)

    @classmethod
    def from_route(cls, instance: ProblemInstance, route) -> "Solution":
        return cls(route=np.asarray(route, dtype=np.int64),
                   length=solution_length(instance, route))


@dataclass
class SolveReport:
    """One solver result on one instance, ready for JSON-lines output."""

    instance_id: str
    method: str
    n_aug: int
    route: list
    length: float
    reference_length: Optional[float] = None
    gap: Optional[float] = None
    seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {
            "instance": self.instance_id,
            "method": self.method,
            "n_aug": self.n_aug,
            "length": self.length,
            "reference_length": self.reference_length,
            "gap": self.gap,
            "seconds": self.seconds,
            "route": [int(v) for v in self.route],
        }
        if self.meta:
            rec["meta"] = self.meta
        return rec


# ---------------------------------------------------------------------------
# route validation and length
# ---------------------------------------------------------------------------

def validate_route(instance: ProblemInstance, route) -> np.ndarray:
    """Check feasibility; returns the route as an int64 array.

    Raises :class:`FeasibilityError` naming the first violated constraint.
    """
    route = np.asarray(route, dtype=np.int64)
    if route.ndim != 1 or route.size == 0:
        raise FeasibilityError("route must be a non-empty 1-D sequence of node indices")
    n = instance.n
    if np.any(route < 0) or np.any(route >= n):
        bad = route[(route < 0) | (route >= n)][0]
        raise FeasibilityError(f"node index {int(bad)} out of range [0, {n})")

    if instance.kind in (ProblemKind.TSP, ProblemKind.ATSP):
        counts = np.bincount(route, minlength=n)
        if route.size != n or np.any(counts != 1):
            if np.any(counts > 1):
                dup = int(np.argmax(counts > 1))
                raise FeasibilityError(f"node {dup} visited {int(counts[dup])} times")
            missing = int(np.argmax(counts == 0))
            raise FeasibilityError(f"node {missing} is never visited")
        return route

    # CVRP
    if route[0] != 0:
        raise FeasibilityError("route must start at the depot (node 0)")
    if route[-1] != 0:
        raise FeasibilityError("route must end at the depot (node 0)")
    zero_pos = np.flatnonzero(route == 0)
    if np.any(np.diff(zero_pos) == 1):
        raise FeasibilityError("empty route: consecutive depot visits")
    counts = np.bincount(route, minlength=n)
    if np.any(counts[1:] != 1):
        if np.any(counts[1:] > 1):
            dup = 1 + int(np.argmax(counts[1:] > 1))
            raise FeasibilityError(f"customer {dup} visited {int(counts[dup])} times")
        missing = 1 + int(np.argmax(counts[1:] == 0))
        raise FeasibilityError(f"customer {missing} is never visited")
    demands = instance.demands
    capacity = instance.capacity
    load = 0
    for pos, node in enumerate(route):
        if node == 0:
            load = 0
            continue
        load += int(demands[node])
        if load > capacity:
            raise FeasibilityError(
                f"vehicle capacity exceeded at position {pos}: load {load} > {capacity}")
    return route


def solution_length(instance: ProblemInstance, route) -> float:
    """Total length of a route, validated first.

    TSP/ATSP lengths include the closing arc back to the first node; CVRP
    routes already contain their depot returns.
    """
    if isinstance(route, Solution):
        route = route.route
    route = validate_route(instance, route)
    d = instance.dist
    if instance.kind in (ProblemKind.TSP, ProblemKind.ATSP):
        nxt = np.roll(route, -1)
        return float(d[route, nxt].sum())
    return float(d[route[:-1], route[1:]].sum())


def normalize_cvrp_route(route) -> np.ndarray:
    """Canonical CVRP walk: leading/trailing depot, no consecutive depots."""
    route = np.asarray(route, dtype=np.int64).ravel()
    out = [0]
    for node in route:
        if node == 0 and out[-1] == 0:
            continue
        out.append(int(node))
    if out[-1] != 0:
        out.append(0)
    return np.array(out, dtype=np.int64)


def optimality_gap(length: float, reference: float) -> float:
    """Percent excess of ``length`` over a positive reference length."""
    if not (reference > 0.0) or not math.isfinite(reference):
        raise ValueError(f"reference length must be positive and finite, got {reference}")
    return 100.0 * (float(length) - float(reference)) / float(reference)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def capacity_for_customers(m: int) -> int:
    """Vehicle capacity convention: 30/40/50 at 20/50/100 customers,
    piecewise-linear in between, nearest segment extrapolated, rounded half-up."""
    if m < 1:
        raise ConfigurationError("a CVRP instance needs at least one customer")
    if m <= 50:
        c = 30.0 + (m - 20) * (40.0 - 30.0) / (50 - 20)
    else:
        c = 40.0 + (m - 50) * (50.0 - 40.0) / (100 - 50)
    return int(math.floor(c + 0.5))


def _sample_coords(rng: np.random.Generator, n: int, distribution: Distribution,
                   meta: dict) -> np.ndarray:
    pts = rng.random((n, 2))
    if distribution is Distribution.UNIFORM:
        return pts

    if distribution in (Distribution.EXPLOSION, Distribution.IMPLOSION):
        center = rng.random(2)
        radius = EXPLOSION_RADIUS if distribution is Distribution.EXPLOSION else IMPLOSION_RADIUS
        offsets = pts - center
        dists = np.sqrt((offsets ** 2).sum(axis=1))
        inside = dists < radius
        if distribution is Distribution.EXPLOSION:
            # Push points inside the blast disc radially onto its boundary.
            for i in np.flatnonzero(inside):
                if dists[i] == 0.0:
                    angle = rng.random() * 2.0 * np.pi
                    direction = np.array([np.cos(angle), np.sin(angle)])
                else:
                    direction = offsets[i] / dists[i]
                pts[i] = center + radius * direction
            meta.update(center=center.tolist(), radius=radius)
        else:
            pts[inside] = center + IMPLOSION_FACTOR * offsets[inside]
            meta.update(center=center.tolist(), radius=radius, factor=IMPLOSION_FACTOR)
        return np.clip(pts, 0.0, 1.0)

    # grid: n distinct cells of the ceil(sqrt(n))^2 lattice, jittered.
    g = math.ceil(math.sqrt(n))
    cells = rng.choice(g * g, size=n, replace=False)
    centers = np.stack([(cells // g + 0.5) / g, (cells % g + 0.5) / g], axis=1)
    jitter = rng.uniform(-GRID_JITTER, GRID_JITTER, size=(n, 2))
    meta.update(grid_side=g, jitter=GRID_JITTER)
    return np.clip(centers + jitter, 0.0, 1.0)


def generate_instance(kind, n: int, distribution="uniform", seed: int = 0) -> ProblemInstance:
    """Sample a random instance.

    For TSP, ``n`` is the number of nodes; for CVRP it is the number of
    CUSTOMERS (the instance then has ``n + 1`` nodes with the depot at
    index 0).  ATSP accepts only the uniform distribution and delegates to
    :func:`generate_atsp_instance`.
    """
    kind = ProblemKind.coerce(kind)
    distribution = Distribution.coerce(distribution)
    if n < 1:
        raise ConfigurationError(f"instance size must be positive, got {n}")
    if kind is ProblemKind.ATSP:
        if distribution is not Distribution.UNIFORM:
            raise ConfigurationError(
                "ATSP generation has no coordinates; only distribution='uniform' is supported")
        return generate_atsp_instance(n, seed=seed)

    rng = np.random.default_rng(seed)
    meta = {"distribution": distribution.value}
    if kind is ProblemKind.TSP:
        if n < 2:
            raise ConfigurationError("a TSP instance needs at least 2 nodes")
        coords = _sample_coords(rng, n, distribution, meta)
        return ProblemInstance(kind=kind, n=n, dist=pairwise_euclid(coords),
                               coords=coords, seed=seed,
                               name=f"tsp{n}-{distribution.value}-s{seed}", meta=meta)

    # CVRP: depot + n customers share one coordinate draw.
    coords = _sample_coords(rng, n + 1, distribution, meta)
    demands = np.concatenate([[0], rng.integers(1, 10, size=n)])
    capacity = capacity_for_customers(n)
    meta["customers"] = n
    return ProblemInstance(kind=kind, n=n + 1, dist=pairwise_euclid(coords),
                           coords=coords, demands=demands, capacity=capacity,
                           seed=seed, name=f"cvrp{n}-{distribution.value}-s{seed}",
                           meta=meta)


def generate_atsp_instance(n: int, seed: int = 0) -> ProblemInstance:
    """Asymmetric instance: integer uniform entries tightened to satisfy the
    triangle inequality by a min-plus transitive closure, then scaled to
    roughly unit magnitude."""
    if n < 2:
        raise ConfigurationError("an ATSP instance needs at least 2 nodes")
    rng = np.random.default_rng(seed)
    d = rng.integers(1, 1_000_001, size=(n, n)).astype(np.float64)
    np.fill_diagonal(d, 0.0)
    while True:
        via = np.min(d[:, :, None] + d[None, :, :], axis=1)
        np.fill_diagonal(via, 0.0)
        tightened = np.minimum(d, via)
        if np.array_equal(tightened, d):
            break
        d = tightened
    d /= 1_000_000.0
    return ProblemInstance(kind=ProblemKind.ATSP, n=n, dist=d, seed=seed,
                           name=f"atsp{n}-s{seed}",
                           meta={"distribution": "uniform", "closure": "min-plus"})


# ---------------------------------------------------------------------------
# sparsification
# ---------------------------------------------------------------------------

def knn_sparsify(instance: ProblemInstance, k: int) -> SparseGraph:
    """Adjacency codes for the k nearest neighbours of every node.

    Self-distances are excluded; ties break toward the lower node index.
    ``k`` must lie in ``[1, n - 1]``.
    """
    n = instance.n
    if not 1 <= k <= n - 1:
        raise ConfigurationError(f"k must be in [1, {n - 1}] for n={n}, got {k}")
    d = instance.dist.copy()
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")  # stable => ties to lower index
    neighbors = order[:, :k]
    code = np.zeros((n, n), dtype=np.int8)
    code[np.arange(n)[:, None], neighbors] = 1
    np.fill_diagonal(code, 2)
    return SparseGraph(adj_code=code, edge_weight=instance.dist, k=k)
