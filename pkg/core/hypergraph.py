"""
Destroy-and-reduce machinery.

A destruction removes every solution edge incident to a chosen node set; the
surviving chains become fixed hyper-edges that the repair step only sees
through their two endpoints. This module builds those reduced problems
(feature rows, back-maps), predicts their size before destroying anything
(sample-size alignment), extracts supervision targets from label solutions
and expands repaired orders back into full solutions.

For CVRP the depot never appears as a row: every depot-incident edge is cut
before segments are extracted, so routes are open paths over customers.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ConsistencyError,
    DegenerateInputError,
    DomainError,
    InfeasibleOrderError,
    KindError,
    ValidationError,
)
from .instances import (
    Instance,
    ProblemKind,
    RoutePlan,
    Solution,
    Tour,
    validate_route_plan,
    validate_tour,
)


@dataclass(frozen=True)
class Destruction:
    destroyed: FrozenSet[int]
    destroyed_edges: FrozenSet[Tuple[int, int]]
    segments: Tuple[Tuple[int, ...], ...]
    isolated: Tuple[int, ...]
    center: Optional[int] = None


@dataclass(frozen=True)
class HyperEdge:
    a: int
    b: int
    interior: Tuple[int, ...]

    def nodes_from(self, entry: int) -> Tuple[int, ...]:
        """Full chain starting at `entry` (either endpoint)."""
        chain = (self.a,) + self.interior + (self.b,)
        return chain if entry == self.a else chain[::-1]


@dataclass(frozen=True)
class CoordTransform:
    offset: Tuple[float, float]
    scale: float


@dataclass(frozen=True, eq=False)
class HyperGraph:
    kind: ProblemKind
    origin: np.ndarray
    partner: np.ndarray
    hyper_edges: Tuple[HyperEdge, ...]
    features: np.ndarray
    capacity: Optional[int] = None
    transform: Optional[CoordTransform] = None
    depot: Optional[Tuple[float, float]] = None

    @property
    def m(self) -> int:
        return len(self.origin)

    @property
    def isolated(self) -> FrozenSet[int]:
        return frozenset(int(v) for v in self.origin[self.partner < 0])

    @property
    def endpoints(self) -> FrozenSet[int]:
        return frozenset(int(v) for v in self.origin[self.partner >= 0])

    @property
    def row_of(self) -> Dict[int, int]:
        return {int(v): r for r, v in enumerate(self.origin)}

    @property
    def demand(self) -> np.ndarray:
        """Load a row adds when it is entered (segment total for endpoints)."""
        if self.kind is not ProblemKind.CVRP:
            raise KindError("only CVRP hyper-graphs carry demands")
        return self.features[:, 5]

    @cached_property
    def _edge_by_node(self) -> Dict[int, HyperEdge]:
        return {v: he for he in self.hyper_edges for v in (he.a, he.b)}

    def hyper_edge_of(self, row: int) -> HyperEdge:
        node = int(self.origin[row])
        if node not in self._edge_by_node:
            raise ValidationError(f"row {row} is not an endpoint")
        return self._edge_by_node[node]

    def permuted(self, perm: Sequence[int]) -> "HyperGraph":
        """Relabel rows so new row i is old row perm[i]."""
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.m)):
            raise ValidationError("row permutation is not a permutation of 0..m-1")
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(self.m)
        old_partner = self.partner[perm]
        partner = np.where(old_partner >= 0, inverse[np.maximum(old_partner, 0)], -1)
        return replace(self, origin=self.origin[perm], partner=partner, features=self.features[perm])

    def model_features(self, with_depot: bool = False) -> np.ndarray:
        """
        Network input: CVRP demand column expressed as a fraction of capacity.

        With `with_depot` every CVRP row also carries the depot position, in
        the same frame as the row coordinates.
        """
        feats = np.array(self.features, dtype=np.float64)
        if self.kind is ProblemKind.CVRP:
            feats[:, 5] = feats[:, 5] / self.capacity
        if with_depot:
            if self.kind is not ProblemKind.CVRP or self.depot is None:
                raise KindError("depot features need a CVRP hyper-graph")
            feats = np.hstack([feats, np.tile(np.asarray(self.depot, dtype=np.float64), (self.m, 1))])
        return feats


@dataclass(frozen=True)
class AlignmentResult:
    mask: np.ndarray
    achieved_size: int
    feasible: bool
    order: np.ndarray
    sizes: np.ndarray

    @property
    def destroyed(self) -> List[int]:
        return [int(v) for v in self.order[: int(self.mask.sum())]]


@dataclass(frozen=True)
class TargetSequence:
    order: np.ndarray
    forced: np.ndarray
    route_starts: Tuple[int, ...] = ()


def _solution_links(solution: Solution, n: int) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    """prev/next arrays (-1 where no edge) plus the nodes in solution order."""
    prev = np.full(n, -1, dtype=np.int64)
    nxt = np.full(n, -1, dtype=np.int64)
    if isinstance(solution, Tour):
        order = np.asarray(solution.order)
        nxt[order] = np.roll(order, -1)
        prev[order] = np.roll(order, 1)
        return prev, nxt, list(solution.order)
    walk: List[int] = []
    for route in solution.routes:
        for a, b in zip(route[:-1], route[1:]):
            nxt[a] = b
            prev[b] = a
        walk += list(route)
    return prev, nxt, walk


def _solution_size(solution: Solution) -> int:
    if isinstance(solution, Tour):
        return len(solution)
    return 1 + max((v for r in solution.routes for v in r), default=0)


def _check_solution(inst: Instance, solution: Solution) -> None:
    if isinstance(solution, Tour):
        validate_tour(inst, solution)
    else:
        validate_route_plan(inst, solution)


def nearest_order(inst: Instance, center: int) -> np.ndarray:
    """Routable nodes by Euclidean distance to `center`, ties by node index, center first."""
    nodes = np.asarray(inst.nodes)
    if center not in set(nodes.tolist()):
        raise DomainError(f"center {center} is not a routable node")
    diff = inst.coords[nodes] - inst.coords[center]
    dist = np.hypot(diff[:, 0], diff[:, 1])
    dist[nodes == center] = -1.0
    return nodes[np.lexsort((nodes, dist))]


def destroy_nodes(inst: Instance, solution: Solution, nodes) -> Destruction:
    """Remove every solution edge incident to `nodes` and extract the surviving chains."""
    _check_solution(inst, solution)
    destroyed = frozenset(int(v) for v in nodes)
    valid = set(inst.nodes)
    bad = [v for v in destroyed if v not in valid]
    if bad:
        raise DomainError(f"cannot destroy node {bad[0]}")
    if not destroyed and not inst.is_cvrp:
        raise DomainError("a TSP destruction needs at least one node")

    prev, nxt, walk = _solution_links(solution, inst.n)
    alive = np.ones(inst.n, dtype=bool)
    alive[list(destroyed)] = False

    removed = set()
    for v in destroyed:
        for u in (prev[v], nxt[v]):
            if u >= 0:
                removed.add((min(v, int(u)), max(v, int(u))))
    if inst.is_cvrp:
        for route in solution.routes:
            removed.add((0, route[0]))
            removed.add((0, route[-1]))

    def intact(u: int, w: int) -> bool:
        return u >= 0 and w >= 0 and alive[u] and alive[w]

    segments = []
    for v in walk:
        if not alive[v] or intact(int(prev[v]), v) or not intact(v, int(nxt[v])):
            continue
        chain = [v]
        while intact(chain[-1], int(nxt[chain[-1]])):
            chain.append(int(nxt[chain[-1]]))
        segments.append(tuple(chain))

    in_segment = {v for seg in segments for v in seg}
    isolated = tuple(sorted(v for v in inst.nodes if v not in in_segment))
    return Destruction(destroyed, frozenset(removed), tuple(segments), isolated)


def cluster_destroy(inst: Instance, solution: Solution, center: int, count: int) -> Destruction:
    """Destroy the `count` nodes nearest to `center` (center included)."""
    routable = len(inst.nodes)
    if not 1 <= count <= routable:
        raise DomainError(f"destroy count must be in [1, {routable}], got {count}")
    nodes = nearest_order(inst, center)[:count]
    return replace(destroy_nodes(inst, solution, nodes), center=center)


class DestroyOperator(ABC):
    """Picks what to destroy on a solution; the search calls it once per iteration."""

    @abstractmethod
    def destroy(self, inst: Instance, solution: Solution, count: int, rng: np.random.Generator) -> Destruction:
        ...


class ClusterDestroy(DestroyOperator):
    def destroy(self, inst: Instance, solution: Solution, count: int, rng: np.random.Generator) -> Destruction:
        center = int(rng.choice(inst.nodes))
        return cluster_destroy(inst, solution, center, min(count, len(inst.nodes)))


def emergence_count(solution: Solution, node: int, destroyed_so_far) -> int:
    """
    Hyper-graph rows that appear when `node` is destroyed next.

    Counts the intact first-order edges at `node` and, behind each intact
    one, the next edge along the solution; the result is that count minus
    one, floored at zero.
    """
    n = _solution_size(solution)
    prev, nxt, _ = _solution_links(solution, n)
    gone = set(int(v) for v in destroyed_so_far)
    if node in gone:
        raise DomainError(f"node {node} is already destroyed")

    def alive(u: int) -> bool:
        return u >= 0 and u not in gone

    total = 0
    for link in (prev, nxt):
        first = int(link[node])
        if alive(first):
            total += 1
            if alive(int(link[first])):
                total += 1
    return max(0, total - 1)


def _base_size(solution: Solution) -> int:
    """Rows before any destruction: zero for a closed tour, depot-cut routes otherwise."""
    if isinstance(solution, Tour):
        return 0
    return sum(2 if len(r) > 1 else 1 for r in solution.routes)


def align_sample_size(inst: Instance, solution: Solution, center: int, k: int) -> AlignmentResult:
    """Predict the hyper-graph size of every nearest-first destruction prefix and pick the one that fits k."""
    _check_solution(inst, solution)
    prev, nxt, _ = _solution_links(solution, inst.n)
    order = nearest_order(inst, center)
    rank = np.full(inst.n, -1, dtype=np.int64)
    rank[order] = np.arange(len(order))
    r = np.arange(len(order))

    total = np.zeros(len(order), dtype=np.int64)
    for link in (prev, nxt):
        first = link[order]
        first_ok = (first >= 0) & (rank[np.maximum(first, 0)] > r)
        second = np.where(first >= 0, link[np.maximum(first, 0)], -1)
        second_ok = first_ok & (second >= 0) & (rank[np.maximum(second, 0)] > r)
        total += first_ok.astype(np.int64) + second_ok.astype(np.int64)

    sizes = _base_size(solution) + np.cumsum(np.maximum(0, total - 1))
    prefix = int(np.searchsorted(sizes, k, side="right"))
    mask = np.zeros(inst.n, dtype=bool)
    mask[order[:prefix]] = True
    achieved = int(sizes[prefix - 1]) if prefix else _base_size(solution)
    return AlignmentResult(mask, achieved, achieved == k, order, sizes)


def reduce(inst: Instance, destruction: Destruction) -> HyperGraph:
    if not destruction.destroyed:
        raise DomainError("reduce needs at least one destroyed node")
    hyper_edges = tuple(HyperEdge(seg[0], seg[-1], tuple(seg[1:-1])) for seg in destruction.segments)
    partner_node: Dict[int, int] = {v: -1 for v in destruction.isolated}
    for he in hyper_edges:
        partner_node[he.a] = he.b
        partner_node[he.b] = he.a

    origin = np.array(sorted(partner_node), dtype=np.int64)
    row = {int(v): i for i, v in enumerate(origin)}
    partner = np.array([row[partner_node[v]] if partner_node[v] >= 0 else -1 for v in origin.tolist()],
                       dtype=np.int64)

    own = inst.coords[origin]
    other = np.where((partner >= 0)[:, None], own[np.maximum(partner, 0)], own)
    flag = (partner >= 0).astype(np.float64)[:, None]
    columns = [own, other, flag]
    capacity, depot = None, None
    if inst.is_cvrp:
        depot = (float(inst.coords[0, 0]), float(inst.coords[0, 1]))
        dr = inst.demands[origin].astype(np.float64)
        for he in hyper_edges:
            total = float(inst.demands[list((he.a,) + he.interior + (he.b,))].sum())
            dr[row[he.a]] = total
            dr[row[he.b]] = total
        columns.append(dr[:, None])
        capacity = inst.capacity
    features = np.hstack(columns)
    return HyperGraph(inst.kind, origin, partner, hyper_edges, features, capacity, depot=depot)


def transform_coords(hg: HyperGraph) -> HyperGraph:
    """Translate the coordinate bounding box to the origin and scale its longest side to 1."""
    pts = hg.features[:, :4].reshape(-1, 2)
    lo = pts.min(axis=0)
    span = float((pts.max(axis=0) - lo).max())
    if hg.m < 2 or span == 0.0:
        raise DegenerateInputError(f"cannot normalise {hg.m} rows with a zero-size bounding box")
    features = np.array(hg.features, dtype=np.float64)
    features[:, :4] = ((pts - lo) / span).reshape(-1, 4)
    depot = None
    if hg.depot is not None:
        depot = tuple(float(c) for c in (np.asarray(hg.depot) - lo) / span)
    return replace(hg, features=features, depot=depot,
                   transform=CoordTransform((float(lo[0]), float(lo[1])), span))


def _check_chains(hg: HyperGraph, prev: np.ndarray, nxt: np.ndarray, n_nodes: int) -> None:
    covered = set(int(v) for v in hg.origin)
    for he in hg.hyper_edges:
        chain = (he.a,) + he.interior + (he.b,)
        forward = all(nxt[u] == w for u, w in zip(chain[:-1], chain[1:]))
        backward = all(prev[u] == w for u, w in zip(chain[:-1], chain[1:]))
        if not (forward or backward):
            raise ConsistencyError(f"hyper-edge {he.a}..{he.b} is not a chain of the label solution")
        covered.update(he.interior)
    if len(covered) != n_nodes:
        raise ConsistencyError("hyper-graph and label solution cover different node sets")


def _mark_forced(rows: List[int], partner: np.ndarray) -> np.ndarray:
    forced = np.zeros(len(rows), dtype=bool)
    for i in range(1, len(rows)):
        if not forced[i - 1] and partner[rows[i - 1]] == rows[i]:
            forced[i] = True
    return forced


def target_sequence(solution: Solution, hg: HyperGraph, reverse: bool = False) -> TargetSequence:
    """
    Rows of `hg` in the order the label solution visits them.

    The step right after entering a hyper-edge is marked forced. TSP walks
    start at the entry endpoint of the first hyper-edge met (or at the first
    tour node when every row is isolated); CVRP walks follow the routes and
    also report where each route starts.
    """
    n = _solution_size(solution)
    prev, nxt, _ = _solution_links(solution, n)
    row = hg.row_of
    n_nodes = len(solution) if isinstance(solution, Tour) else len(solution.customers())
    _check_chains(hg, prev, nxt, n_nodes)

    if isinstance(solution, Tour):
        walk = list(solution.order[::-1] if reverse else solution.order)
        rows = [row[v] for v in walk if v in row]
        for i in range(len(rows)):
            if hg.partner[rows[i]] == rows[(i + 1) % len(rows)] and len(rows) > 1:
                rows = rows[i:] + rows[:i]
                break
        forced = _mark_forced(rows, hg.partner)
        if forced.sum() != len(hg.hyper_edges):
            raise ConsistencyError("label tour separates the endpoints of a hyper-edge")
        return TargetSequence(np.array(rows, dtype=np.int64), forced)

    routes = [r[::-1] for r in solution.routes[::-1]] if reverse else list(solution.routes)
    rows, starts = [], []
    for route in routes:
        route_rows = [row[v] for v in route if v in row]
        if route_rows:
            starts.append(len(rows))
            rows += route_rows
    forced = _mark_forced(rows, hg.partner)
    if forced.sum() != len(hg.hyper_edges) or any(forced[s] for s in starts):
        raise ConsistencyError("label routes separate the endpoints of a hyper-edge")
    return TargetSequence(np.array(rows, dtype=np.int64), forced, tuple(starts))


def _check_order(hg: HyperGraph, reduced_order: Sequence[int]) -> List[int]:
    order = [int(r) for r in reduced_order]
    if sorted(order) != list(range(hg.m)):
        raise ValidationError("reduced order is not a permutation of the hyper-graph rows")
    return order


def _expand(hg: HyperGraph, rows: List[int], cyclic: bool) -> List[int]:
    """Expand a row sequence into original nodes, hyper-edges in traversal direction."""
    m = len(rows)
    if cyclic and m > 2 and hg.partner[rows[0]] == rows[-1]:
        rows = rows[-1:] + rows[:-1]
    nodes: List[int] = []
    i = 0
    while i < m:
        r = rows[i]
        if hg.partner[r] < 0:
            nodes.append(int(hg.origin[r]))
            i += 1
            continue
        if i + 1 >= m or rows[i + 1] != hg.partner[r]:
            raise InfeasibleOrderError(f"endpoints of hyper-edge at row {r} are not adjacent")
        nodes += hg.hyper_edge_of(r).nodes_from(int(hg.origin[r]))
        i += 2
    return nodes


def _split_by_capacity(hg: HyperGraph, order: List[int]) -> List[int]:
    """Route start positions from a greedy capacity scan; hyper-edges are never split."""
    starts, load = [0], 0.0
    dr = hg.demand
    i = 0
    while i < len(order):
        r = order[i]
        q = float(dr[r])
        if load + q > hg.capacity and i > 0:
            starts.append(i)
            load = 0.0
        load += q
        i += 2 if hg.partner[r] >= 0 else 1
    return starts


def _routes_of(order: List[int], route_starts: Sequence[int]) -> List[List[int]]:
    bounds = list(route_starts) + [len(order)]
    if not route_starts or bounds[0] != 0 or any(a >= b for a, b in zip(bounds[:-1], bounds[1:])):
        raise ValidationError(f"bad route starts {list(route_starts)} for {len(order)} rows")
    return [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def restore(inst: Instance, hg: HyperGraph, reduced_order: Sequence[int],
            route_starts: Optional[Sequence[int]] = None) -> Solution:
    """Expand a repaired row order back into a Tour (TSP) or RoutePlan (CVRP)."""
    order = _check_order(hg, reduced_order)
    if not inst.is_cvrp:
        tour = Tour(_expand(hg, order, cyclic=True))
        validate_tour(inst, tour)
        return tour
    if route_starts is None:
        route_starts = _split_by_capacity(hg, order)
    routes = [_expand(hg, rows, cyclic=False) for rows in _routes_of(order, route_starts)]
    plan = RoutePlan(routes)
    if sorted(plan.customers()) != inst.nodes:
        raise ValidationError("restored routes do not cover every customer")
    return plan


def fixed_length(inst: Instance, hg: HyperGraph) -> float:
    """Total length of the fixed chains behind the hyper-edges."""
    d = inst.distances
    total = 0.0
    for he in hg.hyper_edges:
        chain = np.array((he.a,) + he.interior + (he.b,))
        total += float(d[chain[:-1], chain[1:]].sum())
    return total


def connection_length(inst: Instance, hg: HyperGraph, reduced_order: Sequence[int],
                      route_starts: Optional[Sequence[int]] = None) -> float:
    """Length of the links the repair chose: everything except the hyper-edge chains."""
    order = _check_order(hg, reduced_order)
    d = inst.distances
    nodes = hg.origin
    if not inst.is_cvrp:
        groups, closed = [order], True
    else:
        groups = _routes_of(order, route_starts if route_starts is not None else _split_by_capacity(hg, order))
        closed = False
    total = 0.0
    for rows in groups:
        links = list(zip(rows, rows[1:] + rows[:1])) if closed else list(zip(rows[:-1], rows[1:]))
        chained = set()
        for r, s in links:
            # a two-row cycle links the same pair twice; only one link is the chain
            if hg.partner[r] == s and r not in chained:
                chained.update((r, s))
                continue
            total += float(d[nodes[r], nodes[s]])
        if not closed:
            total += float(d[0, nodes[rows[0]]] + d[nodes[rows[-1]], 0])
    return total
