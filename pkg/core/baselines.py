"""
Construction heuristics and labelling oracles.

random insertion and sweep build the initial solutions the search starts
from; Held-Karp and the 2-opt/Or-opt local search produce the training labels.
"""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .errors import KindError, SizeError, ValidationError
from .instances import Instance, ProblemKind, RoutePlan, Solution, Tour
from .utils import read_jsonl, write_jsonl

_EPS = 1e-12


class LabelMode(str, Enum):
    EXACT_DP = "exact"
    LOCAL_SEARCH = "local_search"


@dataclass(frozen=True)
class LabelerConfig:
    mode: LabelMode = LabelMode.EXACT_DP
    max_exact_n: int = 16
    ls_rounds: int = 100

    def __post_init__(self):
        object.__setattr__(self, "mode", LabelMode(self.mode))
        if self.ls_rounds < 1:
            raise ValidationError(f"ls_rounds must be positive, got {self.ls_rounds}")

    @classmethod
    def from_config(cls, config: dict) -> "LabelerConfig":
        section = config.get("labels", {}) or {}
        return cls(
            mode=LabelMode(section.get("mode", LabelMode.EXACT_DP.value)),
            max_exact_n=int(section.get("max_exact_n", 16)),
            ls_rounds=int(section.get("ls_rounds", 100)),
        )


def _require(inst: Instance, kind: ProblemKind, what: str) -> None:
    if inst.kind is not kind:
        raise KindError(f"{what} needs a {kind.value} instance, got {inst.kind.value}")


def random_insertion(inst: Instance, seed=None) -> Tour:
    """Random 3-node start, then each remaining node (random order) at its cheapest cyclic position."""
    _require(inst, ProblemKind.TSP, "random insertion")
    rng = np.random.default_rng(seed)
    d = inst.distances
    perm = rng.permutation(inst.n)
    tour = list(perm[:3])
    for v in perm[3:]:
        t = np.asarray(tour)
        nxt = np.roll(t, -1)
        cost = d[t, v] + d[v, nxt] - d[t, nxt]
        pos = int(np.argmin(cost))
        tour.insert(pos + 1, v)
    return Tour(tour)


def sweep(inst: Instance) -> RoutePlan:
    """Customers by polar angle around the depot, routes closed when the next customer does not fit."""
    _require(inst, ProblemKind.CVRP, "sweep")
    rel = inst.coords[1:] - inst.coords[0]
    angle = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2 * np.pi)
    customers = np.arange(1, inst.n)
    order = customers[np.lexsort((customers, angle))]

    routes: List[List[int]] = []
    route: List[int] = []
    load = 0
    for v in order:
        q = int(inst.demands[v])
        if route and load + q > inst.capacity:
            routes.append(route)
            route, load = [], 0
        route.append(int(v))
        load += q
    if route:
        routes.append(route)
    return RoutePlan(routes)


def held_karp_matrix(dist: np.ndarray) -> Tuple[List[int], float]:
    """
    Exact shortest Hamiltonian cycle over an explicit symmetric matrix.

    Bitmask dynamic program with node 0 fixed as the start; one layer of
    subsets (by size) is relaxed at a time with numpy. Returns the order
    starting at 0 and its cost.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = len(dist)
    if n <= 3:
        order = list(range(n))
        return order, float(sum(dist[order[i], order[(i + 1) % n]] for i in range(n))) if n > 1 else 0.0

    k = n - 1
    inner = dist[1:, 1:]
    full = (1 << k) - 1
    dp = np.full((1 << k, k), np.inf)
    parent = np.full((1 << k, k), -1, dtype=np.int8)
    for j in range(k):
        dp[1 << j, j] = dist[0, j + 1]

    masks = np.arange(1 << k)
    popcount = np.zeros(1 << k, dtype=np.int64)
    for b in range(k):
        popcount += (masks >> b) & 1

    for size in range(2, k + 1):
        layer = masks[popcount == size]
        for j in range(k):
            sel = layer[((layer >> j) & 1) == 1]
            prev = sel ^ (1 << j)
            cand = dp[prev] + inner[:, j]
            best = np.argmin(cand, axis=1)
            dp[sel, j] = cand[np.arange(len(sel)), best]
            parent[sel, j] = best

    closing = dp[full] + dist[1:, 0]
    j = int(np.argmin(closing))
    cost = float(closing[j])
    path = []
    mask = full
    while j >= 0:
        path.append(j + 1)
        prev_j = int(parent[mask, j])
        mask ^= 1 << j
        j = prev_j
    return [0] + path[::-1], cost


def held_karp(inst: Instance, cfg: Optional[LabelerConfig] = None) -> Tour:
    _require(inst, ProblemKind.TSP, "Held-Karp")
    cfg = cfg or LabelerConfig()
    if inst.n > cfg.max_exact_n:
        raise SizeError(f"Held-Karp is limited to {cfg.max_exact_n} nodes, instance has {inst.n}")
    order, _ = held_karp_matrix(inst.distances)
    return Tour(order)


def _two_opt_pass(d: np.ndarray, t: np.ndarray, rng: np.random.Generator) -> bool:
    n = len(t)
    improved = False
    positions = np.arange(n)
    for i in rng.permutation(n):
        a, b = t[i], t[(i + 1) % n]
        nxt = np.roll(t, -1)
        delta = d[a, t] + d[b, nxt] - d[a, b] - d[t, nxt]
        ok = (positions != i) & (positions != (i - 1) % n) & (positions != (i + 1) % n) & (delta < -_EPS)
        hits = np.flatnonzero(ok)
        if not len(hits):
            continue
        j = int(hits[0])
        lo, hi = (i, j) if i < j else (j, i)
        t[lo + 1:hi + 1] = t[lo + 1:hi + 1][::-1].copy()
        improved = True
    return improved


def _or_opt_pass(d: np.ndarray, t: np.ndarray, rng: np.random.Generator) -> bool:
    n = len(t)
    improved = False
    for i in rng.permutation(n):
        for length in (1, 2, 3):
            if length > n - 3:
                break
            r = np.roll(t, -i)
            seg, rest = r[:length], r[length:]
            s0, s1 = seg[0], seg[-1]
            removal = d[rest[-1], s0] + d[s1, rest[0]] - d[rest[-1], rest[0]]
            p, q = rest, np.roll(rest, -1)
            base = d[p, q]
            forward = d[p, s0] + d[s1, q] - base - removal
            backward = d[p, s1] + d[s0, q] - base - removal
            # the last slot is where the segment came from
            forward[-1] = 0.0
            hits_f = np.flatnonzero(forward < -_EPS)
            hits_b = np.flatnonzero(backward < -_EPS)
            if not len(hits_f) and not len(hits_b):
                continue
            kf = int(hits_f[0]) if len(hits_f) else len(rest)
            kb = int(hits_b[0]) if len(hits_b) else len(rest)
            k, piece = (kf, seg) if kf <= kb else (kb, seg[::-1])
            t[:] = np.concatenate([rest[:k + 1], piece, rest[k + 1:]])
            improved = True
            break
    return improved


def improve_cycle(d: np.ndarray, cycle: Sequence[int], rounds: int, seed=None) -> List[int]:
    """2-opt and Or-opt passes over a closed cycle until a full pass finds nothing or rounds run out."""
    t = np.array(cycle, dtype=np.int64)
    if len(t) < 4:
        return t.tolist()
    rng = np.random.default_rng(seed)
    for _ in range(rounds):
        changed = _two_opt_pass(d, t, rng)
        changed = _or_opt_pass(d, t, rng) or changed
        if not changed:
            break
    return t.tolist()


def local_search_label(inst: Instance, start: Tour, cfg: Optional[LabelerConfig] = None, seed=None) -> Tour:
    _require(inst, ProblemKind.TSP, "local search")
    cfg = cfg or LabelerConfig(mode=LabelMode.LOCAL_SEARCH)
    if len(start) != inst.n:
        raise ValidationError(f"start tour covers {len(start)} nodes, instance has {inst.n}")
    return Tour(improve_cycle(inst.distances, start.order, cfg.ls_rounds, seed))


def label_route_plan(inst: Instance, cfg: Optional[LabelerConfig] = None, seed=None) -> RoutePlan:
    """Sweep, then improve every route on its own (depot plus customers)."""
    _require(inst, ProblemKind.CVRP, "route labelling")
    cfg = cfg or LabelerConfig(mode=LabelMode.LOCAL_SEARCH)
    d = inst.distances
    rng = np.random.default_rng(seed)
    routes = []
    for route in sweep(inst).routes:
        nodes = [0] + list(route)
        if cfg.mode is LabelMode.EXACT_DP and len(nodes) <= cfg.max_exact_n:
            local, _ = held_karp_matrix(d[np.ix_(nodes, nodes)])
            cycle = [nodes[v] for v in local]
        else:
            cycle = improve_cycle(d, nodes, cfg.ls_rounds, rng)
        pos = cycle.index(0)
        routes.append(cycle[pos + 1:] + cycle[:pos])
    return RoutePlan(routes)


def label_instance(inst: Instance, cfg: LabelerConfig, seed=None) -> Solution:
    if inst.is_cvrp:
        return label_route_plan(inst, cfg, seed)
    if cfg.mode is LabelMode.EXACT_DP:
        return held_karp(inst, cfg)
    rng = np.random.default_rng(seed)
    return local_search_label(inst, random_insertion(inst, rng), cfg, rng)


def solution_to_dict(name: str, solution: Solution) -> dict:
    if isinstance(solution, Tour):
        return {"instance_name": name, "order": list(solution.order)}
    return {"instance_name": name, "routes": [list(r) for r in solution.routes]}


def solution_from_dict(doc: dict) -> Solution:
    if "order" in doc:
        return Tour(doc["order"])
    if "routes" in doc:
        return RoutePlan(doc["routes"])
    raise ValidationError(f"label for {doc.get('instance_name')!r} has neither order nor routes")


def write_labels(path: Union[str, Path], labels: Iterable[Tuple[str, Solution]]) -> int:
    count = write_jsonl(path, (solution_to_dict(name, sol) for name, sol in labels))
    logger.info(f"Wrote {count} labels to {path}")
    return count


def read_labels(path: Union[str, Path]) -> Dict[str, Solution]:
    return {doc["instance_name"]: solution_from_dict(doc) for doc in read_jsonl(path)}
