"""
Routing problem instances and solutions.

Holds the TSP/CVRP instance type, the two solution representations, distance
kernels (exact Euclidean and the two TSPLIB95 integer conventions), objective
and gap computation, TSPLIB/CVRPLIB text parsers and writers, the synthetic
uniform generator and the JSON-lines dataset format.
"""

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
from loguru import logger
from scipy.spatial.distance import cdist

from .errors import (
    DomainError,
    KindError,
    ParseError,
    UnsupportedFormatError,
    ValidationError,
)
from .utils import read_jsonl, write_jsonl


class ProblemKind(str, Enum):
    TSP = "tsp"
    CVRP = "cvrp"


class DistanceKind(str, Enum):
    EXACT_EUCLIDEAN = "EXACT_2D"
    EUC_2D_ROUNDED = "EUC_2D"
    CEIL_2D = "CEIL_2D"


# EXACT_2D is not part of TSPLIB95; it marks generated corpora on disk.
_EDGE_WEIGHT_TYPES = {
    "EUC_2D": DistanceKind.EUC_2D_ROUNDED,
    "CEIL_2D": DistanceKind.CEIL_2D,
    "EXACT_2D": DistanceKind.EXACT_EUCLIDEAN,
}


def _apply_rounding(d, kind: DistanceKind):
    if kind is DistanceKind.EUC_2D_ROUNDED:
        # TSPLIB95 nint()
        return np.floor(d + 0.5)
    if kind is DistanceKind.CEIL_2D:
        return np.ceil(d)
    return d


@dataclass(frozen=True, eq=False)
class Instance:
    kind: ProblemKind
    coords: np.ndarray
    demands: Optional[np.ndarray] = None
    capacity: Optional[int] = None
    distance_kind: DistanceKind = DistanceKind.EXACT_EUCLIDEAN
    name: str = ""

    def __post_init__(self):
        kind = ProblemKind(self.kind)
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValidationError(f"coords must be an (n, 2) array, got shape {coords.shape}")
        coords.flags.writeable = False
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "distance_kind", DistanceKind(self.distance_kind))

        n = len(coords)
        if kind is ProblemKind.TSP:
            if n < 3:
                raise ValidationError(f"a TSP instance needs at least 3 nodes, got {n}")
            if self.demands is not None or self.capacity is not None:
                raise ValidationError("TSP instances carry no demands or capacity")
            return

        if n < 3:
            raise ValidationError(f"a CVRP instance needs a depot and at least 2 customers, got {n} nodes")
        if self.demands is None or self.capacity is None:
            raise ValidationError("CVRP instances need demands and a capacity")
        demands = np.array(self.demands, dtype=np.int64)
        if demands.shape != (n,):
            raise ValidationError(f"expected {n} demands, got {demands.shape}")
        capacity = int(self.capacity)
        if capacity <= 0:
            raise ValidationError(f"capacity must be positive, got {capacity}")
        if demands[0] != 0:
            raise ValidationError(f"depot demand must be 0, got {demands[0]}")
        if (demands < 0).any():
            raise ValidationError("demands must be non-negative")
        over = np.flatnonzero(demands > capacity)
        if len(over):
            raise ValidationError(
                f"customer {int(over[0])} has demand {int(demands[over[0]])} above capacity {capacity}"
            )
        demands.flags.writeable = False
        object.__setattr__(self, "demands", demands)
        object.__setattr__(self, "capacity", capacity)

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def is_cvrp(self) -> bool:
        return self.kind is ProblemKind.CVRP

    @property
    def nodes(self) -> List[int]:
        """Nodes a solution has to visit: every node for TSP, customers for CVRP."""
        return list(range(1, self.n)) if self.is_cvrp else list(range(self.n))

    @cached_property
    def distances(self) -> np.ndarray:
        d = _apply_rounding(cdist(self.coords, self.coords), self.distance_kind)
        d.flags.writeable = False
        return d


@dataclass(frozen=True)
class Tour:
    order: Tuple[int, ...]

    def __post_init__(self):
        order = tuple(int(v) for v in self.order)
        if sorted(order) != list(range(len(order))):
            raise ValidationError("tour order is not a permutation of 0..n-1")
        object.__setattr__(self, "order", order)

    def __len__(self) -> int:
        return len(self.order)

    def reversed(self) -> "Tour":
        return Tour(self.order[::-1])

    def rotated(self, start: int) -> "Tour":
        pos = self.order.index(start)
        return Tour(self.order[pos:] + self.order[:pos])


@dataclass(frozen=True)
class RoutePlan:
    routes: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "routes", tuple(tuple(int(v) for v in r) for r in self.routes))

    def __len__(self) -> int:
        return len(self.routes)

    def customers(self) -> List[int]:
        return [v for route in self.routes for v in route]


Solution = Union[Tour, RoutePlan]


@dataclass
class EvalRecord:
    name: str
    objective: float
    reference: Optional[float] = None
    gap: Optional[float] = None
    wall_time: float = 0.0


def distance(inst: Instance, i: int, j: int) -> float:
    n = inst.n
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"node index out of range for {n} nodes: ({i}, {j})")
    dx = inst.coords[i, 0] - inst.coords[j, 0]
    dy = inst.coords[i, 1] - inst.coords[j, 1]
    return float(_apply_rounding(math.sqrt(dx * dx + dy * dy), inst.distance_kind))


def validate_tour(inst: Instance, t: Tour) -> None:
    if inst.kind is not ProblemKind.TSP:
        raise KindError(f"tour given for a {inst.kind.value} instance")
    if len(t) != inst.n:
        raise ValidationError(f"tour covers {len(t)} nodes, instance has {inst.n}")


def tour_length(inst: Instance, t: Tour) -> float:
    validate_tour(inst, t)
    order = np.asarray(t.order)
    return float(inst.distances[order, np.roll(order, -1)].sum())


def validate_route_plan(inst: Instance, r: RoutePlan) -> None:
    if not inst.is_cvrp:
        raise KindError(f"route plan given for a {inst.kind.value} instance")
    seen = np.zeros(inst.n, dtype=bool)
    for k, route in enumerate(r.routes):
        if not route:
            raise ValidationError(f"route {k} is empty")
        load = 0
        for v in route:
            if not 1 <= v < inst.n:
                raise ValidationError(f"route {k} visits invalid customer {v}")
            if seen[v]:
                raise ValidationError(f"customer {v} is visited twice")
            seen[v] = True
            load += int(inst.demands[v])
        if load > inst.capacity:
            raise ValidationError(f"route {k} carries {load} above capacity {inst.capacity}")
    missing = np.flatnonzero(~seen[1:]) + 1
    if len(missing):
        raise ValidationError(f"{len(missing)} customers are not served, first is {int(missing[0])}")


def route_cost(inst: Instance, r: RoutePlan) -> float:
    validate_route_plan(inst, r)
    d = inst.distances
    total = 0.0
    for route in r.routes:
        path = np.array((0,) + route + (0,))
        total += float(d[path[:-1], path[1:]].sum())
    return total


def objective(inst: Instance, solution: Solution) -> float:
    if isinstance(solution, Tour):
        return tour_length(inst, solution)
    return route_cost(inst, solution)


def gap(objective: float, reference: float) -> float:
    if not reference > 0:
        raise DomainError(f"reference objective must be positive, got {reference}")
    return (objective - reference) / reference


# TSPLIB95 / CVRPLIB text formats

def _scan(text: Union[bytes, str]) -> Tuple[Dict[str, str], Dict[str, List[Tuple[int, List[str]]]]]:
    """Split a TSPLIB-style file into header fields and data sections."""
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    headers: Dict[str, str] = {}
    sections: Dict[str, List[Tuple[int, List[str]]]] = {}
    current = None
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.upper() == "EOF":
            break
        first = line.split()[0].rstrip(":").upper()
        if first.endswith("_SECTION"):
            current = first
            sections[current] = []
            continue
        if first[0].isalpha():
            if ":" not in line:
                raise ParseError(f"expected 'KEY : VALUE', got {line!r}", line_no)
            key, value = line.split(":", 1)
            headers[key.strip().upper()] = value.strip()
            current = None
            continue
        if current is None:
            raise ParseError(f"data line outside of any section: {line!r}", line_no)
        sections[current].append((line_no, line.split()))
    return headers, sections


def _header_int(headers: Dict[str, str], key: str) -> int:
    if key not in headers:
        raise ParseError(f"missing {key}")
    try:
        return int(float(headers[key]))
    except ValueError:
        raise ParseError(f"{key} is not an integer: {headers[key]!r}")


def _distance_kind(headers: Dict[str, str]) -> DistanceKind:
    if "EDGE_WEIGHT_TYPE" not in headers:
        raise ParseError("missing EDGE_WEIGHT_TYPE")
    ewt = headers["EDGE_WEIGHT_TYPE"].upper()
    if ewt not in _EDGE_WEIGHT_TYPES:
        raise UnsupportedFormatError(f"unsupported EDGE_WEIGHT_TYPE {ewt}")
    return _EDGE_WEIGHT_TYPES[ewt]


def _section(sections, name: str):
    if name not in sections:
        raise ParseError(f"missing {name}")
    return sections[name]


def _read_coords(sections, dimension: int) -> Tuple[List[int], np.ndarray]:
    ids, coords = [], []
    for line_no, tokens in _section(sections, "NODE_COORD_SECTION"):
        if len(tokens) != 3:
            raise ParseError(f"expected 'id x y', got {' '.join(tokens)!r}", line_no)
        try:
            ids.append(int(tokens[0]))
            coords.append((float(tokens[1]), float(tokens[2])))
        except ValueError:
            raise ParseError(f"bad coordinate row {' '.join(tokens)!r}", line_no)
    if len(ids) != dimension:
        raise ParseError(f"DIMENSION is {dimension} but {len(ids)} coordinates were read")
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate node ids in NODE_COORD_SECTION")
    return ids, np.array(coords, dtype=np.float64)


def parse_tsplib(text: Union[bytes, str]) -> Instance:
    headers, sections = _scan(text)
    problem_type = headers.get("TYPE", "TSP").split()[0].upper()
    if problem_type != "TSP":
        raise UnsupportedFormatError(f"unsupported TYPE {problem_type}")
    kind = _distance_kind(headers)
    _, coords = _read_coords(sections, _header_int(headers, "DIMENSION"))
    return Instance(ProblemKind.TSP, coords, distance_kind=kind, name=headers.get("NAME", ""))


def parse_cvrplib(text: Union[bytes, str]) -> Instance:
    headers, sections = _scan(text)
    capacity = _header_int(headers, "CAPACITY")
    dimension = _header_int(headers, "DIMENSION")
    kind = _distance_kind(headers)
    ids, coords = _read_coords(sections, dimension)

    demand_by_id: Dict[int, int] = {}
    for line_no, tokens in _section(sections, "DEMAND_SECTION"):
        if len(tokens) != 2:
            raise ParseError(f"expected 'id demand', got {' '.join(tokens)!r}", line_no)
        try:
            demand_by_id[int(tokens[0])] = int(tokens[1])
        except ValueError:
            raise ParseError(f"bad demand row {' '.join(tokens)!r}", line_no)

    depots = []
    for line_no, tokens in _section(sections, "DEPOT_SECTION"):
        for tok in tokens:
            try:
                value = int(tok)
            except ValueError:
                raise ParseError(f"bad depot id {tok!r}", line_no)
            if value == -1:
                break
            depots.append(value)
    if not depots:
        raise ParseError("DEPOT_SECTION lists no depot")
    depot = depots[0]
    if depot not in ids:
        raise ParseError(f"depot {depot} has no coordinates")
    missing = [i for i in ids if i not in demand_by_id]
    if missing:
        raise ParseError(f"no demand for node {missing[0]}")

    # depot first, customers in file order
    order = [ids.index(depot)] + [k for k, i in enumerate(ids) if i != depot]
    demands = [demand_by_id[ids[k]] for k in order]
    if demands[0] != 0:
        raise ValidationError(f"depot demand must be 0, got {demands[0]}")
    return Instance(
        ProblemKind.CVRP,
        coords[order],
        demands=np.array(demands),
        capacity=capacity,
        distance_kind=kind,
        name=headers.get("NAME", ""),
    )


def _edge_weight_type(kind: DistanceKind) -> str:
    return {v: k for k, v in _EDGE_WEIGHT_TYPES.items()}[kind]


def serialize_tsplib(inst: Instance) -> str:
    if inst.is_cvrp:
        raise KindError("use serialize_cvrplib for CVRP instances")
    lines = [
        f"NAME : {inst.name or 'unnamed'}",
        "TYPE : TSP",
        f"DIMENSION : {inst.n}",
        f"EDGE_WEIGHT_TYPE : {_edge_weight_type(inst.distance_kind)}",
        "NODE_COORD_SECTION",
    ]
    lines += [f"{i + 1} {x!r} {y!r}" for i, (x, y) in enumerate(inst.coords.tolist())]
    lines.append("EOF")
    return "\n".join(lines) + "\n"


def serialize_cvrplib(inst: Instance) -> str:
    if not inst.is_cvrp:
        raise KindError("use serialize_tsplib for TSP instances")
    lines = [
        f"NAME : {inst.name or 'unnamed'}",
        "TYPE : CVRP",
        f"DIMENSION : {inst.n}",
        f"EDGE_WEIGHT_TYPE : {_edge_weight_type(inst.distance_kind)}",
        f"CAPACITY : {inst.capacity}",
        "NODE_COORD_SECTION",
    ]
    lines += [f"{i + 1} {x!r} {y!r}" for i, (x, y) in enumerate(inst.coords.tolist())]
    lines.append("DEMAND_SECTION")
    lines += [f"{i + 1} {int(q)}" for i, q in enumerate(inst.demands)]
    lines += ["DEPOT_SECTION", "1", "-1", "EOF"]
    return "\n".join(lines) + "\n"


def load_instance_file(path: Union[str, Path]) -> Instance:
    """Read a .tsp or .vrp benchmark file, picking the parser from its TYPE field."""
    path = Path(path)
    try:
        raw = path.read_bytes()
        headers, _ = _scan(raw)
        problem_type = headers.get("TYPE", "TSP").split()[0].upper()
        inst = parse_cvrplib(raw) if problem_type == "CVRP" else parse_tsplib(raw)
        if not inst.name:
            inst = Instance(inst.kind, inst.coords, inst.demands, inst.capacity, inst.distance_kind, path.stem)
        return inst
    except Exception as e:
        logger.error(f"Failed to load instance {path}: {e}")
        raise


# Synthetic corpora

_DEFAULT_CAPACITIES = {10: 20, 20: 30, 50: 40, 100: 50, 200: 80, 500: 100, 1000: 250}


@dataclass(frozen=True)
class DemandConfig:
    low: int = 1
    high: int = 9
    capacity: Optional[int] = None
    capacities: Dict[int, int] = field(default_factory=lambda: dict(_DEFAULT_CAPACITIES))

    def capacity_for(self, n_customers: int) -> int:
        if self.capacity is not None:
            return self.capacity
        sizes = sorted(self.capacities)
        below = [s for s in sizes if s <= n_customers]
        return self.capacities[below[-1] if below else sizes[0]]

    @classmethod
    def from_config(cls, config: dict) -> "DemandConfig":
        section = config.get("instances", {}) or {}
        capacities = section.get("capacities") or _DEFAULT_CAPACITIES
        return cls(
            low=int(section.get("demand_low", 1)),
            high=int(section.get("demand_high", 9)),
            capacity=section.get("capacity"),
            capacities={int(k): int(v) for k, v in capacities.items()},
        )


def gen_uniform(
    kind: ProblemKind,
    n: int,
    seed: Union[int, np.random.SeedSequence],
    demand_cfg: Optional[DemandConfig] = None,
    name: Optional[str] = None,
) -> Instance:
    """Uniform [0, 1]^2 instance; for CVRP, n counts customers and a depot is added."""
    kind = ProblemKind(kind)
    rng = np.random.default_rng(seed)
    if name is None:
        name = f"{kind.value}{n}_{seed}" if isinstance(seed, int) else f"{kind.value}{n}"
    if kind is ProblemKind.TSP:
        if n < 3:
            raise DomainError(f"TSP needs n >= 3, got {n}")
        return Instance(kind, rng.random((n, 2)), name=name)

    if n < 2:
        raise DomainError(f"CVRP needs at least 2 customers, got {n}")
    demand_cfg = demand_cfg or DemandConfig()
    coords = rng.random((n + 1, 2))
    demands = np.concatenate([[0], rng.integers(demand_cfg.low, demand_cfg.high + 1, size=n)])
    return Instance(kind, coords, demands=demands, capacity=demand_cfg.capacity_for(n), name=name)


def gen_dataset(
    kind: ProblemKind, n: int, count: int, seed: int, demand_cfg: Optional[DemandConfig] = None
) -> List[Instance]:
    kind = ProblemKind(kind)
    children = np.random.SeedSequence(seed).spawn(count)
    return [
        gen_uniform(kind, n, child, demand_cfg, name=f"{kind.value}{n}_s{seed}_{i:06d}")
        for i, child in enumerate(children)
    ]


def instance_to_dict(inst: Instance) -> dict:
    doc = {"name": inst.name, "kind": inst.kind.value, "coords": inst.coords.tolist()}
    if inst.is_cvrp:
        doc["demands"] = [int(q) for q in inst.demands]
        doc["capacity"] = inst.capacity
    if inst.distance_kind is not DistanceKind.EXACT_EUCLIDEAN:
        doc["distance_kind"] = inst.distance_kind.value
    return doc


def instance_from_dict(doc: dict) -> Instance:
    return Instance(
        ProblemKind(doc["kind"]),
        np.array(doc["coords"], dtype=np.float64),
        demands=doc.get("demands"),
        capacity=doc.get("capacity"),
        distance_kind=DistanceKind(doc.get("distance_kind", DistanceKind.EXACT_EUCLIDEAN.value)),
        name=doc.get("name", ""),
    )


def write_dataset(path: Union[str, Path], instances: Iterable[Instance]) -> int:
    return write_jsonl(path, (instance_to_dict(inst) for inst in instances))


def read_dataset(path: Union[str, Path]) -> List[Instance]:
    instances = [instance_from_dict(doc) for doc in read_jsonl(path)]
    logger.info(f"Loaded {len(instances)} instances from {path}")
    return instances


def read_bks(path: Union[str, Path]) -> Dict[str, float]:
    """Best-known objectives: one 'name objective' pair per line."""
    bks: Dict[str, float] = {}
    with open(path, "r") as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"expected 'name objective', got {line!r}", line_no)
            try:
                bks[parts[0]] = float(parts[1])
            except ValueError:
                raise ParseError(f"bad objective {parts[1]!r}", line_no)
    return bks


def family_of(name: str) -> str:
    match = re.match(r"[A-Za-z]+", name)
    return match.group(0) if match else name
