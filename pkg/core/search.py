"""
Iterative destroy-and-repair search.

Starting from random insertion (TSP) or sweep (CVRP), every iteration
destroys the k nodes nearest a random center of the current solution,
reduces the damage to a hyper-graph, repairs it with a policy (the trained
model, or an exact oracle for small reduced problems) and restores a full
solution. `evaluate` runs any solver over a set of instances and compares
against reference objectives.
"""

import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .baselines import held_karp_matrix, random_insertion, sweep
from .errors import ConfigError, ConsistencyError, DegenerateInputError, KindError, SizeError
from .hypergraph import (
    ClusterDestroy,
    DestroyOperator,
    HyperGraph,
    connection_length,
    fixed_length,
    reduce,
    restore,
    transform_coords,
)
from .instances import EvalRecord, Instance, ProblemKind, Solution, family_of, gap, objective
from .model import CVRP_DEPOT_INPUT_DIM, DRHGModel, RolloutMode, rollout
from .parallel import run_ordered
from .utils import format_table, write_csv


class Acceptance(str, Enum):
    GREEDY_IMPROVE = "greedy_improve"
    ALWAYS = "always"


@dataclass(frozen=True)
class SearchConfig:
    T: int = 1000
    k_min: int = 20
    k_max: Optional[int] = None
    mode: RolloutMode = RolloutMode.GREEDY
    acceptance: Acceptance = Acceptance.GREEDY_IMPROVE
    seed: int = 0
    debug: bool = False
    snapshots: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mode", RolloutMode(self.mode))
        object.__setattr__(self, "acceptance", Acceptance(self.acceptance))
        object.__setattr__(self, "snapshots", tuple(int(s) for s in self.snapshots))
        if self.T < 0:
            raise ConfigError(f"iteration count must be non-negative, got {self.T}")
        if self.k_min < 1:
            raise ConfigError(f"k_min must be at least 1, got {self.k_min}")

    def k_range(self, inst: Instance) -> Tuple[int, int]:
        """Destroyed-node count range; k_min is clamped to k_max on small instances."""
        routable = len(inst.nodes)
        cap = 200 if inst.is_cvrp else 1000
        hi = min(self.k_max if self.k_max is not None else cap, routable)
        return min(self.k_min, hi), hi

    @classmethod
    def from_config(cls, config: dict) -> "SearchConfig":
        section = config.get("search", {}) or {}
        return cls(
            T=int(section.get("iterations", 1000)),
            k_min=int(section.get("k_min", 20)),
            k_max=section.get("k_max"),
            mode=RolloutMode(section.get("mode", RolloutMode.GREEDY.value)),
            acceptance=Acceptance(section.get("acceptance", Acceptance.GREEDY_IMPROVE.value)),
            seed=int(section.get("seed", 0)),
            debug=bool(section.get("debug", False)),
        )


@dataclass
class TraceRecord:
    iteration: int
    k: int
    center: int
    objective_after: float
    accepted: bool
    best_so_far: float
    millis: float


@dataclass
class Snapshot:
    iteration: int
    before: Solution
    destroyed: List[int]
    segments: List[Tuple[int, ...]]
    repaired: Solution


@dataclass
class SearchTrace:
    initial_objective: float
    records: List[TraceRecord] = field(default_factory=list)
    snapshots: List[Snapshot] = field(default_factory=list)

    @property
    def best_objective(self) -> float:
        return self.records[-1].best_so_far if self.records else self.initial_objective


class RepairPolicy(ABC):
    """Turns a hyper-graph into a row order (and CVRP route starts)."""

    @abstractmethod
    def repair(self, inst: Instance, hg: HyperGraph,
               rng: np.random.Generator) -> Tuple[List[int], Optional[List[int]]]:
        ...


class ModelRepair(RepairPolicy):
    def __init__(self, model: DRHGModel, mode: RolloutMode = RolloutMode.GREEDY):
        self.model = model
        self.mode = RolloutMode(mode)

    def repair(self, inst, hg, rng):
        try:
            hg = transform_coords(hg)
        except DegenerateInputError:
            logger.debug("Degenerate hyper-graph, repairing untransformed coordinates")
        result = rollout(self.model, hg, self.mode, seed=rng)
        return result.order, result.route_starts


class ExactRepair(RepairPolicy):
    """Optimal reduced tour by Held-Karp, hyper-edges held by a large negative link cost."""

    def __init__(self, max_m: int = 12):
        self.max_m = max_m

    def repair(self, inst, hg, rng):
        if inst.is_cvrp:
            raise KindError("exact repair handles TSP hyper-graphs only")
        if hg.m > self.max_m:
            raise SizeError(f"exact repair is limited to {self.max_m} rows, got {hg.m}")
        dist = np.array(inst.distances[np.ix_(hg.origin, hg.origin)])
        big = 1e6 * (float(dist.max()) + 1.0)
        rows = np.flatnonzero(hg.partner >= 0)
        dist[rows, hg.partner[rows]] = -big
        order, _ = held_karp_matrix(dist)
        return order, None


def _initial(inst: Instance, rng: np.random.Generator) -> Solution:
    return sweep(inst) if inst.is_cvrp else random_insertion(inst, rng)


def _as_policy(params: Union[DRHGModel, RepairPolicy], cfg: SearchConfig) -> RepairPolicy:
    return params if isinstance(params, RepairPolicy) else ModelRepair(params, cfg.mode)


def search(inst: Instance, repair: RepairPolicy, cfg: SearchConfig, initial: Optional[Solution] = None,
           destroyer: Optional[DestroyOperator] = None) -> Tuple[Solution, SearchTrace]:
    """Run cfg.T destroy-and-repair iterations and return the best solution seen."""
    rng = np.random.default_rng(cfg.seed)
    current = initial if initial is not None else _initial(inst, rng)
    current_obj = objective(inst, current)
    best, best_obj = current, current_obj
    trace = SearchTrace(current_obj)
    destroyer = destroyer or ClusterDestroy()
    lo, hi = cfg.k_range(inst)
    snapshots = set(cfg.snapshots)

    for it in range(cfg.T):
        started = time.perf_counter()
        count = int(rng.integers(lo, hi + 1))
        destruction = destroyer.destroy(inst, current, count, rng)
        hg = reduce(inst, destruction)
        order, starts = repair.repair(inst, hg, rng)
        candidate = restore(inst, hg, order, starts)
        obj = objective(inst, candidate)
        if cfg.debug:
            parts = connection_length(inst, hg, order, starts) + fixed_length(inst, hg)
            if abs(parts - obj) > 1e-9 * max(1.0, obj):
                raise ConsistencyError(f"iteration {it}: restored length {obj} != parts {parts}")

        before = current
        accepted = cfg.acceptance is Acceptance.ALWAYS or obj <= current_obj
        if accepted:
            current, current_obj = candidate, obj
        if obj < best_obj:
            best, best_obj = candidate, obj
        millis = (time.perf_counter() - started) * 1000.0
        center = -1 if destruction.center is None else int(destruction.center)
        trace.records.append(TraceRecord(it, count, center, obj, accepted, best_obj, millis))
        if it in snapshots:
            trace.snapshots.append(Snapshot(it, before, sorted(destruction.destroyed),
                                            list(destruction.segments), candidate))
        logger.debug(f"{inst.name} iter {it}: k={count} obj={obj:.6f} best={best_obj:.6f}")
    return best, trace


def _check_model(inst: Instance, params, kind: ProblemKind) -> None:
    if inst.kind is not kind:
        raise KindError(f"expected a {kind.value} instance, got {inst.kind.value}")
    if isinstance(params, DRHGModel):
        want = (6, CVRP_DEPOT_INPUT_DIM) if kind is ProblemKind.CVRP else (5,)
        if params.hp.input_dim not in want:
            raise ConfigError(f"model input_dim {params.hp.input_dim} does not fit {kind.value} (needs one of {want})")


def solve_tsp(inst: Instance, params: Union[DRHGModel, RepairPolicy],
              cfg: SearchConfig) -> Tuple[Solution, SearchTrace]:
    _check_model(inst, params, ProblemKind.TSP)
    return search(inst, _as_policy(params, cfg), cfg)


def solve_cvrp(inst: Instance, params: Union[DRHGModel, RepairPolicy],
               cfg: SearchConfig) -> Tuple[Solution, SearchTrace]:
    _check_model(inst, params, ProblemKind.CVRP)
    return search(inst, _as_policy(params, cfg), cfg)


def solve(inst: Instance, params, cfg: SearchConfig) -> Tuple[Solution, SearchTrace]:
    return solve_cvrp(inst, params, cfg) if inst.is_cvrp else solve_tsp(inst, params, cfg)


TRACE_HEADER = ("iteration", "k", "center", "objective_after", "accepted", "best_so_far", "millis")


def write_trace(path: Union[str, Path], trace: SearchTrace) -> None:
    write_csv(path, TRACE_HEADER, (
        (r.iteration, r.k, r.center, f"{r.objective_after:.9f}", int(r.accepted), f"{r.best_so_far:.9f}",
         f"{r.millis:.3f}")
        for r in trace.records
    ))


# Evaluation

Solver = Callable[[Instance, np.random.Generator], Solution]


@dataclass
class EvalSummary:
    count: int
    mean_objective: float
    mean_gap: Optional[float]
    objective_variance: float
    non_optimal: int
    total_time: float
    families: Dict[str, Tuple[float, Optional[float]]] = field(default_factory=dict)


@dataclass
class EvalReport:
    records: List[EvalRecord]
    summary: EvalSummary


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def summarize(records: Sequence[EvalRecord]) -> EvalSummary:
    objs = [r.objective for r in records]
    gaps = [r.gap for r in records if r.gap is not None]
    families: Dict[str, Tuple[float, Optional[float]]] = {}
    for fam in sorted({family_of(r.name) for r in records}):
        rows = [r for r in records if family_of(r.name) == fam]
        families[fam] = (
            float(np.mean([r.objective for r in rows])),
            _mean([r.gap for r in rows if r.gap is not None]),
        )
    return EvalSummary(
        count=len(records),
        mean_objective=float(np.mean(objs)) if objs else float("nan"),
        mean_gap=_mean(gaps),
        objective_variance=float(np.var(objs)) if objs else float("nan"),
        non_optimal=sum(1 for g in gaps if g > 1e-9),
        total_time=float(sum(r.wall_time for r in records)),
        families=families,
    )


def evaluate(instances: Sequence[Instance], solver: Solver, references: Dict[str, float],
             seed: int = 0, workers: int = 1) -> EvalReport:
    """Solve every instance (one generator stream each) and score it against its reference."""
    streams = np.random.SeedSequence(seed).spawn(len(instances))

    def _run(job) -> EvalRecord:
        inst, stream = job
        started = time.perf_counter()
        solution = solver(inst, np.random.default_rng(stream))
        wall = time.perf_counter() - started
        obj = objective(inst, solution)
        ref = references.get(inst.name)
        if ref is None:
            logger.warning(f"No reference objective for {inst.name}")
        return EvalRecord(inst.name, obj, ref, gap(obj, ref) if ref is not None else None, wall)

    records = run_ordered(_run, list(zip(instances, streams)), workers)
    return EvalReport(records, summarize(records))


EVAL_HEADER = ("name", "objective", "reference", "gap_percent", "seconds")


def eval_rows(report: EvalReport) -> List[Tuple[str, ...]]:
    rows = [
        (r.name, f"{r.objective:.3f}", "no-reference" if r.reference is None else f"{r.reference:.3f}",
         "no-reference" if r.gap is None else f"{100 * r.gap:.3f}%", f"{r.wall_time:.3f}")
        for r in report.records
    ]
    s = report.summary
    rows.append(("mean", f"{s.mean_objective:.3f}", "",
                 "" if s.mean_gap is None else f"{100 * s.mean_gap:.3f}%", f"{s.total_time:.3f}"))
    return rows


def render_report(report: EvalReport) -> str:
    s = report.summary
    lines = [format_table(EVAL_HEADER, eval_rows(report)), "",
             f"variance {s.objective_variance:.6f}, non-optimal {s.non_optimal}/{s.count}"]
    for fam, (obj, g) in s.families.items():
        lines.append(f"family {fam}: mean objective {obj:.3f}" + ("" if g is None else f", mean gap {100 * g:.3f}%"))
    return "\n".join(lines)


def write_report(path: Union[str, Path], report: EvalReport) -> None:
    write_csv(path, EVAL_HEADER, eval_rows(report))
