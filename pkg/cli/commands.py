"""
Subcommand implementations.

Each `cmd_*` takes the parsed argparse namespace and the loaded YAML config,
does its work through the `core` package and returns the paths it wrote;
`main.py` wraps every call with logging, the run manifest and exit codes.
"""

from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from core.baselines import (
    LabelerConfig,
    LabelMode,
    label_instance,
    random_insertion,
    read_labels,
    solution_from_dict,
    solution_to_dict,
    sweep,
    write_labels,
)
from core.errors import ConsistencyError, KindError, UsageError, ValidationError
from core.instances import (
    DemandConfig,
    Instance,
    ProblemKind,
    Solution,
    Tour,
    gen_dataset,
    load_instance_file,
    objective,
    read_bks,
    read_dataset,
    write_dataset,
)
from core.model import HyperParams, load_checkpoint
from core.parallel import run_ordered
from core.search import (
    ExactRepair,
    SearchConfig,
    Snapshot,
    evaluate,
    render_report,
    solve,
    write_report,
    write_trace,
)
from core.training import TrainConfig, fine_tune, train
from core.utils import cycle_edges, draw_panels, draw_solution, read_jsonl, routes_edges, write_jsonl


def _require(args, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def load_instances(path) -> List[Instance]:
    """JSON-lines dataset, a single .tsp/.vrp file, or a directory of them."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".tsp", ".vrp"))
        return [load_instance_file(p) for p in files]
    if path.suffix.lower() in (".tsp", ".vrp"):
        return [load_instance_file(path)]
    return read_dataset(path)


def _pairs(instances: Sequence[Instance], labels: Dict[str, Solution]) -> List[Tuple[Instance, Solution]]:
    missing = [inst.name for inst in instances if inst.name not in labels]
    if missing:
        raise ConsistencyError(f"{len(missing)} instances have no label, first is {missing[0]!r}")
    return [(inst, labels[inst.name]) for inst in instances]


def _instance_seeds(seed: int, count: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def cmd_gen(args, config: dict) -> List[Path]:
    _require(args, "kind", "n", "out")
    kind = ProblemKind(args.kind)
    smallest = 3 if kind is ProblemKind.TSP else 2
    if args.n < smallest:
        raise UsageError(f"--n must be at least {smallest} for {kind.value}, got {args.n}")
    if args.count < 1:
        raise UsageError(f"--count must be positive, got {args.count}")
    instances = gen_dataset(kind, args.n, args.count, args.seed, DemandConfig.from_config(config))
    write_dataset(args.out, instances)
    logger.success(f"Generated {len(instances)} {kind.value}{args.n} instances into {args.out}")
    return [Path(args.out)]


def cmd_label(args, config: dict) -> List[Path]:
    _require(args, "data", "out")
    cfg = LabelerConfig.from_config(config)
    if args.mode:
        cfg = replace(cfg, mode=LabelMode(args.mode))
    instances = load_instances(args.data)
    seeds = _instance_seeds(args.seed, len(instances))
    labels = run_ordered(lambda job: label_instance(job[0], cfg, job[1]), list(zip(instances, seeds)),
                         args.workers)
    write_labels(args.out, ((inst.name, lab) for inst, lab in zip(instances, labels)))
    logger.success(f"Labelled {len(labels)} instances ({cfg.mode.value})")
    return [Path(args.out)]


def cmd_train(args, config: dict) -> List[Path]:
    _require(args, "data", "labels", "out")
    pairs = _pairs(load_instances(args.data), read_labels(args.labels))
    hp = HyperParams.from_config(config, pairs[0][0].kind)
    cfg = TrainConfig.from_config(config)
    overrides = {"seed": args.seed, "checkpoint_dir": str(args.out), "workers": args.workers}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.k_min is not None:
        overrides["k_min"] = args.k_min
    cfg = replace(cfg, **overrides)
    if args.init:
        result = fine_tune(cfg, hp, args.init, pairs)
    else:
        result = train(cfg, hp, pairs)
    return [Path(args.out), result.best_checkpoint, result.last_checkpoint]


def _search_config(args, config: dict) -> SearchConfig:
    cfg = SearchConfig.from_config(config)
    overrides = {"seed": args.seed}
    if args.iters is not None:
        overrides["T"] = args.iters
    if args.k_min is not None:
        overrides["k_min"] = args.k_min
    if args.k_max is not None:
        overrides["k_max"] = args.k_max
    if getattr(args, "snapshots", None):
        overrides["snapshots"] = tuple(int(s) for s in str(args.snapshots).split(","))
    return replace(cfg, **overrides)


SolveFn = Callable[[Instance, int], Tuple[Solution, Optional[object]]]


def _solver(args, config: dict, cfg: SearchConfig) -> SolveFn:
    """Map --solver to a function (instance, seed) -> (solution, trace or None)."""
    name = args.solver or "drhg"
    if name == "drhg":
        _require(args, "ckpt")
        model = load_checkpoint(args.ckpt)
        model.eval()
        return lambda inst, seed: solve(inst, model, replace(cfg, seed=seed))
    if name == "exact":
        return lambda inst, seed: solve(inst, ExactRepair(), replace(cfg, seed=seed))
    if name == "initial":
        return lambda inst, seed: (sweep(inst) if inst.is_cvrp else random_insertion(inst, seed), None)
    if name == "labels":
        _require(args, "labels")
        labels = read_labels(args.labels)
        return lambda inst, seed: (labels[inst.name], None)
    raise UsageError(f"unknown solver {name!r}")


def _snapshot_doc(name: str, snap: Snapshot) -> dict:
    doc = {"instance_name": name, "iteration": snap.iteration, "destroyed": snap.destroyed,
           "segments": [list(s) for s in snap.segments]}
    doc["repaired"] = solution_to_dict(name, snap.repaired)
    doc["before"] = solution_to_dict(name, snap.before)
    return doc


def cmd_solve(args, config: dict) -> List[Path]:
    _require(args, "data", "out")
    instances = load_instances(args.data)
    cfg = _search_config(args, config)
    solve_fn = _solver(args, config, cfg)
    seeds = _instance_seeds(args.seed, len(instances))
    results = run_ordered(lambda job: solve_fn(*job), list(zip(instances, seeds)), args.workers)

    docs = []
    outputs = [Path(args.out)]
    trace_dir = Path(args.trace) if args.trace else None
    for inst, (solution, trace) in zip(instances, results):
        doc = solution_to_dict(inst.name, solution)
        doc["objective"] = round(objective(inst, solution), 3)
        docs.append(doc)
        if trace_dir is not None and trace is not None:
            write_trace(trace_dir / f"{inst.name}.csv", trace)
            outputs.append(trace_dir / f"{inst.name}.csv")
            if trace.snapshots:
                snap_path = trace_dir / f"{inst.name}.snapshots.jsonl"
                write_jsonl(snap_path, (_snapshot_doc(inst.name, s) for s in trace.snapshots))
                outputs.append(snap_path)
    write_jsonl(args.out, docs)
    mean = float(np.mean([d["objective"] for d in docs])) if docs else float("nan")
    logger.success(f"Solved {len(docs)} instances, mean objective {mean:.3f}")
    return outputs


def _references(args, instances: Sequence[Instance]) -> Dict[str, float]:
    if args.bks:
        return read_bks(args.bks)
    if args.labels:
        labels = read_labels(args.labels)
        return {inst.name: objective(inst, labels[inst.name]) for inst in instances if inst.name in labels}
    return {}


def cmd_eval(args, config: dict) -> List[Path]:
    _require(args, "data")
    instances = load_instances(args.data)
    refs = _references(args, instances)
    if args.solutions:
        stored = {doc["instance_name"]: solution_from_dict(doc) for doc in read_jsonl(args.solutions)}
        _pairs(instances, stored)
        solver = lambda inst, rng: stored[inst.name]
    else:
        solve_fn = _solver(args, config, _search_config(args, config))
        solver = lambda inst, rng: solve_fn(inst, int(rng.integers(2 ** 32)))[0]
    report = evaluate(instances, solver, refs, seed=args.seed, workers=args.workers)
    print(render_report(report))
    if args.out:
        write_report(args.out, report)
        return [Path(args.out)]
    return []


def _edges(inst: Instance, solution: Solution):
    if isinstance(solution, Tour):
        return cycle_edges(inst.coords, solution.order)
    return routes_edges(inst.coords, solution.routes)


def _checked_solution(inst: Instance, solution: Solution) -> Solution:
    try:
        objective(inst, solution)
    except (ValidationError, KindError) as e:
        raise ConsistencyError(f"solution does not match instance {inst.name!r}: {e}") from e
    return solution


def cmd_plot(args, config: dict) -> List[Path]:
    _require(args, "data", "out")
    if not args.solutions and not args.trace:
        raise UsageError("plot needs --solutions or --trace")
    by_name = {inst.name: inst for inst in load_instances(args.data)}
    out = Path(args.out)

    def _instance(name: str) -> Instance:
        if name not in by_name:
            raise ConsistencyError(f"no instance named {name!r} in {args.data}")
        return by_name[name]

    if args.trace:
        snaps = list(read_jsonl(args.trace))
        if not snaps:
            raise UsageError(f"{args.trace} holds no snapshots")
        count = args.panels or len(snaps)
        if count > len(snaps):
            raise UsageError(f"--panels {count} exceeds the {len(snaps)} recorded snapshots")
        picks = np.unique(np.linspace(0, len(snaps) - 1, count).round().astype(int))
        inst = _instance(snaps[0]["instance_name"])
        panels = []
        for i in picks:
            snap = snaps[i]
            repaired = _checked_solution(inst, solution_from_dict(snap["repaired"]))
            fixed = [edge for seg in snap["segments"] for edge in cycle_edges(inst.coords, seg)[:-1]]
            panels.append({"edges": _edges(inst, repaired), "destroyed": snap["destroyed"], "fixed": fixed,
                           "title": f"iteration {snap['iteration']}"})
        path = draw_panels(out, inst.coords, panels, depot=inst.is_cvrp)
        return [path]

    docs = list(read_jsonl(args.solutions))
    paths = []
    for doc in docs:
        inst = _instance(doc["instance_name"])
        solution = _checked_solution(inst, solution_from_dict(doc))
        target = out if out.suffix == ".svg" and len(docs) == 1 else out / f"{inst.name}.svg"
        paths.append(draw_solution(target, inst.coords, _edges(inst, solution), title=inst.name,
                                   depot=inst.is_cvrp))
    logger.info(f"Drew {len(paths)} solutions")
    return paths


COMMANDS = {
    "gen": cmd_gen,
    "label": cmd_label,
    "train": cmd_train,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "plot": cmd_plot,
}
