"""
Supervised training of the repair policy.

Batches share one hyper-graph size: per batch a target size k is drawn,
every labelled instance gets a random center and the sample-size alignment
picks the destruction prefix that produces exactly k rows (instances where
no prefix hits k are dropped). The loss is the mean negative log-probability
of the label's next row over the steps the model actually decides.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from loguru import logger

from . import numcore as nc
from .errors import ConfigError, DegenerateInputError, TrainingAbort
from .hypergraph import (
    HyperGraph,
    TargetSequence,
    align_sample_size,
    destroy_nodes,
    reduce,
    target_sequence,
    transform_coords,
)
from .instances import Instance, Solution, objective
from .model import DRHGModel, HyperParams, load_checkpoint, read_hyperparams, save_checkpoint
from .parallel import run_ordered
from .search import SearchConfig, evaluate, solve
from .utils import write_csv

PROB_FLOOR = 1e-12
METRICS_HEADER = ("epoch", "mean_loss", "kept_fraction", "val_gap", "lr", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1024
    micro_batch: int = 256
    k_min: int = 20
    k_max_frac: float = 0.8
    lr0: float = 1e-4
    decay: float = 0.97
    seed: int = 0
    augment: bool = True
    val_count: int = 64
    val_iters: int = 50
    workers: int = 1
    checkpoint_dir: str = "checkpoints"

    def __post_init__(self):
        if self.batch_size < 1 or self.micro_batch < 1:
            raise ConfigError("batch_size and micro_batch must be positive")
        if not 0 < self.k_max_frac <= 1:
            raise ConfigError(f"k_max_frac must be in (0, 1], got {self.k_max_frac}")

    def k_range(self, n: int) -> Tuple[int, int]:
        """Inclusive hyper-graph size range for n nodes; a single size when n * k_max_frac <= k_min."""
        hi = max(1, int(np.floor(self.k_max_frac * n)))
        return min(self.k_min, hi), hi

    @classmethod
    def from_config(cls, config: dict) -> "TrainConfig":
        section = config.get("training", {}) or {}
        defaults = cls()
        return cls(**{name: type(getattr(defaults, name))(section[name])
                      for name in defaults.__dataclass_fields__ if name in section})


@dataclass
class TrainingSample:
    features: np.ndarray
    target: np.ndarray
    forced: np.ndarray
    candidates: np.ndarray
    name: str
    center: int
    k: int
    reverse: bool = False


@dataclass
class Batch:
    k: int
    samples: List[TrainingSample]
    kept: int
    total: int

    @property
    def kept_fraction(self) -> float:
        return self.kept / self.total if self.total else 0.0

    def tensors(self, dtype=nc.TRAIN_DTYPE) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        features = torch.as_tensor(np.stack([s.features for s in self.samples]), dtype=dtype)
        targets = torch.as_tensor(np.stack([s.target for s in self.samples]), dtype=torch.int64)
        forced = torch.as_tensor(np.stack([s.forced[1:] for s in self.samples]))
        candidates = torch.as_tensor(np.stack([s.candidates for s in self.samples]))
        return features, targets, forced, candidates


def candidate_masks(hg: HyperGraph, tgt: TargetSequence) -> np.ndarray:
    """
    Rows allowed at each step of a label walk.

    Forced steps allow only the partner endpoint. For CVRP a row must fit
    the remaining capacity, which resets where a label route starts.
    """
    m = hg.m
    order = tgt.order
    masks = np.zeros((m, m), dtype=bool)
    masks[0, order[0]] = True
    visited = np.zeros(m, dtype=bool)
    visited[order[0]] = True
    cvrp = hg.capacity is not None
    starts = set(tgt.route_starts)
    remaining = float(hg.capacity) - float(hg.demand[order[0]]) if cvrp else 0.0
    for t in range(1, m):
        if tgt.forced[t]:
            masks[t, order[t]] = True
        else:
            allowed = ~visited
            if cvrp:
                if t in starts:
                    remaining = float(hg.capacity)
                allowed = allowed & (hg.demand <= remaining)
                remaining -= float(hg.demand[order[t]])
            masks[t] = allowed
        visited[order[t]] = True
    return masks


def make_samples(inst: Instance, label: Solution, k: int, rng: np.random.Generator,
                 augment: bool = True, with_depot: bool = False) -> List[TrainingSample]:
    """Aligned samples of size k for one labelled instance, empty when no prefix fits."""
    center = int(rng.choice(inst.nodes))
    aligned = align_sample_size(inst, label, center, k)
    if not aligned.feasible or not aligned.destroyed:
        return []
    try:
        hg = transform_coords(reduce(inst, destroy_nodes(inst, label, aligned.destroyed)))
    except DegenerateInputError:
        return []
    feats = hg.model_features(with_depot)
    samples = []
    for rev in ((False, True) if augment else (False,)):
        tgt = target_sequence(label, hg, reverse=rev)
        samples.append(TrainingSample(feats, tgt.order, tgt.forced, candidate_masks(hg, tgt),
                                      inst.name, center, k, rev))
    return samples


def build_batch(pairs: Sequence[Tuple[Instance, Solution]], cfg: TrainConfig, epoch_seed,
                with_depot: bool = False) -> Batch:
    """One shared k per batch; one generator stream per instance derived from `epoch_seed`."""
    seq = np.random.SeedSequence(epoch_seed)
    k_stream, *streams = seq.spawn(len(pairs) + 1)
    n = min(len(inst.nodes) for inst, _ in pairs)
    lo, hi = cfg.k_range(n)
    k = int(np.random.default_rng(k_stream).integers(lo, hi + 1))
    if lo == hi:
        logger.debug(f"k range collapsed to {k} for n={n}")

    def _one(job):
        (inst, label), stream = job
        return make_samples(inst, label, k, np.random.default_rng(stream), cfg.augment, with_depot)

    per_instance = run_ordered(_one, list(zip(pairs, streams)), cfg.workers)
    samples = [s for group in per_instance for s in group]
    kept = sum(1 for group in per_instance if group)
    if not samples:
        logger.warning(f"Batch with k={k} has no feasible sample, skipped")
    return Batch(k, samples, kept, len(pairs))


def xent_loss_masked(probs: torch.Tensor, forced: torch.Tensor,
                     denominator: Optional[int] = None) -> Tuple[torch.Tensor, int]:
    """Mean -log p over non-forced steps; returns the loss and how many probabilities were floored."""
    free = ~forced
    clamped = int(((probs < PROB_FLOOR) & free).sum())
    nll = -torch.log(probs.clamp_min(PROB_FLOOR))
    total = torch.where(free, nll, torch.zeros_like(nll)).sum()
    count = denominator if denominator is not None else int(free.sum())
    return total / max(1, count), clamped


def forced_gradient_audit(model: DRHGModel, batch: Batch) -> float:
    """Largest |d loss / d logit| over forced steps; must be exactly zero."""
    features, targets, forced, candidates = batch.tensors(model.dtype)
    logits_per_step: List[torch.Tensor] = []
    probs = model.teacher_forced_probs(features, targets, candidates, logits_out=logits_per_step)
    loss, _ = xent_loss_masked(probs, forced)
    if not loss.requires_grad:
        return 0.0
    loss.backward()
    model.zero_grad(set_to_none=True)
    worst = 0.0
    for t, logits in enumerate(logits_per_step):
        rows = forced[:, t]
        if rows.any() and logits.grad is not None:
            worst = max(worst, float(logits.grad[rows].abs().max()))
    return worst


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    metrics: List[Tuple] = field(default_factory=list)
    best_gap: float = float("nan")


def _dump_batch(cfg: TrainConfig, epoch: int, index: int, batch: Batch) -> Path:
    path = Path(cfg.checkpoint_dir) / f"abort_epoch{epoch:03d}_batch{index:05d}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    features, targets, forced, candidates = batch.tensors()
    np.savez(path, features=features.numpy(), targets=targets.numpy(), forced=forced.numpy(),
             candidates=candidates.numpy(), names=np.array([s.name for s in batch.samples]))
    return path


def _run_batch(model: DRHGModel, state: nc.AdamState, batch: Batch, cfg: TrainConfig,
               lr: float) -> Tuple[float, int]:
    """Accumulate micro-batch gradients over the whole batch, then take one Adam step."""
    features, targets, forced, candidates = batch.tensors(model.dtype)
    denominator = int((~forced).sum())
    params = list(model.parameters())
    grads = [torch.zeros_like(p) for p in params]
    total, clamped = 0.0, 0
    for lo in range(0, len(batch.samples), cfg.micro_batch):
        sl = slice(lo, lo + cfg.micro_batch)
        probs = model.teacher_forced_probs(features[sl], targets[sl], candidates[sl])
        loss, c = xent_loss_masked(probs, forced[sl], denominator)
        if not torch.isfinite(loss):
            return float("nan"), clamped
        if loss.requires_grad:
            grads = [acc + g for acc, g in zip(grads, nc.backward(loss, params))]
        total += float(loss)
        clamped += c
    with torch.no_grad():
        for p, new in zip(params, nc.adam_step(params, grads, state, lr)):
            p.copy_(new)
    return total, clamped


def validation_gap(model: DRHGModel, val: Sequence[Tuple[Instance, Solution]], iters: int, seed: int) -> float:
    """Mean gap of a short greedy search against the label objectives."""
    if not val:
        return float("nan")
    model.eval()
    refs = {inst.name: objective(inst, label) for inst, label in val}
    cfg = SearchConfig(T=iters, seed=seed)
    report = evaluate([inst for inst, _ in val], lambda inst, rng: solve(inst, model, cfg)[0], refs, seed)
    model.train()
    mean_gap = report.summary.mean_gap
    return float("nan") if mean_gap is None else mean_gap


def train(cfg: TrainConfig, hp: HyperParams, corpus: Sequence[Tuple[Instance, Solution]],
          val: Optional[Sequence[Tuple[Instance, Solution]]] = None,
          model: Optional[DRHGModel] = None) -> TrainResult:
    """
    Train for cfg.epochs epochs, writing one checkpoint per epoch, `best.ckpt`
    (lowest validation gap) and `last.ckpt` under cfg.checkpoint_dir, plus a
    metrics CSV. Without an explicit validation set the last cfg.val_count
    corpus entries are held out.
    """
    corpus = list(corpus)
    if val is None:
        held = min(cfg.val_count, max(0, len(corpus) - 1))
        corpus, val = corpus[: len(corpus) - held], corpus[len(corpus) - held:]
    if not corpus:
        raise ConfigError("training corpus is empty")
    warm_start = model is not None
    model = model if warm_start else DRHGModel(hp, seed=cfg.seed)
    if model.hp != hp:
        raise ConfigError(f"model hyper-parameters {model.hp} differ from {hp}")

    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    write_csv(metrics_path, METRICS_HEADER, [])
    state = nc.AdamState.zeros_like(list(model.parameters()))
    rng = np.random.default_rng(cfg.seed)
    best_gap = float("inf")
    best_path = out_dir / "best.ckpt"
    best_path.unlink(missing_ok=True)
    result = TrainResult(best_path, out_dir / "last.ckpt")
    if warm_start:
        # best.ckpt starts as the incoming model
        start_gap = validation_gap(model, val, cfg.val_iters, cfg.seed)
        if np.isfinite(start_gap):
            best_gap = start_gap
            save_checkpoint(best_path, model)
            logger.info(f"Starting checkpoint: val gap {start_gap:.4%}")

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = nc.lr_at(epoch, cfg.lr0, cfg.decay)
        model.train()
        perm = rng.permutation(len(corpus))
        losses, kept, total, clamped = [], 0, 0, 0
        audited = False
        for index, lo in enumerate(range(0, len(corpus), cfg.batch_size)):
            pairs = [corpus[i] for i in perm[lo: lo + cfg.batch_size]]
            batch = build_batch(pairs, cfg, (cfg.seed, epoch, index), hp.depot_features)
            kept += batch.kept
            total += batch.total
            if not batch.samples:
                continue
            if not audited and any(s.forced.any() for s in batch.samples):
                worst = forced_gradient_audit(model, batch)
                if worst != 0.0:
                    raise TrainingAbort(f"forced steps leak gradient ({worst:g}) in epoch {epoch}")
                audited = True
            loss, c = _run_batch(model, state, batch, cfg, lr)
            if not np.isfinite(loss):
                dump = _dump_batch(cfg, epoch, index, batch)
                logger.error(f"Non-finite loss in epoch {epoch} batch {index}, batch dumped to {dump}")
                raise TrainingAbort(f"non-finite loss in epoch {epoch} batch {index}", str(dump))
            losses.append(loss)
            clamped += c
            logger.debug(f"epoch {epoch} batch {index}: k={batch.k} samples={len(batch.samples)} loss={loss:.6f}")
        if clamped:
            logger.warning(f"epoch {epoch}: {clamped} target probabilities floored at {PROB_FLOOR}")

        mean_loss = float(np.mean(losses)) if losses else float("nan")
        val_gap = validation_gap(model, val, cfg.val_iters, cfg.seed)
        seconds = time.perf_counter() - started
        row = (epoch, f"{mean_loss:.9f}", f"{kept / max(1, total):.4f}", f"{val_gap:.6f}", f"{lr:.9g}",
               f"{seconds:.2f}")
        result.metrics.append(row)
        write_csv(metrics_path, METRICS_HEADER, [row], append=True)
        save_checkpoint(out_dir / f"epoch_{epoch:03d}.ckpt", model)
        if np.isfinite(val_gap) and val_gap < best_gap or not best_path.exists():
            best_gap = val_gap if np.isfinite(val_gap) else best_gap
            save_checkpoint(best_path, model)
        logger.info(f"Epoch {epoch}: loss {mean_loss:.6f}, kept {kept}/{total}, val gap {val_gap:.4%}, lr {lr:.3g}")

    save_checkpoint(result.last_checkpoint, model)
    if not best_path.exists():
        save_checkpoint(best_path, model)
    result.best_gap = best_gap if np.isfinite(best_gap) else float("nan")
    logger.success(f"Training finished after {cfg.epochs} epochs, best checkpoint {best_path}")
    return result


def fine_tune(cfg: TrainConfig, hp: HyperParams, base_checkpoint: Union[str, Path],
              corpus: Sequence[Tuple[Instance, Solution]],
              val: Optional[Sequence[Tuple[Instance, Solution]]] = None) -> TrainResult:
    """Continue training from a checkpoint; the schedule restarts at lr0."""
    base_hp = read_hyperparams(base_checkpoint)
    if base_hp != hp:
        raise ConfigError(f"checkpoint hyper-parameters {base_hp} differ from configured {hp}")
    return train(cfg, hp, corpus, val, model=load_checkpoint(base_checkpoint))
