"""
Neural repair policy.

A single linear layer embeds every hyper-graph row. Each decoding step
derives representative rows from the first and current row embeddings,
runs them together with the unvisited rows through L aggregate/broadcast
attention modules, and scores the unvisited rows with a clipped linear head.
Checkpoints use a small documented binary layout (see `save_checkpoint`).
"""

import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from loguru import logger

from . import numcore as nc
from .errors import ConfigError, InfeasibilityError, ParseError, ShapeError
from .hypergraph import HyperGraph
from .instances import ProblemKind


# CVRP rows plus the depot position in the row frame
CVRP_DEPOT_INPUT_DIM = 8


def _input_dim(kind: ProblemKind, depot_features: bool) -> int:
    if kind is not ProblemKind.CVRP:
        return 5
    return CVRP_DEPOT_INPUT_DIM if depot_features else 6


@dataclass(frozen=True)
class HyperParams:
    d_h: int = 128
    L: int = 6
    heads: int = 8
    r_f: int = 8
    r_c: int = 8
    d_ff: int = 512
    input_dim: int = 5
    logit_clip: float = 10.0

    def __post_init__(self):
        if self.d_h % self.heads:
            raise ConfigError(f"d_h={self.d_h} is not divisible by heads={self.heads}")
        if self.r_f < 0 or self.r_c < 0 or self.r_f + self.r_c < 1:
            raise ConfigError(f"need at least one representative row, got r_f={self.r_f} r_c={self.r_c}")
        if self.input_dim not in (5, 6, CVRP_DEPOT_INPUT_DIM):
            raise ConfigError(f"input_dim must be 5 (TSP), 6 or {CVRP_DEPOT_INPUT_DIM} (CVRP), got {self.input_dim}")

    @property
    def r(self) -> int:
        return self.r_f + self.r_c

    @property
    def depot_features(self) -> bool:
        return self.input_dim == CVRP_DEPOT_INPUT_DIM

    @classmethod
    def from_config(cls, config: dict, kind: ProblemKind = ProblemKind.TSP) -> "HyperParams":
        section = config.get("model", {}) or {}
        defaults = cls()
        return cls(
            d_h=int(section.get("d_h", defaults.d_h)),
            L=int(section.get("L", defaults.L)),
            heads=int(section.get("heads", defaults.heads)),
            r_f=int(section.get("r_f", defaults.r_f)),
            r_c=int(section.get("r_c", defaults.r_c)),
            d_ff=int(section.get("d_ff", defaults.d_ff)),
            input_dim=_input_dim(ProblemKind(kind), bool(section.get("depot_features", False))),
            logit_clip=float(section.get("logit_clip", defaults.logit_clip)),
        )


def _uniform(shape: Tuple[int, ...], bound: float, gen: torch.Generator, dtype) -> nn.Parameter:
    return nn.Parameter((torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1) * bound)


class Dense(nn.Module):
    """x W + b with W stored as (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, gen: torch.Generator, dtype, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(d_in)
        self.weight = _uniform((d_in, d_out), bound, gen, dtype)
        self.bias = _uniform((d_out,), bound, gen, dtype) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = nc.matmul(x, self.weight)
        return nc.add(y, self.bias) if self.bias is not None else y


class AttentionBlock(nn.Module):
    """Attention, residual + RMS norm, feed-forward, residual + RMS norm."""

    def __init__(self, hp: HyperParams, gen: torch.Generator, dtype):
        super().__init__()
        bound = 1.0 / np.sqrt(hp.d_h)
        self.heads = hp.heads
        self.w_q = _uniform((hp.d_h, hp.d_h), bound, gen, dtype)
        self.w_k = _uniform((hp.d_h, hp.d_h), bound, gen, dtype)
        self.w_v = _uniform((hp.d_h, hp.d_h), bound, gen, dtype)
        self.w_out = _uniform((hp.d_h, hp.d_h), bound, gen, dtype)
        self.gain_attn = nn.Parameter(torch.ones(hp.d_h, dtype=dtype))
        self.ff_in = Dense(hp.d_h, hp.d_ff, gen, dtype)
        self.ff_out = Dense(hp.d_ff, hp.d_h, gen, dtype)
        self.gain_ff = nn.Parameter(torch.ones(hp.d_h, dtype=dtype))

    def forward(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        weights = nc.AttentionWeights(self.w_q, self.w_k, self.w_v, self.w_out)
        h = nc.rms_norm(nc.add(queries, nc.attention(queries, context, context, weights, self.heads)),
                        self.gain_attn)
        ff = self.ff_out(nc.relu(self.ff_in(h)))
        return nc.rms_norm(nc.add(h, ff), self.gain_ff)


class LinearAttentionModule(nn.Module):
    def __init__(self, hp: HyperParams, gen: torch.Generator, dtype):
        super().__init__()
        self.aggregate = AttentionBlock(hp, gen, dtype)
        self.broadcast = AttentionBlock(hp, gen, dtype)

    def forward(self, reps: torch.Tensor, rows: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        r = reps.shape[-2]
        everything = nc.concat_rows(reps, rows)
        gathered = self.aggregate(reps, everything)
        spread = self.broadcast(everything, gathered)
        return spread[..., :r, :], spread[..., r:, :]


class DRHGModel(nn.Module):
    def __init__(self, hp: HyperParams, seed: int = 0, dtype=nc.TRAIN_DTYPE):
        super().__init__()
        self.hp = hp
        gen = torch.Generator().manual_seed(seed)
        self.embed = Dense(hp.input_dim, hp.d_h, gen, dtype)
        self.w_f = Dense(hp.d_h, hp.d_h * hp.r_f, gen, dtype, bias=False) if hp.r_f else None
        self.w_c = Dense(hp.d_h, hp.d_h * hp.r_c, gen, dtype, bias=False) if hp.r_c else None
        self.layers = nn.ModuleList([LinearAttentionModule(hp, gen, dtype) for _ in range(hp.L)])
        self.w_o = Dense(hp.d_h, 1, gen, dtype, bias=False)

    @property
    def dtype(self):
        return self.embed.weight.dtype

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.hp.input_dim:
            raise ShapeError(f"encode: expected {self.hp.input_dim} feature columns, got {tuple(features.shape)}")
        return self.embed(features.to(self.dtype))

    def make_representatives(self, h_f: torch.Tensor, h_c: torch.Tensor) -> torch.Tensor:
        """(..., d_h) first/current embeddings -> (..., r_f + r_c, d_h)."""
        lead = tuple(h_f.shape[:-1])
        blocks = []
        if self.w_f is not None:
            blocks.append(nc.reshape(self.w_f(h_f), lead + (self.hp.r_f, self.hp.d_h)))
        if self.w_c is not None:
            blocks.append(nc.reshape(self.w_c(h_c), lead + (self.hp.r_c, self.hp.d_h)))
        return blocks[0] if len(blocks) == 1 else nc.concat_rows(blocks[0], blocks[1])

    def scores(self, h_f: torch.Tensor, h_c: torch.Tensor, h_a: torch.Tensor) -> torch.Tensor:
        """Clipped scores for the rows of h_a (..., rows, d_h) -> (..., rows)."""
        reps = self.make_representatives(h_f, h_c)
        for layer in self.layers:
            reps, h_a = layer(reps, h_a)
        z = nc.matmul(h_a, self.w_o.weight).squeeze(-1)
        c = self.hp.logit_clip
        return nc.scale(nc.tanh(nc.scale(z, 1.0 / c)), c)

    def decode_step(self, h0: torch.Tensor, first: int, current: int, visited: np.ndarray,
                    candidates: np.ndarray) -> torch.Tensor:
        """
        Next-row distribution for one hyper-graph.

        h0 is the (m, d_h) encoder output. Only unvisited rows go through the
        attention stack; `candidates` (a subset of the unvisited rows) limits
        the softmax. Visited and non-candidate rows get probability 0.
        """
        unvisited = np.flatnonzero(~visited)
        if not candidates[unvisited].any():
            raise InfeasibilityError("no candidate row left")
        idx = torch.as_tensor(unvisited)
        logits = self.scores(h0[first], h0[current], h0[idx])
        probs = nc.masked_softmax(logits, torch.as_tensor(candidates[unvisited]))
        full = torch.zeros(h0.shape[0], dtype=probs.dtype)
        full[idx] = probs
        return full

    def teacher_forced_probs(self, features: torch.Tensor, targets: torch.Tensor,
                             candidate_masks: torch.Tensor,
                             logits_out: Optional[List[torch.Tensor]] = None) -> torch.Tensor:
        """
        Probability of each target row under teacher forcing.

        features (B, m, input_dim), targets (B, m) row orders and
        candidate_masks (B, m, m) where [b, t] marks the rows allowed at
        step t. Returns (B, m - 1) probabilities for steps 1..m-1. When
        `logits_out` is given, the per-step logits are appended to it with
        their gradients retained.
        """
        h0 = self.encode(features)
        batch, m, d = h0.shape
        ar = torch.arange(batch)
        first = h0[ar, targets[:, 0]]
        visited = torch.zeros(batch, m, dtype=torch.bool)
        visited[ar, targets[:, 0]] = True
        out = []
        for t in range(1, m):
            # unvisited rows in ascending index order, same count in every sample
            idx = torch.sort(visited.to(torch.int8), dim=1, stable=True).indices[:, : m - t]
            h_a = h0.gather(1, idx.unsqueeze(-1).expand(-1, -1, d))
            current = h0[ar, targets[:, t - 1]]
            logits = self.scores(first, current, h_a)
            if logits_out is not None and logits.requires_grad:
                logits.retain_grad()
                logits_out.append(logits)
            probs = nc.masked_softmax(logits, candidate_masks[:, t].gather(1, idx))
            pos = (idx == targets[:, t : t + 1]).to(torch.int64).argmax(dim=1)
            out.append(probs[ar, pos])
            visited[ar, targets[:, t]] = True
        return torch.stack(out, dim=1)


class RolloutMode(str, Enum):
    GREEDY = "greedy"
    SAMPLE = "sample"


@dataclass
class DecodeState:
    first_row: int
    current_row: int
    visited: np.ndarray
    forced_next: Optional[int] = None
    remaining_capacity: Optional[float] = None
    order: List[int] = field(default_factory=list)
    route_starts: List[int] = field(default_factory=list)

    def visit(self, row: int, hg: HyperGraph, forced: bool) -> None:
        self.visited[row] = True
        self.order.append(row)
        self.current_row = row
        partner = int(hg.partner[row])
        self.forced_next = partner if partner >= 0 and not forced else None
        if self.remaining_capacity is not None and not forced:
            self.remaining_capacity -= float(hg.demand[row])


@dataclass
class RolloutResult:
    order: List[int]
    route_starts: Optional[List[int]] = None
    network_calls: int = 0


def start_row(hg: HyperGraph, rng: np.random.Generator) -> int:
    """Entry endpoint of a random hyper-edge, or a random row when every row is isolated."""
    if hg.hyper_edges:
        he = hg.hyper_edges[int(rng.integers(len(hg.hyper_edges)))]
        node = he.a if rng.random() < 0.5 else he.b
        return hg.row_of[node]
    return int(rng.integers(hg.m))


def rollout(model: DRHGModel, hg: HyperGraph, mode: RolloutMode = RolloutMode.GREEDY,
            seed=None, start: Optional[int] = None) -> RolloutResult:
    """Decode a complete row order; partner steps and single-candidate steps skip the network."""
    mode = RolloutMode(mode)
    rng = np.random.default_rng(seed)
    m = hg.m
    if start is None:
        start = start_row(hg, rng)
    cvrp = hg.kind is ProblemKind.CVRP
    state = DecodeState(start, start, np.zeros(m, dtype=bool),
                        remaining_capacity=float(hg.capacity) if cvrp else None)
    if cvrp:
        state.route_starts.append(0)
    state.visit(start, hg, forced=False)

    feats = torch.as_tensor(hg.model_features(model.hp.depot_features), dtype=model.dtype)
    calls = 0
    with torch.no_grad():
        h0 = model.encode(feats)
        while len(state.order) < m:
            if state.forced_next is not None:
                state.visit(state.forced_next, hg, forced=True)
                continue
            candidates = ~state.visited
            if cvrp:
                fits = candidates & (hg.demand <= state.remaining_capacity)
                if not fits.any():
                    state.route_starts.append(len(state.order))
                    state.remaining_capacity = float(hg.capacity)
                    fits = candidates & (hg.demand <= state.remaining_capacity)
                candidates = fits
            choices = np.flatnonzero(candidates)
            if len(choices) == 1:
                row = int(choices[0])
            else:
                probs = model.decode_step(h0, state.first_row, state.current_row, state.visited,
                                          candidates).numpy().astype(np.float64)
                calls += 1
                if mode is RolloutMode.GREEDY:
                    row = int(np.argmax(probs))
                else:
                    row = int(rng.choice(m, p=probs / probs.sum()))
            state.visit(row, hg, forced=False)
    return RolloutResult(state.order, state.route_starts if cvrp else None, calls)


# Checkpoint layout, little-endian:
#   b"DRHG" | u32 version | u8 bytes per value (8 or 4)
#   | u32 d_h, L, heads, r_f, r_c, d_ff, input_dim | f64 logit_clip | u32 tensor count
#   then per tensor: u32 name length | utf-8 name | u32 rank | u32 dims... | values
MAGIC = b"DRHG"
FORMAT_VERSION = 1
_HP_FORMAT = "<7Id"


def save_checkpoint(path: Union[str, Path], model: DRHGModel, precision: int = 8) -> Path:
    if precision not in (8, 4):
        raise ConfigError(f"precision must be 8 or 4 bytes, got {precision}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hp = model.hp
    value_type = "<f8" if precision == 8 else "<f4"
    state = model.state_dict()
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<IB", FORMAT_VERSION, precision))
            f.write(struct.pack(_HP_FORMAT, hp.d_h, hp.L, hp.heads, hp.r_f, hp.r_c, hp.d_ff, hp.input_dim,
                                hp.logit_clip))
            f.write(struct.pack("<I", len(state)))
            for name, tensor in state.items():
                raw = name.encode("utf-8")
                values = tensor.detach().cpu().numpy()
                f.write(struct.pack("<I", len(raw)) + raw)
                f.write(struct.pack(f"<I{values.ndim}I", values.ndim, *values.shape))
                f.write(values.astype(value_type).tobytes())
        logger.info(f"Saved checkpoint {path}")
        return path
    except Exception as e:
        logger.error(f"Failed to save checkpoint {path}: {e}")
        raise


def _read(f, fmt: str):
    size = struct.calcsize(fmt)
    raw = f.read(size)
    if len(raw) != size:
        raise ParseError("checkpoint is truncated")
    return struct.unpack(fmt, raw)


def read_hyperparams(path: Union[str, Path]) -> HyperParams:
    with open(path, "rb") as f:
        return _read_header(f)[1]


def _read_header(f) -> Tuple[int, HyperParams]:
    if f.read(4) != MAGIC:
        raise ParseError("not a DRHG checkpoint")
    version, precision = _read(f, "<IB")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    if precision not in (8, 4):
        raise ParseError(f"bad value precision {precision}")
    d_h, L, heads, r_f, r_c, d_ff, input_dim, clip = _read(f, _HP_FORMAT)
    return precision, HyperParams(d_h, L, heads, r_f, r_c, d_ff, input_dim, clip)


def load_checkpoint(path: Union[str, Path]) -> DRHGModel:
    """Rebuild a model; 4-byte checkpoints load as float32 inference models."""
    try:
        with open(path, "rb") as f:
            precision, hp = _read_header(f)
            value_type = "<f8" if precision == 8 else "<f4"
            (count,) = _read(f, "<I")
            tensors = {}
            for _ in range(count):
                (name_len,) = _read(f, "<I")
                name = f.read(name_len).decode("utf-8")
                (rank,) = _read(f, "<I")
                dims = _read(f, f"<{rank}I") if rank else ()
                n_values = int(np.prod(dims)) if rank else 1
                raw = f.read(n_values * precision)
                if len(raw) != n_values * precision:
                    raise ParseError(f"checkpoint is truncated inside tensor {name}")
                tensors[name] = torch.from_numpy(np.frombuffer(raw, dtype=value_type).reshape(dims).copy())
        dtype = nc.TRAIN_DTYPE if precision == 8 else nc.INFER_DTYPE
        model = DRHGModel(hp, dtype=dtype)
        expected = model.state_dict()
        if set(expected) != set(tensors):
            raise ConfigError(f"checkpoint tensors do not match hyper-parameters {asdict(hp)}")
        for name, t in tensors.items():
            if tuple(expected[name].shape) != tuple(t.shape):
                raise ConfigError(f"tensor {name}: checkpoint shape {tuple(t.shape)}, "
                                  f"model shape {tuple(expected[name].shape)}")
        model.load_state_dict({k: v.to(dtype) for k, v in tensors.items()})
        return model
    except Exception as e:
        logger.error(f"Failed to load checkpoint {path}: {e}")
        raise
