"""
Shape-checked tensor operations for the repair policy.

torch tensors carry the data and torch autograd records the tape; the
functions here add strict shape contracts (no broadcasting beyond a row
vector bias), a masked softmax that refuses fully masked rows, functional
multi-head attention with pair counting, and a functional Adam update.
"""

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import torch

from .errors import ConfigError, InfeasibilityError, ShapeError

TRAIN_DTYPE = torch.float64
INFER_DTYPE = torch.float32


def _shape(t: torch.Tensor) -> Tuple[int, ...]:
    return tuple(t.shape)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(..., n, k) x (k, p) or batched (..., n, k) x (..., k, p)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {_shape(a)} by {_shape(b)}")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ between {_shape(a)} and {_shape(b)}")
    return torch.matmul(a, b)


def add(a: torch.Tensor, b) -> torch.Tensor:
    if not torch.is_tensor(b):
        return a + b
    if a.shape != b.shape and not (b.dim() == 1 and a.shape[-1:] == b.shape):
        raise ShapeError(f"add: shapes {_shape(a)} and {_shape(b)} are not compatible")
    return a + b


def concat_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_rows: cannot stack {_shape(a)} on {_shape(b)}")
    return torch.cat([a, b], dim=-2)


def reshape(a: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    if math.prod(shape) != a.numel():
        raise ShapeError(f"reshape: {_shape(a)} has {a.numel()} values, {tuple(shape)} needs {math.prod(shape)}")
    return a.reshape(*shape)


def relu(a: torch.Tensor) -> torch.Tensor:
    return torch.relu(a)


def tanh(a: torch.Tensor) -> torch.Tensor:
    return torch.tanh(a)


def scale(a: torch.Tensor, s: float) -> torch.Tensor:
    return a * s


def rms_norm(a: torch.Tensor, gain: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    if gain.shape != a.shape[-1:]:
        raise ShapeError(f"rms_norm: gain {_shape(gain)} does not match {_shape(a)}")
    return a * torch.rsqrt(a.pow(2).mean(dim=-1, keepdim=True) + eps) * gain


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis where masked-out entries get probability exactly 0."""
    if logits.shape != mask.shape:
        raise ShapeError(f"masked_softmax: logits {_shape(logits)} vs mask {_shape(mask)}")
    mask = mask.bool()
    if not bool(mask.any(dim=-1).all()):
        raise InfeasibilityError("masked_softmax: a row has no feasible entry")
    z = logits.masked_fill(~mask, float("-inf"))
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


class _OpCounter(threading.local):
    def __init__(self):
        self.active: List[Dict[str, int]] = []


_counter = _OpCounter()


@contextmanager
def count_ops() -> Iterator[Dict[str, int]]:
    """
    Count attention work inside the block.

    `pairs` is the number of query-key score entries computed (per batch
    element and head-independent); `calls` the number of attention calls.
    """
    stats = {"pairs": 0, "calls": 0}
    _counter.active.append(stats)
    try:
        yield stats
    finally:
        _counter.active.remove(stats)


@dataclass
class AttentionWeights:
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, rows, d = x.shape
    return x.reshape(*lead, rows, heads, d // heads).transpose(-3, -2)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, weights: AttentionWeights,
              heads: int) -> torch.Tensor:
    """Multi-head scaled dot-product attention with output projection."""
    d = weights.w_q.shape[1]
    if d % heads:
        raise ConfigError(f"attention: {d} dims do not split into {heads} heads")
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: keys {_shape(k)} and values {_shape(v)} differ")
    qh = _split_heads(matmul(q, weights.w_q), heads)
    kh = _split_heads(matmul(k, weights.w_k), heads)
    vh = _split_heads(matmul(v, weights.w_v), heads)
    scores = torch.matmul(qh, kh.transpose(-1, -2)) / math.sqrt(d // heads)
    out = torch.matmul(torch.softmax(scores, dim=-1), vh)
    out = out.transpose(-3, -2).reshape(*q.shape[:-1], d)
    for stats in _counter.active:
        stats["pairs"] += q.shape[-2] * k.shape[-2]
        stats["calls"] += 1
    return matmul(out, weights.w_o)


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    """Gradients of a scalar loss for every parameter; unused parameters get zeros."""
    if loss.dim() != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {_shape(loss)}")
    params = list(params)
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    step: int
    m: List[torch.Tensor]
    v: List[torch.Tensor]

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> List[torch.Tensor]:
    """Bias-corrected Adam; returns new parameter values and advances `state`."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state differ in length")
    state.step += 1
    c1 = 1 - beta1 ** state.step
    c2 = 1 - beta2 ** state.step
    updated = []
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ShapeError(f"adam_step: parameter {_shape(p)} vs gradient {_shape(g)}")
            state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
            state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
            denom = state.v[i].sqrt() / math.sqrt(c2) + eps
            updated.append(p - (lr / c1) * state.m[i] / denom)
    return updated


def lr_at(epoch: int, lr0: float = 1e-4, decay: float = 0.97) -> float:
    return lr0 * decay ** epoch
