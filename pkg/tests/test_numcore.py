import math

import numpy as np
import pytest
import torch

from core import numcore as nc
from core.errors import ConfigError, InfeasibilityError, ShapeError


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestShapeContracts:
    def test_matmul(self):
        assert nc.matmul(_rand(3, 4), _rand(4, 2)).shape == (3, 2)
        assert nc.matmul(_rand(5, 3, 4), _rand(4, 2)).shape == (5, 3, 2)
        with pytest.raises(ShapeError):
            nc.matmul(_rand(3, 4), _rand(3, 2))
        with pytest.raises(ShapeError):
            nc.matmul(_rand(2, 3, 4), _rand(3, 4, 2))

    def test_add_allows_only_row_bias(self):
        assert nc.add(_rand(3, 4), _rand(4)).shape == (3, 4)
        with pytest.raises(ShapeError):
            nc.add(_rand(3, 4), _rand(3, 1))

    def test_concat_and_reshape(self):
        assert nc.concat_rows(_rand(2, 4), _rand(3, 4)).shape == (5, 4)
        with pytest.raises(ShapeError):
            nc.concat_rows(_rand(2, 4), _rand(3, 5))
        with pytest.raises(ShapeError):
            nc.reshape(_rand(2, 4), (3, 3))

    def test_rms_norm(self):
        x = _rand(4, 8)
        y = nc.rms_norm(x, torch.ones(8, dtype=torch.float64))
        np.testing.assert_allclose(y.pow(2).mean(dim=-1).numpy(), 1.0, rtol=1e-6)
        with pytest.raises(ShapeError):
            nc.rms_norm(x, torch.ones(4, dtype=torch.float64))


class TestMaskedSoftmax:
    def test_masked_entries_are_exactly_zero(self):
        logits = _rand(2, 5)
        mask = torch.tensor([[1, 0, 1, 0, 1], [0, 0, 0, 1, 0]], dtype=torch.bool)
        p = nc.masked_softmax(logits, mask)
        assert torch.all(p[~mask] == 0)
        np.testing.assert_allclose(p.sum(dim=-1).numpy(), 1.0, atol=1e-12)
        assert p[1, 3] == 1.0

    def test_large_logits_are_stable(self):
        p = nc.masked_softmax(torch.tensor([[1000.0, 999.0]]), torch.ones(1, 2, dtype=torch.bool))
        assert torch.isfinite(p).all()

    def test_no_feasible_entry(self):
        with pytest.raises(InfeasibilityError):
            nc.masked_softmax(_rand(1, 3), torch.zeros(1, 3, dtype=torch.bool))

    def test_masked_gradient_is_zero(self):
        logits = _rand(1, 4).requires_grad_()
        mask = torch.tensor([[1, 1, 0, 1]], dtype=torch.bool)
        (-torch.log(nc.masked_softmax(logits, mask)[0, 1])).backward()
        assert logits.grad[0, 2] == 0.0


class TestAttention:
    def _weights(self, d, seed=0):
        return nc.AttentionWeights(*(_rand(d, d, seed=seed + i) / math.sqrt(d) for i in range(4)))

    def test_matches_torch(self):
        d, heads = 8, 2
        w = self._weights(d)
        q, k = _rand(3, d, seed=10), _rand(5, d, seed=11)
        ours = nc.attention(q, k, k, w, heads)
        mha = torch.nn.MultiheadAttention(d, heads, bias=False, batch_first=True, dtype=torch.float64)
        with torch.no_grad():
            mha.in_proj_weight.copy_(torch.cat([w.w_q.T, w.w_k.T, w.w_v.T]))
            mha.out_proj.weight.copy_(w.w_o.T)
        ref, _ = mha(q[None], k[None], k[None], need_weights=False)
        np.testing.assert_allclose(ours.detach().numpy(), ref[0].detach().numpy(), atol=1e-12)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            nc.attention(_rand(2, 6), _rand(2, 6), _rand(2, 6), self._weights(6), 4)

    def test_counts_pairs(self):
        w = self._weights(4)
        with nc.count_ops() as stats:
            nc.attention(_rand(3, 4), _rand(7, 4), _rand(7, 4), w, 2)
            nc.attention(_rand(7, 4), _rand(3, 4), _rand(3, 4), w, 2)
        assert stats == {"pairs": 42, "calls": 2}


class TestAutograd:
    def test_backward_needs_scalar(self):
        x = _rand(3).requires_grad_()
        with pytest.raises(ShapeError):
            nc.backward(x * 2, [x])

    def test_unused_parameters_get_zeros(self):
        x, y = _rand(3).requires_grad_(), _rand(2).requires_grad_()
        gx, gy = nc.backward((x ** 2).sum(), [x, y])
        np.testing.assert_allclose(gx.numpy(), 2 * x.detach().numpy())
        assert torch.all(gy == 0)

    def test_finite_differences(self):
        w = _rand(4, 4).requires_grad_()
        x = _rand(3, 4, seed=1)

        def f(weight):
            return nc.tanh(nc.matmul(x, weight)).pow(2).sum()

        assert torch.autograd.gradcheck(f, (w,), eps=1e-6, atol=1e-8, rtol=1e-4)


class TestAdam:
    def test_matches_torch_optimizer(self):
        p = _rand(5)
        ours = [p.clone()]
        ref = p.clone().requires_grad_()
        opt = torch.optim.Adam([ref], lr=1e-2)
        state = nc.AdamState.zeros_like(ours)
        for step in range(5):
            g = _rand(5, seed=step + 1)
            ours = nc.adam_step(ours, [g], state, lr=1e-2)
            ref.grad = g.clone()
            opt.step()
        np.testing.assert_allclose(ours[0].numpy(), ref.detach().numpy(), atol=1e-12)
        assert state.step == 5

    def test_first_step_moves_by_lr(self):
        p = [torch.zeros(3, dtype=torch.float64)]
        out = nc.adam_step(p, [torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)],
                           nc.AdamState.zeros_like(p), lr=0.1)
        np.testing.assert_allclose(out[0].numpy(), [-0.1, 0.1, -0.1], atol=1e-6)

    def test_zero_gradient_leaves_parameters(self):
        params = [_rand(4, 3), _rand(2, seed=5)]
        state = nc.AdamState.zeros_like(params)
        out = nc.adam_step(params, [torch.zeros_like(p) for p in params], state, lr=0.5)
        for before, after in zip(params, out):
            assert torch.equal(before, after)
        assert state.step == 1

    def test_schedule(self):
        assert nc.lr_at(0) == 1e-4
        assert nc.lr_at(2) == pytest.approx(1e-4 * 0.97 ** 2)
