import struct

import numpy as np
import pytest
import torch

from core import numcore as nc
from core.baselines import sweep
from core.errors import ConfigError, ParseError, ShapeError
from core.hypergraph import cluster_destroy, reduce, restore, transform_coords
from core.instances import Instance, ProblemKind, Tour, objective
from core.model import (
    DRHGModel,
    HyperParams,
    RolloutMode,
    load_checkpoint,
    read_hyperparams,
    rollout,
    save_checkpoint,
    start_row,
)


def _hypergraph(inst, count, center=0, solution=None):
    solution = solution or Tour(range(inst.n))
    return reduce(inst, cluster_destroy(inst, solution, center, count))


def _random_batch(hp, batch=2, m=6, seed=0):
    gen = torch.Generator().manual_seed(seed)
    feats = torch.rand(batch, m, hp.input_dim, generator=gen, dtype=torch.float64)
    targets = torch.stack([torch.randperm(m, generator=gen) for _ in range(batch)])
    masks = torch.ones(batch, m, m, dtype=torch.bool)
    return feats, targets, masks


class TestHyperParams:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            HyperParams(d_h=10, heads=4)

    def test_needs_a_representative(self):
        with pytest.raises(ConfigError):
            HyperParams(r_f=0, r_c=0)

    def test_from_config(self):
        hp = HyperParams.from_config({"model": {"d_h": 64, "L": 3}}, ProblemKind.CVRP)
        assert (hp.d_h, hp.L, hp.input_dim, hp.r) == (64, 3, 6, 16)

    def test_depot_features_widen_cvrp_rows(self):
        config = {"model": {"depot_features": True}}
        assert HyperParams.from_config(config, ProblemKind.CVRP).input_dim == 8
        assert HyperParams.from_config(config, ProblemKind.TSP).input_dim == 5
        assert HyperParams.from_config(config, ProblemKind.CVRP).depot_features
        with pytest.raises(ConfigError):
            HyperParams(input_dim=7)


class TestForward:
    def test_decode_step_distribution(self, tiny_hp, tsp12):
        model = DRHGModel(tiny_hp)
        hg = _hypergraph(tsp12, 5)
        h0 = model.encode(torch.as_tensor(hg.model_features()))
        visited = np.zeros(hg.m, dtype=bool)
        visited[[0, 2]] = True
        candidates = ~visited
        candidates[3] = False
        probs = model.decode_step(h0, 0, 2, visited, candidates).detach().numpy()
        assert probs.shape == (hg.m,)
        assert probs[[0, 2, 3]].sum() == 0.0
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_wrong_feature_width(self, tiny_hp):
        with pytest.raises(ShapeError):
            DRHGModel(tiny_hp).encode(torch.zeros(4, 6, dtype=torch.float64))

    def test_attention_work_is_linear(self, tiny_hp):
        model = DRHGModel(tiny_hp)
        r = tiny_hp.r
        for m in (6, 30):
            h0 = model.encode(torch.rand(m, 5, dtype=torch.float64))
            visited = np.zeros(m, dtype=bool)
            visited[0] = True
            with nc.count_ops() as stats:
                model.decode_step(h0, 0, 0, visited, ~visited)
            assert stats["pairs"] == tiny_hp.L * 2 * r * (r + m - 1)
            assert stats["calls"] == 2 * tiny_hp.L

    def test_teacher_forcing_matches_decode_steps(self, tiny_hp):
        model = DRHGModel(tiny_hp, seed=2)
        feats, targets, masks = _random_batch(tiny_hp, batch=1)
        probs = model.teacher_forced_probs(feats, targets, masks)[0]
        h0 = model.encode(feats[0])
        order = targets[0].tolist()
        visited = np.zeros(6, dtype=bool)
        visited[order[0]] = True
        for t in range(1, 6):
            step = model.decode_step(h0, order[0], order[t - 1], visited, ~visited)
            assert probs[t - 1].item() == pytest.approx(step[order[t]].item(), abs=1e-12)
            visited[order[t]] = True


class TestGradients:
    @pytest.mark.slow
    def test_finite_differences_every_parameter(self):
        hp = HyperParams(d_h=8, L=2, heads=2, r_f=2, r_c=2, d_ff=16)
        model = DRHGModel(hp, seed=5)
        feats, targets, masks = _random_batch(hp, batch=2, m=6, seed=1)

        def loss():
            return -torch.log(model.teacher_forced_probs(feats, targets, masks)).mean()

        params = list(model.parameters())
        grads = torch.autograd.grad(loss(), params)
        h = 1e-6
        with torch.no_grad():
            for p, g in zip(params, grads):
                flat = p.data.view(-1)
                numeric = np.empty(flat.numel())
                for i in range(flat.numel()):
                    old = flat[i].item()
                    flat[i] = old + h
                    up = loss().item()
                    flat[i] = old - h
                    down = loss().item()
                    flat[i] = old
                    numeric[i] = (up - down) / (2 * h)
                np.testing.assert_allclose(g.view(-1).numpy(), numeric, rtol=1e-4, atol=1e-8)


class TestEquivariance:
    def test_permuted_rows(self, tiny_hp, tsp12):
        model = DRHGModel(tiny_hp, seed=1)
        hg = _hypergraph(tsp12, 6, center=3)
        perm = np.random.default_rng(4).permutation(hg.m)
        inverse = np.argsort(perm)
        p_hg = hg.permuted(perm)

        h0 = model.encode(torch.as_tensor(hg.model_features()))
        p_h0 = model.encode(torch.as_tensor(p_hg.model_features()))
        visited = np.zeros(hg.m, dtype=bool)
        visited[1] = True
        probs = model.decode_step(h0, 1, 1, visited, ~visited).detach().numpy()
        p_probs = model.decode_step(p_h0, inverse[1], inverse[1], visited[perm], ~visited[perm]).detach().numpy()
        np.testing.assert_allclose(p_probs, probs[perm], atol=1e-6)

        start = start_row(hg, np.random.default_rng(0))
        a = rollout(model, hg, RolloutMode.GREEDY, start=start)
        b = rollout(model, p_hg, RolloutMode.GREEDY, start=int(inverse[start]))
        assert restore(tsp12, hg, a.order).order == restore(tsp12, p_hg, b.order).order


class TestRollout:
    def test_tsp_order_is_valid(self, tiny_hp, tsp12):
        model = DRHGModel(tiny_hp)
        hg = _hypergraph(tsp12, 5)
        result = rollout(model, hg, seed=0)
        assert sorted(result.order) == list(range(hg.m))
        assert result.route_starts is None
        # forced partner steps and the last step never call the network
        assert result.network_calls <= hg.m - 1 - len(hg.hyper_edges)
        restore(tsp12, hg, result.order)

    def test_sampling_is_seeded(self, tiny_hp, tsp12):
        model = DRHGModel(tiny_hp)
        hg = _hypergraph(tsp12, 8)
        a = rollout(model, hg, RolloutMode.SAMPLE, seed=9)
        b = rollout(model, hg, RolloutMode.SAMPLE, seed=9)
        assert a.order == b.order

    def test_cvrp_routes_respect_capacity(self, tiny_cvrp_hp, cvrp20):
        model = DRHGModel(tiny_cvrp_hp)
        plan = sweep(cvrp20)
        for center in range(1, 21, 4):
            hg = _hypergraph(cvrp20, 10, center=center, solution=plan)
            result = rollout(model, hg, seed=center)
            assert result.route_starts[0] == 0
            objective(cvrp20, restore(cvrp20, hg, result.order, result.route_starts))

    def test_greedy_decisions_survive_translation_and_scaling(self, tiny_hp):
        grid = np.random.default_rng(8).integers(0, 1024, size=(12, 2)) / 1024.0
        inst = Instance(ProblemKind.TSP, grid)
        moved = Instance(ProblemKind.TSP, grid * 2.0 + np.array([3.0, 0.75]))
        model = DRHGModel(tiny_hp)
        a = rollout(model, transform_coords(_hypergraph(inst, 6)), seed=0)
        b = rollout(model, transform_coords(_hypergraph(moved, 6)), seed=0)
        assert a.order == b.order


class TestCheckpoint:
    def test_roundtrip(self, tiny_hp, tmp_path):
        model = DRHGModel(tiny_hp, seed=3)
        path = save_checkpoint(tmp_path / "m.ckpt", model)
        assert path.read_bytes()[:4] == b"DRHG"
        assert read_hyperparams(path) == tiny_hp
        loaded = load_checkpoint(path)
        for (name, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(a, b), name
        save_checkpoint(tmp_path / "again.ckpt", loaded)
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_single_precision(self, tiny_hp, tmp_path):
        path = save_checkpoint(tmp_path / "m32.ckpt", DRHGModel(tiny_hp), precision=4)
        assert load_checkpoint(path).dtype == torch.float32

    def test_hyperparameter_mismatch(self, tiny_hp, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", DRHGModel(tiny_hp))
        raw = bytearray(path.read_bytes())
        raw[9:13] = struct.pack("<I", 16)
        path.write_bytes(bytes(raw))
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_bad_files(self, tiny_hp, tmp_path):
        (tmp_path / "junk.ckpt").write_bytes(b"nope")
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "junk.ckpt")
        path = save_checkpoint(tmp_path / "m.ckpt", DRHGModel(tiny_hp))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ParseError):
            load_checkpoint(path)
