import csv

import numpy as np
import pytest

from core.baselines import held_karp, random_insertion, sweep
from core.errors import ConfigError, KindError, SizeError
from core.hypergraph import DestroyOperator, cluster_destroy, destroy_nodes, reduce, restore
from core.instances import ProblemKind, gen_dataset, gen_uniform, objective, tour_length
from core.model import DRHGModel, HyperParams
from core.search import (
    TRACE_HEADER,
    Acceptance,
    ExactRepair,
    ModelRepair,
    SearchConfig,
    evaluate,
    eval_rows,
    render_report,
    search,
    solve,
    write_report,
    write_trace,
)


class TestConfig:
    def test_k_range_clamps_to_instance(self, tsp10, cvrp20):
        assert SearchConfig().k_range(tsp10) == (10, 10)
        assert SearchConfig(k_min=3, k_max=6).k_range(tsp10) == (3, 6)
        assert SearchConfig().k_range(gen_uniform(ProblemKind.TSP, 2000, 0)) == (20, 1000)
        assert SearchConfig(k_min=5).k_range(cvrp20) == (5, 20)

    def test_from_config(self):
        cfg = SearchConfig.from_config({"search": {"iterations": 7, "mode": "sample", "acceptance": "always"}})
        assert cfg.T == 7
        assert cfg.acceptance is Acceptance.ALWAYS

    def test_rejects_negative_iterations(self):
        with pytest.raises(ConfigError):
            SearchConfig(T=-1)


class TestSearch:
    def test_zero_iterations_returns_initial(self, tsp12):
        best, trace = search(tsp12, ExactRepair(), SearchConfig(T=0, seed=4))
        expected = tour_length(tsp12, random_insertion(tsp12, np.random.default_rng(4)))
        assert objective(tsp12, best) == pytest.approx(expected)
        assert trace.best_objective == trace.initial_objective == pytest.approx(expected)

    def test_best_is_monotone_and_deterministic(self, tiny_hp):
        inst = gen_uniform(ProblemKind.TSP, 30, 1)
        model = DRHGModel(tiny_hp)
        cfg = SearchConfig(T=25, k_min=4, k_max=12, seed=3)
        _, a = search(inst, ModelRepair(model), cfg)
        _, b = search(inst, ModelRepair(model), cfg)
        best = [r.best_so_far for r in a.records]
        assert all(x >= y for x, y in zip(best, best[1:]))
        assert best[0] <= a.initial_objective
        assert [r.objective_after for r in a.records] == [r.objective_after for r in b.records]
        assert [r.center for r in a.records] == [r.center for r in b.records]

    def test_debug_checks_length_decomposition(self, tiny_hp):
        cfg = SearchConfig(T=10, k_min=3, k_max=8, debug=True, acceptance="always")
        best, _ = search(gen_uniform(ProblemKind.TSP, 20, 2), ModelRepair(DRHGModel(tiny_hp)), cfg)
        assert len(best) == 20

    def test_snapshots(self, tsp12):
        cfg = SearchConfig(T=6, k_min=3, k_max=5, snapshots=(0, 4))
        _, trace = search(tsp12, ExactRepair(), cfg)
        assert [s.iteration for s in trace.snapshots] == [0, 4]
        snap = trace.snapshots[1]
        assert 3 <= len(snap.destroyed) <= 5
        assert objective(tsp12, snap.repaired) == pytest.approx(trace.records[4].objective_after)

    def test_trace_csv(self, tmp_path, tsp12):
        _, trace = search(tsp12, ExactRepair(), SearchConfig(T=3, k_min=2, k_max=4))
        write_trace(tmp_path / "trace.csv", trace)
        with open(tmp_path / "trace.csv") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == TRACE_HEADER
        assert len(rows) == 4

    def test_destroyer_without_center(self, tsp12):
        class RandomDestroy(DestroyOperator):
            def destroy(self, inst, solution, count, rng):
                return destroy_nodes(inst, solution, rng.choice(inst.nodes, size=count, replace=False))

        cfg = SearchConfig(T=4, k_min=3, k_max=5, seed=2)
        best, trace = search(tsp12, ExactRepair(), cfg, destroyer=RandomDestroy())
        assert [r.center for r in trace.records] == [-1] * 4
        assert sorted(best.order) == list(range(12))


class TestExactRepair:
    def test_finds_optimum_of_reduced_problem(self, tsp10):
        tour = random_insertion(tsp10, 0)
        hg = reduce(tsp10, cluster_destroy(tsp10, tour, 0, 10))
        order, _ = ExactRepair().repair(tsp10, hg, np.random.default_rng(0))
        assert objective(tsp10, restore(tsp10, hg, order)) == pytest.approx(
            objective(tsp10, held_karp(tsp10)), abs=1e-12)

    def test_limits(self, cvrp20):
        big = gen_uniform(ProblemKind.TSP, 20, 0)
        hg = reduce(big, cluster_destroy(big, random_insertion(big, 0), 0, 20))
        with pytest.raises(SizeError):
            ExactRepair().repair(big, hg, np.random.default_rng(0))
        hg = reduce(cvrp20, cluster_destroy(cvrp20, sweep(cvrp20), 1, 3))
        with pytest.raises(KindError):
            ExactRepair().repair(cvrp20, hg, np.random.default_rng(0))

    @pytest.mark.slow
    def test_reaches_optimum_on_tsp10(self):
        hits = 0
        for trial in range(200):
            inst = gen_uniform(ProblemKind.TSP, 10, 1000 + trial)
            best, _ = search(inst, ExactRepair(), SearchConfig(T=100, k_min=3, k_max=6, seed=trial))
            hits += objective(inst, best) <= objective(inst, held_karp(inst)) + 1e-9
        assert hits >= 190


class TestSolve:
    def test_kind_and_width_checks(self, tiny_hp, tiny_cvrp_hp, tsp10, cvrp20):
        with pytest.raises(ConfigError):
            solve(cvrp20, DRHGModel(tiny_hp), SearchConfig(T=1))
        with pytest.raises(ConfigError):
            solve(tsp10, DRHGModel(tiny_cvrp_hp), SearchConfig(T=1))

    def test_cvrp_search_stays_feasible(self, tiny_cvrp_hp, cvrp20):
        best, trace = solve(cvrp20, DRHGModel(tiny_cvrp_hp), SearchConfig(T=20, k_min=3, k_max=12))
        assert objective(cvrp20, best) <= objective(cvrp20, sweep(cvrp20)) + 1e-9
        assert len(trace.records) == 20

    def test_cvrp_model_with_depot_features(self, cvrp20):
        hp = HyperParams(d_h=8, L=1, heads=2, r_f=2, r_c=2, d_ff=16, input_dim=8)
        best, trace = solve(cvrp20, DRHGModel(hp), SearchConfig(T=10, k_min=3, k_max=12))
        assert objective(cvrp20, best) <= objective(cvrp20, sweep(cvrp20)) + 1e-9
        assert len(trace.records) == 10

    @pytest.mark.slow
    def test_thousand_cvrp_repairs_are_feasible(self, tiny_cvrp_hp):
        model = DRHGModel(tiny_cvrp_hp)
        for seed in range(10):
            inst = gen_uniform(ProblemKind.CVRP, 20, seed)
            cfg = SearchConfig(T=100, k_min=2, k_max=20, acceptance="always", seed=seed)
            best, trace = solve(inst, model, cfg)
            objective(inst, best)
            assert len(trace.records) == 100


class TestEvaluate:
    def _solver(self, inst, rng):
        return random_insertion(inst, rng)

    def test_report(self, tmp_path):
        instances = gen_dataset(ProblemKind.TSP, 8, 3, 0)
        refs = {inst.name: objective(inst, held_karp(inst)) for inst in instances[:2]}
        report = evaluate(instances, self._solver, refs, seed=1)
        assert report.summary.count == 3
        assert all(r.gap >= -1e-12 for r in report.records[:2])
        assert report.records[2].gap is None
        assert report.summary.non_optimal <= 2
        assert list(report.summary.families) == ["tsp"]

        rows = eval_rows(report)
        assert rows[2][2] == "no-reference"
        assert rows[0][3].endswith("%")
        assert "non-optimal" in render_report(report)
        write_report(tmp_path / "eval.csv", report)
        assert (tmp_path / "eval.csv").read_text().startswith("name,objective")

    def test_workers_do_not_change_results(self):
        instances = gen_dataset(ProblemKind.TSP, 15, 6, 2)
        a = evaluate(instances, self._solver, {}, seed=3, workers=1)
        b = evaluate(instances, self._solver, {}, seed=3, workers=3)
        assert [r.objective for r in a.records] == [r.objective for r in b.records]

    def test_exact_references_give_zero_gap(self):
        instances = gen_dataset(ProblemKind.TSP, 7, 2, 5)
        refs = {inst.name: objective(inst, held_karp(inst)) for inst in instances}
        report = evaluate(instances, lambda inst, rng: held_karp(inst), refs)
        assert report.summary.mean_gap == pytest.approx(0.0, abs=1e-12)
        assert report.summary.non_optimal == 0
