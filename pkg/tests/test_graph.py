import numpy as np
import pytest

from cshift.consensus import Metric
from cshift.edges import Arch
from cshift.errors import ConfigError
from cshift.graph import (EdgeTrainer, IterationConfig, TaskGraph, ensemble_phase,
                          init_from_experts, metric_ablation, node_addition_experiment,
                          node_order, run_cshift, run_iteration, train_edges,
                          weak_expert_sweep)
from cshift.maps import ViewStore, make_splits
from cshift.world import (Corruption, SceneConfig, default_experts, ground_truth_store,
                          roster)

SCENE = SceneConfig(h=16, w=16, seed=2)
TASKS = roster(("rgb", "grayscale", "depth", "seg"), SCENE)
CFG = IterationConfig(n_iters=2, epochs=2, arch=Arch.PATCH_LINEAR, probe_count=2)


@pytest.fixture(scope="module")
def world():
    splits = make_splits(20, 2, 0.1, 0.2, 0)
    gt = ground_truth_store(SCENE, TASKS, splits.all_ids)
    graph = TaskGraph.fully_connected(TASKS, Arch.PATCH_LINEAR, seed=1)
    experts = default_experts(TASKS, 0.1, 0)
    ids = tuple(sorted(set(splits.pool) | set(splits.test)))
    store = init_from_experts(graph, experts, gt, ids)
    return splits, gt, graph, experts, store


def same_store(a: ViewStore, b: ViewStore) -> bool:
    return a.ids == b.ids and all(np.array_equal(a.views[t], b.views[t]) for t in a.views)


def test_graph_is_complete():
    g = TaskGraph.fully_connected(TASKS)
    assert len(g.edges) == len(TASKS) * (len(TASKS) - 1)
    assert g.in_edges("depth") == [("rgb", "depth"), ("grayscale", "depth"), ("seg", "depth")]
    sub = g.induced(["rgb", "depth"])
    assert set(sub.edges) == {("rgb", "depth"), ("depth", "rgb")}
    edges = dict(g.edges)
    edges.pop(("rgb", "depth"))
    with pytest.raises(ConfigError):
        TaskGraph(g.tasks, edges)
    with pytest.raises(ConfigError):
        g.induced(["rgb", "normals"])


def test_init_from_experts(world):
    splits, gt, graph, experts, store = world
    assert np.array_equal(store.views["rgb"], gt.take("rgb", store.ids))
    assert not np.array_equal(store.views["depth"], gt.take("depth", store.ids))
    store.validate()
    missing = {k: v for k, v in experts.items() if k != "seg"}
    with pytest.raises(ConfigError):
        init_from_experts(graph, missing, gt, store.ids)
    swapped = dict(experts, seg=experts["depth"])
    with pytest.raises(ConfigError):
        init_from_experts(graph, swapped, gt, store.ids)


def test_iteration_reads_snapshot_only(world):
    splits, gt, graph, experts, store = world
    before = store.copy()
    res = run_iteration(graph, store, splits.parts[0], CFG, EdgeTrainer(), 1, splits.test)
    assert same_store(store, before)
    assert res.store.iteration == store.iteration + 1
    res.store.validate()
    # Each destination depends only on the snapshot, so refreshing one at a time agrees.
    for t in graph.names:
        one, _, _ = ensemble_phase(graph, store, res.edges, CFG, dests=(t,))
        assert np.array_equal(one.views[t], res.store.views[t])
    assert np.array_equal(res.store.views["rgb"], store.views["rgb"])


def test_eval_passengers_are_not_trained_on(world):
    splits, gt, graph, experts, store = world
    poisoned = store.copy()
    rows = poisoned.rows(splits.test)
    for t in poisoned.views:
        poisoned.views[t][rows] = store.views[t][rows][::-1]
    a, *_ = train_edges(graph, store, splits.parts[0], CFG, EdgeTrainer(), 1)
    b, *_ = train_edges(graph, poisoned, splits.parts[0], CFG, EdgeTrainer(), 1)
    for k in a:
        assert np.array_equal(a[k].params, b[k].params)


def test_dests_restriction(world):
    splits, gt, graph, experts, store = world
    res = run_iteration(graph, store, splits.parts[0], CFG, EdgeTrainer(), 1, splits.test,
                        dests=("depth",))
    assert set(res.edges) == set(graph.in_edges("depth"))
    assert set(res.eval_outputs) == {"depth"}
    for t in ("grayscale", "seg"):
        assert np.array_equal(res.store.views[t], store.views[t])


def test_run_is_deterministic_and_worker_independent(world):
    splits, gt, graph, experts, _ = world
    a = run_cshift(graph, splits, experts, CFG, gt)
    b = run_cshift(graph, splits, experts, CFG, gt)
    c = run_cshift(graph, splits, experts, IterationConfig(**{**CFG.__dict__, "workers": 2}), gt)
    for other in (b, c):
        assert same_store(a.store, other.store)
        assert [r.__dict__ for r in a.rows] == [r.__dict__ for r in other.rows]
        assert a.variance == other.variance


def test_run_rows_and_curves(world, tmp_path):
    splits, gt, graph, experts, _ = world
    res = run_cshift(graph, splits, experts, CFG, gt, run_dir=tmp_path)
    methods = {(r.iteration, r.task, r.method) for r in res.rows}
    for k in (1, 2):
        assert (k, "depth", "expert") in methods and (k, "depth", "cshift") in methods
        assert (k, "depth", "direct_edge") in methods
        assert (k, "rgb", "cshift") in methods and (k, "rgb", "expert") not in methods
        assert len(res.variance[k - 1]) == CFG.epochs
        assert (tmp_path / f"iter{k}" / "metrics.csv").exists()
        assert len(list((tmp_path / f"iter{k}" / "edges").iterdir())) == len(graph.edges)
    assert (tmp_path / "iter0" / "labels").is_dir()


def test_zero_iterations_reports_experts(world):
    splits, gt, graph, experts, store = world
    cfg = IterationConfig(n_iters=0, epochs=1)
    res = run_cshift(graph, splits, experts, cfg, gt)
    assert {r.method for r in res.rows} == {"expert"}
    assert {r.iteration for r in res.rows} == {0}
    assert same_store(res.store, store)
    with pytest.raises(ConfigError):
        run_cshift(graph, splits, experts, IterationConfig(n_iters=3), gt)


def test_trainer_cache_reuses_results(world):
    splits, gt, graph, experts, store = world
    trainer = EdgeTrainer()
    a, *_ = train_edges(graph, store, splits.parts[0], CFG, trainer, 1)
    n = len(trainer.cache)
    b, *_ = train_edges(graph, store, splits.parts[0], CFG, trainer, 1)
    assert len(trainer.cache) == n
    assert all(a[k] is b[k] for k in a)


def test_node_order(world):
    splits, gt, graph, experts, store = world
    r = node_order(graph, "depth", "random", 3)
    assert sorted(r) == ["grayscale", "seg"] and r == node_order(graph, "depth", "random", 3)
    p = node_order(graph, "depth", "performance", expert_l1={"grayscale": 5, "seg": 1})
    assert p == ["seg", "grayscale"]
    with pytest.raises(ConfigError):
        node_order(graph, "depth", "performance")
    with pytest.raises(ConfigError):
        node_order(graph, "depth", "alphabetical")


def test_experiments_shapes(world):
    splits, gt, graph, experts, store = world
    trainer = EdgeTrainer()
    curve = node_addition_experiment(graph, store, gt, splits.parts[0], splits.test, CFG,
                                     "depth", "random", 0, trainer)
    assert [n for n, *_ in curve] == [2, 3, 4]
    sweep = weak_expert_sweep(graph, experts, gt, splits, CFG, "depth",
                              [("a", Corruption.at_level(0.05)), ("b", Corruption.at_level(0.2))],
                              trainer=trainer)
    assert [r[0] for r in sweep] == ["a", "b"] and sweep[0][1] < sweep[1][1]
    rows = metric_ablation(graph, store, gt, splits.parts[0], splits.test, CFG, list(Metric),
                           trainer, tasks=["depth"])
    assert [r[0] for r in rows] == [m.value for m in Metric]
    assert len({r[2] for r in rows}) == 1
    with pytest.raises(ConfigError):
        node_addition_experiment(graph, store, gt, splits.parts[0], splits.test, CFG, "rgb",
                                 "random")


def test_iteration_config_validation():
    for bad in (dict(n_iters=-1), dict(epochs=0), dict(lr=0.0), dict(workers=0),
                dict(class_temperature=0.0), dict(metric="cosine")):
        with pytest.raises((ConfigError, ValueError)):
            IterationConfig(**bad)
    assert IterationConfig(metric="var").metric is Metric.VARIANCE
