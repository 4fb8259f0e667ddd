"""Multi-task graph, the consensus-shift iteration driver, and graph experiments."""

from __future__ import annotations

import hashlib
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .consensus import IDENTITY, Kernel, Metric, fuse, stack_weights
from .edges import LR, Arch, EdgeModel, TrainResult, fit, init_edge, save_edge
from .errors import ConfigError, NumericsError, WriteError
from .evaluate import (METRIC_COLUMNS, MetricRow, consensus_variance_curve, l1_x100_arrays,
                       match_histogram, metric_rows_csv, write_csv)
from .maps import DatasetSplit, TaskSpec, ViewStore
from .world import ExpertSimulator, corrupt

log = logging.getLogger(__name__)

MAX_DIVERGED = 0.25
RGB = "rgb"


def edge_seed(seed: int, src: str, dst: str, *extra: int) -> list[int]:
    """Seed material for one edge, keyed by task names rather than positions."""
    return [int(seed), zlib.crc32(src.encode()), zlib.crc32(dst.encode()), *map(int, extra)]


@dataclass(frozen=True)
class IterationConfig:
    n_iters: int = 2
    metric: Metric = Metric.PERCEPTUAL
    kernel: Kernel = IDENTITY
    retrain_from_scratch: bool = True
    epochs: int = 30
    batch: int = 2
    lr: float = LR
    arch: Arch = Arch.PATCH_MLP
    init_scale: float = 1.0
    seed: int = 0
    # Keep the rgb node equal to the raw input; its ensemble is still computed and reported.
    pin_rgb: bool = True
    # Softmax temperature applied to classification edge outputs when ensembling.
    class_temperature: float = 0.25
    probe_count: int = 4
    chunk: int = 16
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric.parse(self.metric)
                           if isinstance(self.metric, str) else self.metric)
        object.__setattr__(self, "arch", Arch(self.arch))
        if self.n_iters < 0:
            raise ConfigError("n_iters must be >= 0")
        if self.epochs < 1 or self.batch < 1 or self.chunk < 1:
            raise ConfigError("epochs, batch and chunk must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.class_temperature > 0:
            raise ConfigError("class_temperature must be > 0")
        if self.probe_count < 0:
            raise ConfigError("probe_count must be >= 0")


# -- graph ---------------------------------------------------------------------

@dataclass
class TaskGraph:
    """Tasks plus one initial (untrained) edge per ordered pair of distinct tasks."""

    tasks: tuple[TaskSpec, ...]
    edges: dict[tuple[str, str], EdgeModel]

    def __post_init__(self):
        names = self.names
        if len(set(names)) != len(names):
            raise ConfigError("task names must be unique")
        expected = {(s, d) for s in names for d in names if s != d}
        if set(self.edges) != expected:
            raise ConfigError("graph must contain exactly one edge per ordered task pair")
        for (s, d), m in self.edges.items():
            if m.src.name != s or m.dst.name != d:
                raise ConfigError(f"edge {(s, d)} holds a {m.name} model")

    @classmethod
    def fully_connected(cls, tasks, arch: Arch = Arch.PATCH_MLP, seed: int = 0,
                        scale: float = 1.0) -> TaskGraph:
        tasks = tuple(tasks)
        edges = {(s.name, d.name): init_edge(s, d, arch, edge_seed(seed, s.name, d.name), scale)
                 for s in tasks for d in tasks if s.name != d.name}
        return cls(tasks, edges)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tasks)

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError(f"unknown task {name!r}")

    def in_edges(self, dst: str) -> list[tuple[str, str]]:
        return [(s, dst) for s in self.names if s != dst]

    def induced(self, names) -> TaskGraph:
        keep = [t for t in self.tasks if t.name in set(names)]
        if len(keep) != len(set(names)):
            raise ConfigError("subgraph names must be tasks of the graph")
        kept = {t.name for t in keep}
        return TaskGraph(tuple(keep), {k: v for k, v in self.edges.items()
                                       if k[0] in kept and k[1] in kept})


# -- edge training with a content-addressed cache -----------------------------------

def _train_job(model: EdgeModel, x, y, epochs, batch, seed, lr, probe):
    """Fit one edge; on divergence retry once at lr/10. Returns None if both fail."""
    with threadpool_limits(1):
        for rate in (lr, lr / 10):
            try:
                return fit(model, x, y, epochs, batch, seed, rate, probe)
            except NumericsError as exc:
                log.warning("%s diverged at lr=%g: %s", model.name, rate, exc)
    return None


def _job_key(model, x, y, epochs, batch, seed, lr, probe) -> str:
    h = hashlib.sha256()
    h.update(f"{model.name}|{model.arch.value}|{model.patch}|{model.width}|"
             f"{epochs}|{batch}|{seed}|{lr!r}".encode())
    for arr in (model.params, x, y, probe):
        if arr is None:
            h.update(b"-")
        else:
            arr = np.ascontiguousarray(arr)
            h.update(str(arr.shape).encode() + arr.dtype.str.encode())
            h.update(arr.tobytes())
    return h.hexdigest()


class EdgeTrainer:
    """Trains batches of edges, optionally in parallel, memoizing identical jobs.

    Jobs are keyed by their full content (initial parameters, data, seeds and
    hyperparameters), so a repeated job returns the stored result unchanged.
    """

    def __init__(self, workers: int = 1):
        self.workers = workers
        self.cache: dict[str, TrainResult | None] = {}

    def train(self, jobs: list[tuple]) -> list[TrainResult | None]:
        keys = [_job_key(*job) for job in jobs]
        todo = [(k, job) for k, job in zip(keys, jobs) if k not in self.cache]
        seen, unique = set(), []
        for k, job in todo:
            if k not in seen:
                seen.add(k)
                unique.append((k, job))
        if unique:
            if self.workers > 1 and len(unique) > 1:
                from joblib import Parallel, delayed
                results = Parallel(n_jobs=self.workers)(delayed(_train_job)(*j) for _, j in unique)
            else:
                results = [_train_job(*j) for _, j in unique]
            for (k, _), r in zip(unique, results):
                self.cache[k] = r
        return [self.cache[k] for k in keys]


# -- initialization -----------------------------------------------------------------

def init_from_experts(graph: TaskGraph, experts: dict, gt: ViewStore, ids,
                      depth_reference: np.ndarray | None = None) -> ViewStore:
    """Initial pseudo-labels: expert outputs for every task, the input itself for rgb.

    ``experts`` maps task name to ExpertSimulator. When ``depth_reference`` is
    given, the pooled expert depth is histogram-specified to it.
    """
    ids = tuple(int(i) for i in ids)
    views = {}
    for t in graph.tasks:
        src = gt.take(t.name, ids)
        if t.name == RGB:
            views[t.name] = np.array(src, dtype=np.float32)
            continue
        expert = experts.get(t.name)
        if expert is None:
            raise ConfigError(f"no expert for task {t.name!r}")
        if not isinstance(expert, ExpertSimulator) or expert.task != t:
            raise ConfigError(f"expert for {t.name!r} has the wrong task")
        views[t.name] = np.stack([corrupt(t, expert.corruption, expert.seed, i, src[k])
                                  for k, i in enumerate(ids)]) if ids else src.copy()
        if t.name == "depth" and depth_reference is not None and ids:
            views[t.name] = match_histogram(views[t.name], depth_reference).astype(np.float32)
    return ViewStore(graph.tasks, ids, views, iteration=0)


# -- one iteration ---------------------------------------------------------------------

@dataclass
class IterationResult:
    store: ViewStore
    edges: dict[tuple[str, str], EdgeModel]
    traces: dict[tuple[str, str], list[float]]
    probes: dict[tuple[str, str], list[np.ndarray]]
    eval_outputs: dict[str, dict[str, np.ndarray]]
    edge_outputs: dict[tuple[str, str], np.ndarray]
    diverged: list[tuple[str, str]] = field(default_factory=list)


def train_edges(graph: TaskGraph, store: ViewStore, part, cfg: IterationConfig,
                trainer: EdgeTrainer, iteration: int, probe_ids=(),
                warm: dict | None = None, dests=None):
    """Train every edge (or every in-edge of ``dests``) on ``part`` from ``store``."""
    keys = sorted(k for k in graph.edges if dests is None or k[1] in dests)
    jobs = []
    for s, d in keys:
        model = graph.edges[(s, d)]
        if not cfg.retrain_from_scratch and warm and (s, d) in warm:
            model = warm[(s, d)]
        probe = store.take(s, probe_ids) if len(probe_ids) else None
        jobs.append((model, store.take(s, part), store.take(d, part), cfg.epochs, cfg.batch,
                     edge_seed(cfg.seed, s, d, iteration), cfg.lr, probe))
    results = trainer.train(jobs)
    trained, traces, probes, diverged = {}, {}, {}, []
    for key, res in zip(keys, results):
        if res is None:
            diverged.append(key)
            continue
        trained[key], traces[key], probes[key] = res.model, res.trace, res.probes
    if len(diverged) > MAX_DIVERGED * len(keys):
        raise NumericsError(f"{len(diverged)} of {len(keys)} edges diverged")
    return trained, traces, probes, diverged


def _ensemble_destination(dst: TaskSpec, models: list[EdgeModel], current: np.ndarray,
                          inputs: list[np.ndarray], eval_rows: np.ndarray, metric: Metric,
                          kernel: Kernel, chunk: int, temperature: float = 1.0):
    """Selection ensemble for one destination over all store rows.

    Returns the refreshed views plus baseline outputs and per-edge predictions
    for ``eval_rows``.
    """
    n = len(current)
    out = np.empty_like(current)
    is_eval = np.zeros(n, dtype=bool)
    is_eval[eval_rows] = True
    pos = {r: k for k, r in enumerate(eval_rows)}
    shape = (len(eval_rows),) + current.shape[1:]
    extra = {"mean_ensemble": np.empty(shape, np.float32),
             "avg_direct_edges": np.empty(shape, np.float32),
             "direct_edge": np.empty(shape, np.float32)}
    per_edge = [np.empty(shape, np.float32) for _ in models]
    direct = next((k for k, m in enumerate(models) if m.src.name == RGB), None)
    with threadpool_limits(1):
        for start in range(0, n, chunk):
            sl = slice(start, min(start + chunk, n))
            preds = [m.predict(x[sl], temperature=temperature).astype(np.float32)
                     for m, x in zip(models, inputs)]
            stack = np.stack(preds + [current[sl]])
            w = stack_weights(stack, len(preds), metric, kernel)
            out[sl] = fuse(stack, dst, w)
            rows = np.nonzero(is_eval[sl])[0]
            if len(rows) == 0:
                continue
            at = [pos[start + r] for r in rows]
            extra["mean_ensemble"][at] = fuse(stack[:, rows], dst)
            if preds:
                extra["avg_direct_edges"][at] = fuse(stack[:-1, rows], dst)
            for k, p in enumerate(preds):
                per_edge[k][at] = p[rows]
            if direct is not None:
                extra["direct_edge"][at] = preds[direct][rows]
    if not models:
        extra.pop("avg_direct_edges")
    if direct is None:
        extra.pop("direct_edge")
    return out, extra, per_edge


def ensemble_phase(graph: TaskGraph, store: ViewStore, edges: dict, cfg: IterationConfig,
                   eval_ids=(), metric: Metric | None = None, kernel: Kernel | None = None,
                   dests=None):
    """Refresh every view of every stored sample from the trained ``edges``.

    Reads only ``store`` (the snapshot) and returns a new store. With ``dests``
    only those tasks are refreshed; the others are copied unchanged.
    """
    metric = cfg.metric if metric is None else metric
    kernel = cfg.kernel if kernel is None else kernel
    eval_rows = store.rows(eval_ids)
    args = []
    for d in graph.tasks:
        if dests is not None and d.name not in dests:
            continue
        keys = [k for k in graph.in_edges(d.name) if k in edges]
        args.append((d, [edges[k] for k in keys], store.views[d.name],
                     [store.views[s] for s, _ in keys], eval_rows, metric, kernel, cfg.chunk,
                     cfg.class_temperature))
    if cfg.workers > 1 and len(args) > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=cfg.workers)(delayed(_ensemble_destination)(*a) for a in args)
    else:
        results = [_ensemble_destination(*a) for a in args]
    views = {name: arr.copy() for name, arr in store.views.items()}
    eval_outputs, edge_outputs = {}, {}
    for (d, models, *_), (out, extra, per_edge) in zip(args, results):
        extra["cshift"] = out[eval_rows]
        if not (cfg.pin_rgb and d.name == RGB):
            views[d.name] = out
        eval_outputs[d.name] = extra
        for m, p in zip(models, per_edge):
            edge_outputs[(m.src.name, m.dst.name)] = p
    new = ViewStore(store.tasks, store.ids, views, iteration=store.iteration + 1)
    return new, eval_outputs, edge_outputs


def run_iteration(graph: TaskGraph, store: ViewStore, part, cfg: IterationConfig,
                  trainer: EdgeTrainer | None = None, iteration: int | None = None,
                  eval_ids=(), probe_ids=(), warm: dict | None = None,
                  dests=None) -> IterationResult:
    """Train all edges on ``part`` of the current views, then refresh all views.

    ``dests`` restricts both phases to the given destination tasks.
    """
    trainer = trainer or EdgeTrainer(cfg.workers)
    k = store.iteration + 1 if iteration is None else iteration
    store.rows(part)
    log.info("iteration %d: training %d edges on %d samples", k, len(graph.edges), len(part))
    trained, traces, probes, diverged = train_edges(graph, store, part, cfg, trainer, k,
                                                    probe_ids, warm, dests)
    log.info("iteration %d: ensembling %d tasks over %d samples", k, len(graph.tasks),
             len(store.ids))
    new, eval_outputs, edge_outputs = ensemble_phase(graph, store, trained, cfg, eval_ids,
                                                     dests=dests)
    return IterationResult(new, trained, traces, probes, eval_outputs, edge_outputs, diverged)


# -- full run ----------------------------------------------------------------------

@dataclass
class RunResult:
    store: ViewStore
    rows: list[MetricRow]
    iterations: list[IterationResult]
    edge_rows: list[list[tuple[str, str, float]]]
    variance: list[list[float]]


def expert_rows(store: ViewStore, gt: ViewStore, eval_ids, iteration: int) -> list[MetricRow]:
    return [MetricRow(iteration, t.name, "expert",
                      l1_x100_arrays(store.take(t.name, eval_ids), gt.take(t.name, eval_ids)))
            for t in store.tasks if t.name != RGB]


def iteration_rows(result: IterationResult, init: ViewStore, gt: ViewStore, eval_ids,
                   iteration: int) -> list[MetricRow]:
    rows = []
    for t in result.store.tasks:
        truth = gt.take(t.name, eval_ids)
        if t.name != RGB:
            rows.append(MetricRow(iteration, t.name, "expert",
                                  l1_x100_arrays(init.take(t.name, eval_ids), truth)))
        for method in ("direct_edge", "avg_direct_edges", "mean_ensemble", "cshift"):
            arr = result.eval_outputs[t.name].get(method)
            if arr is not None:
                rows.append(MetricRow(iteration, t.name, method, l1_x100_arrays(arr, truth)))
    return rows


def edge_l1_rows(result: IterationResult, gt: ViewStore, eval_ids):
    return [(s, d, l1_x100_arrays(result.edge_outputs[(s, d)], gt.take(d, eval_ids)))
            for s, d in sorted(result.edge_outputs)]


def _write_iteration(run_dir: Path, k: int, store: ViewStore, pool, rows, edges=None,
                     edge_rows=None, variance=None):
    d = run_dir / f"iter{k}"
    try:
        (d / "edges").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise WriteError(str(exc)) from exc
    store.save(d / "labels", pool)
    write_csv(d / "metrics.csv", METRIC_COLUMNS, metric_rows_csv(rows))
    for (s, t), m in sorted((edges or {}).items()):
        save_edge(m, d / "edges" / f"{s}__{t}.csprm")
    if edge_rows is not None:
        write_csv(d / "edge_metrics.csv", ("src", "dst", "l1_x100"), edge_rows)
    if variance is not None:
        write_csv(d / "variance.csv", ("epoch", "variance"),
                  [(e + 1, float(v)) for e, v in enumerate(variance)])


def run_cshift(graph: TaskGraph, splits: DatasetSplit, experts: dict, cfg: IterationConfig,
               gt: ViewStore, eval_ids=None, run_dir=None, trainer: EdgeTrainer | None = None,
               depth_reference: np.ndarray | None = None, store: ViewStore | None = None,
               ) -> RunResult:
    """Expert initialization followed by ``cfg.n_iters`` consensus-shift iterations.

    Evaluation samples (default: the test split) ride along in the store: the
    ensemble refreshes them like pool samples but no edge trains on them.
    """
    if cfg.n_iters > 0 and len(splits.parts) != cfg.n_iters:
        raise ConfigError(f"{len(splits.parts)} dataset parts for {cfg.n_iters} iterations")
    eval_ids = tuple(splits.test if eval_ids is None else eval_ids)
    pool = splits.pool
    ids = tuple(sorted(set(pool) | set(eval_ids)))
    trainer = trainer or EdgeTrainer(cfg.workers)
    if store is None:
        store = init_from_experts(graph, experts, gt, ids, depth_reference)
    init = store
    probe_ids = _probes(cfg, eval_ids, None)
    rows = expert_rows(store, gt, eval_ids, 0) if cfg.n_iters == 0 else []
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        _write_iteration(run_dir, 0, store, pool, rows if cfg.n_iters == 0 else [])
    results, edge_tables, curves = [], [], []
    prev = None
    for k in range(1, cfg.n_iters + 1):
        res = run_iteration(graph, store, splits.parts[k - 1], cfg, trainer, k, eval_ids,
                            probe_ids, warm=prev)
        it_rows = iteration_rows(res, init, gt, eval_ids, k)
        e_rows = edge_l1_rows(res, gt, eval_ids)
        curve = consensus_variance_curve(res.probes)
        if run_dir is not None:
            _write_iteration(run_dir, k, res.store, pool, it_rows, res.edges, e_rows, curve)
        rows.extend(it_rows)
        results.append(res)
        edge_tables.append(e_rows)
        curves.append(curve)
        store, prev = res.store, res.edges
    return RunResult(store, rows, results, edge_tables, curves)


# -- experiments --------------------------------------------------------------------

def _probes(cfg: IterationConfig, eval_ids, probe_ids) -> tuple:
    # Same default as run_cshift so experiments reuse its cached edges.
    return tuple(eval_ids)[:cfg.probe_count] if probe_ids is None else tuple(probe_ids)


def node_order(graph: TaskGraph, dest: str, ordering: str, seed: int = 0,
               expert_l1: dict | None = None) -> list[str]:
    """Order of the non-destination, non-rgb tasks added after ``{dest, rgb}``."""
    rest = [n for n in graph.names if n not in (dest, RGB)]
    if ordering == "random":
        rng = np.random.default_rng([int(seed), zlib.crc32(dest.encode())])
        return [rest[i] for i in rng.permutation(len(rest))]
    if ordering == "performance":
        if expert_l1 is None:
            raise ConfigError("performance ordering needs expert errors")
        return sorted(rest, key=lambda n: (expert_l1[n], n))
    raise ConfigError(f"unknown ordering {ordering!r}")


def node_addition_experiment(graph: TaskGraph, store: ViewStore, gt: ViewStore, part, eval_ids,
                             cfg: IterationConfig, dest: str, ordering: str, seed: int = 0,
                             trainer: EdgeTrainer | None = None,
                             probe_ids=None) -> list[tuple[int, float, float]]:
    """Grow the graph from ``{dest, rgb}`` one node at a time; one iteration per size.

    Returns ``(n_nodes, cshift_l1, mean_ensemble_l1)`` for ``dest`` on ``eval_ids``.
    """
    if len(graph.tasks) < 3:
        raise ConfigError("node addition needs at least 3 tasks")
    if dest == RGB or dest not in graph.names or RGB not in graph.names:
        raise ConfigError("destination must be a non-rgb task of a graph containing rgb")
    trainer = trainer or EdgeTrainer(cfg.workers)
    expert_l1 = {n: l1_x100_arrays(store.take(n, eval_ids), gt.take(n, eval_ids))
                 for n in graph.names}
    order = node_order(graph, dest, ordering, seed, expert_l1)
    truth = gt.take(dest, eval_ids)
    curve = []
    for n in range(2, len(graph.tasks) + 1):
        names = [dest, RGB] + order[:n - 2]
        sub = graph.induced(names)
        res = run_iteration(sub, store.subset(store.ids, sub.names), part, cfg, trainer, 1,
                            eval_ids, _probes(cfg, eval_ids, probe_ids), dests=(dest,))
        outs = res.eval_outputs[dest]
        curve.append((n, l1_x100_arrays(outs["cshift"], truth),
                      l1_x100_arrays(outs["mean_ensemble"], truth)))
    return curve


def weak_expert_sweep(graph: TaskGraph, experts: dict, gt: ViewStore, splits: DatasetSplit,
                      cfg: IterationConfig, task: str, corruptions, eval_ids=None,
                      trainer: EdgeTrainer | None = None, probe_ids=None,
                      depth_reference: np.ndarray | None = None) -> list[tuple]:
    """One iteration per expert corruption of ``task``; other experts stay fixed.

    ``corruptions`` is a sequence of ``(label, Corruption)``. Rows are
    ``(label, expert_l1, mean_l1, cshift_l1, boost_pct)``.
    """
    if task not in graph.names:
        raise ConfigError(f"unknown task {task!r}")
    trainer = trainer or EdgeTrainer(cfg.workers)
    eval_ids = tuple(splits.test if eval_ids is None else eval_ids)
    ids = tuple(sorted(set(splits.pool) | set(eval_ids)))
    truth = gt.take(task, eval_ids)
    rows = []
    for label, corr in corruptions:
        exps = dict(experts)
        exps[task] = replace(experts[task], corruption=corr)
        store = init_from_experts(graph, exps, gt, ids, depth_reference)
        res = run_iteration(graph, store, splits.parts[0], cfg, trainer, 1, eval_ids,
                            _probes(cfg, eval_ids, probe_ids))
        e = l1_x100_arrays(store.take(task, eval_ids), truth)
        m = l1_x100_arrays(res.eval_outputs[task]["mean_ensemble"], truth)
        c = l1_x100_arrays(res.eval_outputs[task]["cshift"], truth)
        boost = 0.0 if e == 0 else 100.0 * (e - c) / e
        rows.append((label, e, m, c, boost))
    return rows


def metric_ablation(graph: TaskGraph, store: ViewStore, gt: ViewStore, part, eval_ids,
                    cfg: IterationConfig, metrics, trainer: EdgeTrainer | None = None,
                    tasks=None, probe_ids=None) -> list[tuple]:
    """Train edges once, then ensemble under each metric.

    Rows are ``(metric, task, expert_l1, mean_l1, cshift_l1)``.
    """
    trainer = trainer or EdgeTrainer(cfg.workers)
    tasks = [t for t in graph.names if t != RGB] if tasks is None else list(tasks)
    trained, *_ = train_edges(graph, store, part, cfg, trainer, 1,
                              _probes(cfg, eval_ids, probe_ids), dests=tasks)
    rows = []
    for metric in metrics:
        metric = Metric.parse(metric) if isinstance(metric, str) else metric
        _, outs, _ = ensemble_phase(graph, store, trained, cfg, eval_ids, metric=metric,
                                    dests=tasks)
        for t in tasks:
            truth = gt.take(t, eval_ids)
            rows.append((metric.value, t, l1_x100_arrays(store.take(t, eval_ids), truth),
                         l1_x100_arrays(outs[t]["mean_ensemble"], truth),
                         l1_x100_arrays(outs[t]["cshift"], truth)))
    return rows
