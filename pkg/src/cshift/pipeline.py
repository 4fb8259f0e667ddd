"""End-to-end drivers behind the command line: datasets, runs and experiments.

Dataset directories hold ``<root>/<split>/<sample>/<task>.csmap`` with splits
``part1 .. partK``, ``val`` and ``test``, plus the resolved ``config.yaml``.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .consensus import Metric
from .edges import Arch, fit, init_edge
from .errors import ConfigError, FormatError, WriteError
from .evaluate import (bar_plot_svg, edge_improvement_report, emit_reports, line_plot_svg,
                       mmd2_unbiased, read_metric_rows, write_csv)
from .graph import (RGB, EdgeTrainer, RunResult, TaskGraph, init_from_experts, metric_ablation,
                    node_addition_experiment, run_cshift, weak_expert_sweep)
from .maps import DatasetSplit, ViewStore, make_splits
from .world import Corruption, SceneConfig, ground_truth_store, roster

log = logging.getLogger(__name__)


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise WriteError(f"cannot create {path}: {exc}") from exc
    return path


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


# -- datasets ------------------------------------------------------------------

def dataset_splits(cfg: RunConfig) -> DatasetSplit:
    d = cfg.dataset
    return make_splits(d.n_samples, max(cfg.n_iters, 1), d.val_frac, d.test_frac, d.split_seed)


def split_groups(splits: DatasetSplit) -> list[tuple[str, tuple[int, ...]]]:
    groups = [(f"part{k + 1}", p) for k, p in enumerate(splits.parts)]
    return groups + [("val", splits.val), ("test", splits.test)]


def write_dataset(cfg: RunConfig, out, png: bool = False) -> DatasetSplit:
    """Render ground truth for every sample into the dataset directory layout."""
    out = _mkdir(Path(out))
    splits = dataset_splits(cfg)
    tasks = cfg.task_specs()
    gt = ground_truth_store(cfg.dataset.scene, tasks, splits.all_ids)
    for name, ids in split_groups(splits):
        gt.save(out / name, ids)
        if png:
            from PIL import Image
            for i in ids:
                rgb = np.round(gt.take(RGB, [i])[0] * 255).astype(np.uint8)
                try:
                    Image.fromarray(rgb).save(out / name / str(i) / "rgb.png")
                except OSError as exc:
                    raise WriteError(f"cannot write png: {exc}") from exc
    _write_text(out / "config.yaml", dump_config(cfg))
    log.info("wrote %d samples to %s", len(splits.all_ids), out)
    return splits


def read_dataset(root, tasks) -> tuple[ViewStore, DatasetSplit]:
    """Load a dataset directory; the split layout is read from the subdirectories."""
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"dataset directory {root} does not exist")
    parts = sorted((p for p in root.glob("part*") if p.name[4:].isdigit()),
                   key=lambda p: int(p.name[4:]))
    if not parts or not (root / "val").is_dir() or not (root / "test").is_dir():
        raise FormatError(f"{root}: expected part1.., val and test subdirectories")
    stores = [ViewStore.load(d, tasks) for d in [*parts, root / "val", root / "test"]]
    splits = DatasetSplit(tuple(s.ids for s in stores[:-2]), stores[-2].ids, stores[-1].ids)
    ids = splits.all_ids
    where = {i: (k, r) for k, s in enumerate(stores) for r, i in enumerate(s.ids)}
    views = {t.name: np.stack([stores[where[i][0]].views[t.name][where[i][1]] for i in ids])
             for t in tasks}
    return ViewStore(tuple(tasks), ids, views), splits


def dataset_for(cfg: RunConfig, root=None) -> tuple[ViewStore, DatasetSplit]:
    """Ground truth and splits from ``root`` (or the config's root), else rendered."""
    root = root or cfg.dataset.root
    tasks = cfg.task_specs()
    if root:
        return read_dataset(root, tasks)
    splits = dataset_splits(cfg)
    return ground_truth_store(cfg.dataset.scene, tasks, splits.all_ids), splits


def _trim(splits: DatasetSplit, n_iters: int) -> DatasetSplit:
    if n_iters > len(splits.parts):
        raise ConfigError(f"{n_iters} iterations but the dataset has {len(splits.parts)} parts")
    if n_iters == 0 or n_iters == len(splits.parts):
        return splits
    return DatasetSplit(splits.parts[:n_iters], splits.val, splits.test)


def build_graph(cfg: RunConfig, icfg) -> TaskGraph:
    return TaskGraph.fully_connected(cfg.task_specs(), icfg.arch, seed=icfg.seed,
                                     scale=icfg.init_scale)


# -- full runs -------------------------------------------------------------------

def run_pipeline(cfg: RunConfig, out, workers: int = 1, n_iters: int | None = None,
                 metric: str | None = None, root=None,
                 trainer: EdgeTrainer | None = None) -> RunResult:
    """Expert initialization plus the consensus-shift iterations, written to ``out``.

    Per-iteration results are written as soon as they exist, so a numeric
    failure leaves the completed iterations on disk.
    """
    icfg = cfg.iteration_config(workers, n_iters, metric)
    out = _mkdir(Path(out))
    resolved = dataclasses.replace(
        cfg, n_iters=icfg.n_iters,
        training=dataclasses.replace(cfg.training, metric=icfg.metric.value))
    _write_text(out / "config.yaml", dump_config(resolved))
    gt, splits = dataset_for(cfg, root)
    splits = _trim(splits, icfg.n_iters)
    ref = _depth_reference(cfg, gt, splits)
    try:
        result = run_cshift(build_graph(cfg, icfg), splits, cfg.experts_for(), icfg, gt,
                            run_dir=out, trainer=trainer or EdgeTrainer(workers),
                            depth_reference=ref)
    finally:
        emit_reports(out)
    if len(result.edge_rows) >= 2:
        first = {(s, d): v for s, d, v in result.edge_rows[0]}
        last = {(s, d): v for s, d, v in result.edge_rows[-1]}
        write_csv(out / "edge_improvement.csv", ("src", "dst", "improvement_pct"),
                  edge_improvement_report(first, last))
    return result


def compare_runs(run_dirs, out) -> list[tuple]:
    """Metric-comparison table over runs: the final iteration of each run.

    Rows are ``(metric, task, expert, mean_ensemble, cshift)``, one per non-rgb task
    per run.
    """
    rows = []
    for d in run_dirs:
        d = Path(d)
        if not (d / "config.yaml").is_file() or not (d / "metrics.csv").is_file():
            raise FormatError(f"{d} is not a finished run directory")
        metric = load_config(d / "config.yaml").training.metric
        found = read_metric_rows(d / "metrics.csv")
        if not found:
            raise FormatError(f"run {d} has no metrics")
        last = max(r.iteration for r in found)
        table: dict[str, dict] = {}
        for r in found:
            if r.iteration == last:
                table.setdefault(r.task, {})[r.method] = r.value
        for task in sorted(table):
            vals = table[task]
            if "cshift" not in vals or "expert" not in vals:
                continue
            rows.append((metric, task, vals["expert"],
                         vals["mean_ensemble"], vals["cshift"]))
    write_csv(out, ("metric", "task", "expert", "mean_ensemble", "cshift"), rows)
    return rows


# -- experiments -------------------------------------------------------------------

def _depth_reference(cfg: RunConfig, gt, splits):
    """Validation depth used to align expert depth, or None when alignment is off."""
    if cfg.training.depth_alignment and "depth" in cfg.tasks:
        return gt.take("depth", splits.val)
    return None


def _experiment_setup(cfg: RunConfig, workers: int, root=None):
    icfg = cfg.iteration_config(workers, n_iters=1)
    gt, splits = dataset_for(cfg, root)
    graph = build_graph(cfg, icfg)
    ids = tuple(sorted(set(splits.pool) | set(splits.test)))
    return icfg, gt, splits, graph, ids, _depth_reference(cfg, gt, splits)


def _task_name(cfg: RunConfig, name: str, what: str) -> str:
    if name not in cfg.tasks or name == RGB:
        raise ConfigError(f"{what}: {name!r} is not a non-rgb task of the roster")
    return name


def node_sweep(cfg: RunConfig, out, workers: int = 1, root=None,
               trainer: EdgeTrainer | None = None) -> dict[str, list[tuple]]:
    """CShift error of one destination as nodes are added, per ordering."""
    exp = cfg.experiments.node_sweep
    dest = _task_name(cfg, exp.dest, "node_sweep.dest")
    icfg, gt, splits, graph, ids, ref = _experiment_setup(cfg, workers, root)
    trainer = trainer or EdgeTrainer(workers)
    store = init_from_experts(graph, cfg.experts_for(graph.tasks), gt, ids, ref)
    curves = {o: node_addition_experiment(graph, store, gt, splits.parts[0], splits.test, icfg,
                                          dest, o, exp.order_seed, trainer)
              for o in exp.orderings}
    out = _mkdir(Path(out))
    write_csv(out / "node_sweep.csv", ("ordering", "n_nodes", "cshift_l1", "mean_l1"),
              [(o, n, c, m) for o, curve in curves.items() for n, c, m in curve])
    series = {f"cshift {o}": [(n, c) for n, c, _ in curve] for o, curve in curves.items()}
    series.update({f"mean {o}": [(n, m) for n, _, m in curve] for o, curve in curves.items()})
    _write_text(out / "node_sweep.svg",
                line_plot_svg(series, f"{dest}: error vs graph size", "nodes", "L1 x100"))
    return curves


def weak_expert(cfg: RunConfig, out, workers: int = 1, root=None,
                trainer: EdgeTrainer | None = None) -> list[tuple]:
    """Boost of CShift over an expert of varying strength."""
    exp = cfg.experiments.weak_expert
    task = _task_name(cfg, exp.task, "weak_expert.task")
    if not exp.levels:
        raise ConfigError("weak_expert.levels must not be empty")
    icfg, gt, splits, graph, _, ref = _experiment_setup(cfg, workers, root)
    kind = graph.task(task).kind
    corr = [(f"{lv:g}", Corruption.at_level(lv, kind)) for lv in exp.levels]
    rows = weak_expert_sweep(graph, cfg.experts_for(graph.tasks), gt, splits, icfg, task, corr,
                             trainer=trainer or EdgeTrainer(workers), depth_reference=ref)
    out = _mkdir(Path(out))
    write_csv(out / "weak_expert.csv",
              ("level", "expert_l1", "mean_l1", "cshift_l1", "boost_pct"), rows)
    groups = {lab: {"expert": e, "mean_ensemble": m, "cshift": c} for lab, e, m, c, _ in rows}
    _write_text(out / "weak_expert.svg",
                bar_plot_svg(groups, f"{task}: expert strength sweep", "L1 x100"))
    return rows


def ablation(cfg: RunConfig, out, workers: int = 1, root=None,
             trainer: EdgeTrainer | None = None) -> list[tuple]:
    """Train once, then compare the ensemble under each similarity metric."""
    exp = cfg.experiments.ablation
    tasks = [_task_name(cfg, t, "ablation.tasks") for t in exp.tasks]
    metrics = [Metric.parse(m) for m in exp.metrics]
    icfg, gt, splits, graph, ids, ref = _experiment_setup(cfg, workers, root)
    store = init_from_experts(graph, cfg.experts_for(graph.tasks), gt, ids, ref)
    rows = metric_ablation(graph, store, gt, splits.parts[0], splits.test, icfg, metrics,
                           trainer or EdgeTrainer(workers), tasks)
    out = _mkdir(Path(out))
    write_csv(out / "ablation.csv", ("metric", "task", "expert", "mean_ensemble", "cshift"),
              rows)
    groups = {f"{m} {t}": {"expert": e, "mean_ensemble": me, "cshift": c}
              for m, t, e, me, c in rows}
    _write_text(out / "ablation.svg", bar_plot_svg(groups, "Metric ablation", "L1 x100"))
    return rows


def _pool(x: np.ndarray, cells: int) -> np.ndarray:
    """Average-pool (N, H, W, C) to (N, cells, cells, C); H and W must divide evenly."""
    n, h, w, c = x.shape
    if h % cells or w % cells:
        cells = 1
    return x.reshape(n, cells, h // cells, cells, w // cells, c).mean(axis=(2, 4))


def mmd_experiment(cfg: RunConfig, out, workers: int = 1) -> list[tuple]:
    """Within-domain versus cross-domain MMD on raw rgb and learned edge features.

    Domain A is the configured scene; domain B applies ``experiments.mmd.shift``.
    Each trial ``t`` draws fresh sample ids for two disjoint A splits (``A#t``,
    ``A'#t``) and renders the ``A'#t`` ids in domain B (``B#t``). Representations
    are the raw rgb maps and the pooled hidden features of rgb -> task edges.
    Returns ``(trial, representation, within_x100, cross_x100)`` rows.
    """
    exp = cfg.experiments.mmd
    scene_a = cfg.dataset.scene
    try:
        scene_b = dataclasses.replace(scene_a, **exp.shift)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"experiments.mmd.shift: {exc}") from None
    if exp.samples < 2 or exp.trials < 1:
        raise ConfigError("experiments.mmd needs samples >= 2 and trials >= 1")
    bandwidth = exp.bandwidth if exp.bandwidth == "median" else _bandwidth(exp.bandwidth)
    rgb = roster([RGB], scene_a)[0]
    # Learned embeddings: rgb -> task edges trained on domain-A ground truth.
    s = exp.samples
    train_ids = list(range(exp.trials * 2 * s, exp.trials * 2 * s + 2 * s))
    encoders = []
    for name in exp.feature_edges:
        dst = roster([name], scene_a)[0]
        gt = ground_truth_store(scene_a, (rgb, dst), train_ids)
        model = init_edge(rgb, dst, Arch.PATCH_MLP, [cfg.training.seed, 7])
        res = fit(model, gt.views[RGB], gt.views[name], exp.feature_epochs,
                  cfg.training.batch, [cfg.training.seed, 11], cfg.training.lr)
        encoders.append(res.model)

    def embed(scene: SceneConfig, ids) -> dict[str, np.ndarray]:
        x = ground_truth_store(scene, (rgb,), ids).views[RGB]
        emb = {"raw": x.reshape(len(ids), -1).astype(np.float64)}
        if encoders:
            emb["features"] = np.concatenate(
                [_pool(m.features(x), 8).reshape(len(ids), -1) for m in encoders], axis=1)
        return emb

    rows = []
    for t in range(exp.trials):
        a1 = embed(scene_a, range(2 * s * t, 2 * s * t + s))
        a2 = embed(scene_a, range(2 * s * t + s, 2 * s * (t + 1)))
        b = embed(scene_b, range(2 * s * t + s, 2 * s * (t + 1)))
        for rep in a1:
            rows.append((t, rep, 100 * mmd2_unbiased(a1[rep], a2[rep], bandwidth),
                         100 * mmd2_unbiased(a1[rep], b[rep], bandwidth)))
    out = _mkdir(Path(out))
    write_csv(out / "mmd.csv", ("domain_a", "domain_b", "representation", "mmd2_x100"),
              [row for t, rep, w, c in rows
               for row in ((f"A#{t}", f"A'#{t}", rep, w), (f"A#{t}", f"B#{t}", rep, c))])
    reps = list(dict.fromkeys(r[1] for r in rows))
    summary = []
    for rep in reps:
        sel = [r for r in rows if r[1] == rep]
        summary.append((rep, float(np.mean([r[2] for r in sel])),
                        float(np.mean([r[3] for r in sel])), sum(r[3] > r[2] for r in sel),
                        len(sel)))
    write_csv(out / "mmd_summary.csv",
              ("representation", "within_mean_x100", "cross_mean_x100", "cross_gt_within",
               "trials"), summary)
    groups = {rep: {"within": w, "cross": c} for rep, w, c, _, _ in summary}
    _write_text(out / "mmd.svg", bar_plot_svg(groups, "MMD x100: within vs cross domain"))
    return rows


def _bandwidth(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(f"bandwidth must be 'median' or a number, got {text!r}") from None
    if not value > 0:
        raise ConfigError("bandwidth must be > 0")
    return value


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
