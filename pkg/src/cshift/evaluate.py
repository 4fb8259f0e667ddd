"""Error metrics, histogram specification, MMD, diagnostics and report files."""

from __future__ import annotations

import csv
import html
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.stats import rankdata

from .errors import ConfigError, ShapeError, WriteError
from .maps import PredictionMap

METHODS = ("expert", "direct_edge", "avg_direct_edges", "mean_ensemble", "cshift")
METRIC_COLUMNS = ("iteration", "task", "method", "l1_x100")


# -- errors --------------------------------------------------------------------

def l1_x100_arrays(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(100.0 * np.abs(pred - gt).mean())


def l1_x100(pred: PredictionMap, gt: PredictionMap) -> float:
    """100 x mean absolute error over all pixels and channels."""
    if pred.task != gt.task:
        raise ShapeError(f"task mismatch {pred.task.name} vs {gt.task.name}")
    return l1_x100_arrays(pred.data, gt.data)


@dataclass(frozen=True)
class MetricRow:
    iteration: int
    task: str
    method: str
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ConfigError(f"metric value must be finite and >= 0, got {self.value}")


# -- histogram specification -----------------------------------------------------

def _bin_index(x: np.ndarray, bins: int) -> np.ndarray:
    return np.clip((x * bins).astype(np.int64), 0, bins - 1)


def match_histogram(source: np.ndarray, reference: np.ndarray, bins: int = 256) -> np.ndarray:
    """Remap ``source`` values in [0, 1] so their histogram follows ``reference``.

    Each source pixel takes its mid-rank empirical CDF level, F = (below +
    ties / 2) / n, so ties share one level, and is mapped through the
    reference's binned, piecewise-linear inverse CDF. The result is clipped to
    the reference range.
    """
    src = np.asarray(source, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64).ravel()
    if bins < 1 or src.size == 0 or ref.size == 0:
        raise ConfigError("need bins >= 1 and non-empty maps")
    lo, hi = ref.min(), ref.max()
    if lo == hi:
        return np.full_like(src, lo)
    edges = np.linspace(0.0, 1.0, bins + 1)
    level = ((rankdata(src, method="average") - 0.5) / src.size).reshape(src.shape)

    hr = np.bincount(_bin_index(ref, bins), minlength=bins) / ref.size
    cdf = np.concatenate([[0.0], np.cumsum(hr)])
    nz = hr > 0
    starts, ends = cdf[:-1][nz], cdf[1:][nz]
    lefts, rights = edges[:-1][nz], edges[1:][nz]
    k = np.clip(np.searchsorted(ends, level, side="left"), 0, len(ends) - 1)
    frac = np.clip((level - starts[k]) / (ends[k] - starts[k]), 0.0, 1.0)
    out = lefts[k] + frac * (rights[k] - lefts[k])
    return np.clip(out, lo, hi)


def histogram_specification(source: PredictionMap, reference: PredictionMap,
                            bins: int = 256) -> PredictionMap:
    if source.shape[2] != 1 or reference.shape[2] != 1:
        raise ConfigError("histogram specification expects single-channel maps")
    if source.task.is_classification or reference.task.is_classification:
        raise ConfigError("histogram specification expects regression maps")
    return PredictionMap(source.task, match_histogram(source.data, reference.data, bins))


# -- maximum mean discrepancy ------------------------------------------------------

def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    d = pdist(np.concatenate([x, y]))
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def mmd2_unbiased(x, y, bandwidth: float | str = "median") -> float:
    """Unbiased estimate of squared MMD with an RBF kernel.

    ``bandwidth`` is an explicit sigma or ``"median"`` for the median pairwise
    distance over both samples. With equal sample sizes the cross term skips
    the paired diagonal, so identical sample lists give exactly 0.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ConfigError("MMD needs at least two samples per side")
    if x.shape[1] != y.shape[1]:
        raise ShapeError("embedding dimensions differ")
    sigma = median_bandwidth(x, y) if bandwidth == "median" else float(bandwidth)
    if sigma <= 0:
        raise ConfigError("bandwidth must be > 0")
    k = lambda a, b: np.exp(-cdist(a, b, "sqeuclidean") / (2 * sigma ** 2))
    kxx, kyy, kxy = k(x, x), k(y, y), k(x, y)
    off = lambda mat: (mat.sum() - np.trace(mat))
    term_x = off(kxx) / (m * (m - 1))
    term_y = off(kyy) / (n * (n - 1))
    if m == n:
        term_xy = off(kxy) / (m * (m - 1))
    else:
        term_xy = kxy.sum() / (m * n)
    return float(term_x + term_y - 2 * term_xy)


# -- diagnostics ---------------------------------------------------------------------

def edge_improvement_report(iter1: dict, iter2: dict) -> list[tuple[str, str, float]]:
    """Per-edge relative L1 improvement in percent, sorted descending.

    ``iter1``/``iter2`` map ``(src, dst)`` to that edge's L1x100.
    """
    if set(iter1) != set(iter2):
        missing = sorted(set(iter1) ^ set(iter2))
        raise ConfigError(f"edges missing from one run: {missing}")
    rows = []
    for key in sorted(iter1):
        a, b = iter1[key], iter2[key]
        pct = 0.0 if a == 0 else 100.0 * (a - b) / a
        rows.append((key[0], key[1], pct))
    rows.sort(key=lambda r: (-r[2], r[0], r[1]))
    return rows


def candidate_variance(stack: np.ndarray) -> float:
    """Mean over pixels of the per-pixel population variance across candidates."""
    stack = np.asarray(stack, dtype=np.float64)
    return float(stack.var(axis=0).mean())


def consensus_variance_curve(probes: dict) -> list[float]:
    """Per-epoch mean inter-candidate variance.

    ``probes`` maps ``(src, dst)`` to a per-epoch list of (P, H, W, C) edge
    predictions on fixed probe samples. In-edges of a destination form its
    candidate set; the curve averages over destinations.
    """
    by_dst: dict[str, list] = {}
    for (src, dst) in sorted(probes):
        by_dst.setdefault(dst, []).append(probes[(src, dst)])
    if not by_dst:
        return []
    n_epochs = min(len(p) for group in by_dst.values() for p in group)
    curve = []
    for e in range(n_epochs):
        vals = [candidate_variance(np.stack([p[e] for p in group]))
                for _, group in sorted(by_dst.items()) if len(group) > 1]
        curve.append(float(np.mean(vals)) if vals else 0.0)
    return curve


# -- report files ----------------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([format_value(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    try:
        Path(path).write_text(csv_text(header, rows), encoding="utf-8")
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def metric_rows_csv(rows) -> list[tuple]:
    return [(r.iteration, r.task, r.method, float(r.value)) for r in rows]


def read_metric_rows(path) -> list[MetricRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [MetricRow(int(r["iteration"]), r["task"], r["method"], float(r["l1_x100"]))
                for r in csv.DictReader(fh)]


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _svg_frame(width, height, title, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n'
            f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" '
            f'font-size="13">{html.escape(title)}</text>\n{body}</svg>\n')


def line_plot_svg(series: dict, title: str, xlabel: str = "", ylabel: str = "",
                  width: int = 480, height: int = 320) -> str:
    """Self-contained SVG line chart; ``series`` maps label -> [(x, y), ...]."""
    pts = [p for s in series.values() for p in s]
    left, right, top, bottom = 56, 130, 30, 40
    pw, ph = width - left - right, height - top - bottom
    if pts:
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
    else:
        x0 = y0 = 0.0
        x1 = y1 = 1.0
    x1 = x1 if x1 > x0 else x0 + 1
    pad = 0.05 * (y1 - y0) if y1 > y0 else 0.5
    y0, y1 = y0 - pad, y1 + pad
    sx = lambda x: left + (x - x0) / (x1 - x0) * pw
    sy = lambda y: top + ph - (y - y0) / (y1 - y0) * ph
    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in range(5):
        yv = y0 + (y1 - y0) * t / 4
        body.append(f'<text x="{left - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end" '
                    f'font-family="sans-serif" font-size="10">{yv:.3g}</text>')
    for k, (label, s) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in s:
            body.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.5" fill="{color}"/>')
        body.append(f'<text x="{left + pw + 8}" y="{top + 14 + 14 * k}" font-family="sans-serif" '
                    f'font-size="11" fill="{color}">{html.escape(str(label))}</text>')
    body.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="11">{html.escape(xlabel)}</text>')
    body.append(f'<text x="12" y="{top + ph / 2:.1f}" font-family="sans-serif" font-size="11" '
                f'transform="rotate(-90 12 {top + ph / 2:.1f})" text-anchor="middle">'
                f'{html.escape(ylabel)}</text>')
    return _svg_frame(width, height, title, "\n".join(body) + "\n")


def bar_plot_svg(groups: dict, title: str, ylabel: str = "", width: int = 560,
                 height: int = 320) -> str:
    """Grouped bars; ``groups`` maps group label -> {series label: value}."""
    labels = sorted({k for g in groups.values() for k in g})
    vmax = max([v for g in groups.values() for v in g.values()] + [1e-12])
    left, right, top, bottom = 56, 140, 30, 40
    pw, ph = width - left - right, height - top - bottom
    gw = pw / max(len(groups), 1)
    bw = gw * 0.8 / max(len(labels), 1)
    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for gi, (gname, vals) in enumerate(groups.items()):
        gx = left + gi * gw + gw * 0.1
        for li, lab in enumerate(labels):
            if lab not in vals:
                continue
            bh = vals[lab] / vmax * ph
            body.append(f'<rect x="{gx + li * bw:.1f}" y="{top + ph - bh:.1f}" width="{bw:.1f}" '
                        f'height="{bh:.1f}" fill="{_PALETTE[li % len(_PALETTE)]}"/>')
        body.append(f'<text x="{gx + gw * 0.4:.1f}" y="{height - 22}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="10">{html.escape(str(gname))}</text>')
    for li, lab in enumerate(labels):
        body.append(f'<text x="{left + pw + 8}" y="{top + 14 + 14 * li}" font-family="sans-serif" '
                    f'font-size="11" fill="{_PALETTE[li % len(_PALETTE)]}">'
                    f'{html.escape(lab)}</text>')
    body.append(f'<text x="{left - 4}" y="{top + 4}" text-anchor="end" font-family="sans-serif" '
                f'font-size="10">{vmax:.3g}</text>')
    body.append(f'<text x="12" y="{top + ph / 2:.1f}" font-family="sans-serif" font-size="11" '
                f'transform="rotate(-90 12 {top + ph / 2:.1f})" text-anchor="middle">'
                f'{html.escape(ylabel)}</text>')
    return _svg_frame(width, height, title, "\n".join(body) + "\n")


def emit_reports(run_dir) -> list[MetricRow]:
    """Merge ``iter*/metrics.csv`` into ``<run_dir>/metrics.csv`` and draw plots.

    Returns the merged rows. An empty run yields a header-only CSV and no plots.
    """
    run_dir = Path(run_dir)
    rows: list[MetricRow] = []
    iter_dirs = sorted((p for p in run_dir.glob("iter*") if p.name[4:].isdigit()),
                       key=lambda p: int(p.name[4:]))
    for d in iter_dirs:
        if (d / "metrics.csv").exists():
            rows.extend(read_metric_rows(d / "metrics.csv"))
    rows.sort(key=lambda r: (r.iteration, r.task, METHODS.index(r.method)
                             if r.method in METHODS else len(METHODS), r.method))
    write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, metric_rows_csv(rows))
    if not rows:
        return rows
    series: dict[str, list] = {}
    for r in rows:
        if r.method == "cshift":
            series.setdefault(r.task, []).append((r.iteration, r.value))
    last = max(r.iteration for r in rows)
    groups: dict[str, dict] = {}
    for r in rows:
        if r.iteration == last:
            groups.setdefault(r.task, {})[r.method] = r.value
    try:
        if series:
            (run_dir / "cshift_l1.svg").write_text(
                line_plot_svg(series, "CShift L1 x100 per iteration", "iteration", "L1 x100"),
                encoding="utf-8")
        (run_dir / "methods.svg").write_text(
            bar_plot_svg(groups, f"Methods at iteration {last}", "L1 x100"), encoding="utf-8")
        curves = {}
        for d in iter_dirs:
            vpath = d / "variance.csv"
            if vpath.exists():
                with open(vpath, newline="", encoding="utf-8") as fh:
                    curves[d.name] = [(int(r["epoch"]), float(r["variance"]))
                                      for r in csv.DictReader(fh)]
        if curves:
            (run_dir / "variance.svg").write_text(
                line_plot_svg(curves, "Inter-candidate variance", "epoch", "variance"),
                encoding="utf-8")
    except OSError as exc:
        raise WriteError(str(exc)) from exc
    return rows
