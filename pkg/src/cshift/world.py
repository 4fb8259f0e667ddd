"""Procedural multi-task scenes and simulated experts.

Scenes are z-buffered stacks of planes, boxes and spherical caps. Every view
(depth, normals, segmentation, rgb and the rgb-derived tasks) is computed from
the same geometry, so the views agree exactly; experts are ground truth plus
controlled corruption.
"""

from __future__ import annotations

import colorsys
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .imaging import SOBEL_MAX, box_blur, rgb_to_hsv, sobel_magnitude
from .maps import Kind, PredictionMap, TaskSpec, ViewStore, check_values

SHAPE_KINDS = ("rectangle", "disk", "gradient-plane")
DERIVED_TASKS = ("grayscale", "hsv", "edges_small", "edges_medium", "edges_large", "halftone")
EDGE_BLUR = {"edges_small": 0, "edges_medium": 2, "edges_large": 4}
DEFAULT_ROSTER = ("rgb", "grayscale", "hsv", "depth", "normals", "edges_small",
                  "edges_medium", "seg")
BAYER4 = np.array([[0, 8, 2, 10],
                   [12, 4, 14, 6],
                   [3, 11, 1, 9],
                   [15, 7, 13, 5]], dtype=np.float64)
FOG_COLOR = np.array([0.75, 0.8, 0.9])
RIM_FLOOR = 0.04


@dataclass(frozen=True)
class SceneConfig:
    h: int = 64
    w: int = 64
    n_shapes: int = 5
    kinds: tuple[str, ...] = ("rectangle", "disk")
    seed: int = 0
    class_count: int = 6
    max_slope: float = 0.05
    # Appearance; vary these to build a shifted domain.
    ambient: float = 0.6
    fog: float = 0.3
    light: tuple[float, float, float] = (-0.35, -0.45, 0.82)
    palette_seed: int = 0
    palette_value: float = 0.95
    # 0: shape depth independent of class; 1: each class sits on its own depth layer.
    class_depth: float = 1.0
    fixed_background: bool = True
    # Albedo texture whose on-screen period (pixels) is texture_period / depth.
    texture: float = 0.5
    texture_period: float = 2.0
    normals_2ch: bool = False

    def __post_init__(self):
        if self.h < 16 or self.w < 16:
            raise ConfigError("scene h and w must be >= 16")
        if not 1 <= self.n_shapes <= self.class_count <= 16:
            raise ConfigError("need 1 <= n_shapes <= class_count <= 16")
        bad = set(self.kinds) - set(SHAPE_KINDS)
        if bad or not self.kinds:
            raise ConfigError(f"unknown shape kinds {sorted(bad)}")
        if self.max_slope < 0:
            raise ConfigError("max_slope must be >= 0")
        if not 0 <= self.class_depth <= 1:
            raise ConfigError("class_depth must lie in [0, 1]")
        if not 0 <= self.texture < 1:
            raise ConfigError("texture must lie in [0, 1)")
        if not self.texture_period > 0:
            raise ConfigError("texture_period must be > 0")
        if not 0 < self.palette_value <= 1:
            raise ConfigError("palette_value must lie in (0, 1]")
        if self.fixed_background and self.n_shapes == self.class_count:
            raise ConfigError("fixed_background needs n_shapes < class_count")


def task_spec(name: str, cfg: SceneConfig | None = None) -> TaskSpec:
    cfg = cfg or SceneConfig()
    channels = {
        "rgb": 3, "grayscale": 1, "hsv": 3, "depth": 1,
        "normals": 2 if cfg.normals_2ch else 3,
        "edges_small": 1, "edges_medium": 1, "edges_large": 1,
    }
    if name in channels:
        return TaskSpec(name, channels[name])
    if name == "halftone":
        return TaskSpec(name, 2, Kind.CLASSIFICATION)
    if name == "seg":
        return TaskSpec(name, cfg.class_count, Kind.CLASSIFICATION)
    raise ConfigError(f"unsupported task {name!r}")


def roster(names=DEFAULT_ROSTER, cfg: SceneConfig | None = None) -> tuple[TaskSpec, ...]:
    return tuple(task_spec(n, cfg) for n in names)


def palette(class_count: int, palette_seed: int, value: float = 0.95) -> np.ndarray:
    offset = (palette_seed * 0.377) % 1.0
    cols = []
    for c in range(class_count):
        hue = (offset + c * 0.618034) % 1.0
        sat = 0.75 if c % 2 == 0 else 0.45
        cols.append(colorsys.hsv_to_rgb(hue, sat, value))
    return np.array(cols)


def _normals_from_slopes(gu: np.ndarray, gv: np.ndarray) -> np.ndarray:
    """Unit normals of a height field from its analytic slopes dz/du, dz/dv."""
    n = np.stack([-0.5 * gu, -0.5 * gv, np.ones_like(gu)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _render(cfg: SceneConfig, sample: int):
    rng = np.random.default_rng([cfg.seed, int(sample)])
    h, w = cfg.h, cfg.w
    v, u = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    if cfg.fixed_background:
        classes = np.concatenate([[0], 1 + rng.permutation(cfg.class_count - 1)])[:cfg.n_shapes]
    else:
        classes = rng.permutation(cfg.class_count)[:cfg.n_shapes]
    layer = lambda c: 0.2 + 0.4 * (c % cfg.class_count) / max(cfg.class_count - 1, 1)
    slope = lambda: rng.uniform(-cfg.max_slope, cfg.max_slope, size=2)

    sx, sy = slope()
    base = (1 - cfg.class_depth) * rng.uniform(0.65, 0.85) + cfg.class_depth * 0.8
    depth = base + sx * (u - 0.5) + sy * (v - 0.5)
    gu, gv = np.full((h, w), sx), np.full((h, w), sy)
    label = np.full((h, w), classes[0])
    albedo = {int(classes[0]): rng.uniform(0.85, 1.0)}
    for k in range(1, cfg.n_shapes):
        kind = cfg.kinds[rng.integers(len(cfg.kinds))]
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        d0 = (1 - cfg.class_depth) * rng.uniform(0.2, 0.55) + cfg.class_depth * layer(classes[k])
        if kind == "rectangle":
            hx, hy = rng.uniform(0.1, 0.3, size=2)
            tx, ty = slope()
            mask = (np.abs(u - cx) <= hx) & (np.abs(v - cy) <= hy)
            z = d0 + tx * (u - cx) + ty * (v - cy)
            zu, zv = tx, ty
        elif kind == "disk":
            radius = rng.uniform(0.1, 0.25)
            bump = rng.uniform(0.05, 0.15)
            r2 = ((u - cx) ** 2 + (v - cy) ** 2) / radius ** 2
            mask = r2 <= 1.0
            z = d0 - bump * np.sqrt(np.clip(1.0 - r2, 0.0, None))
            # Rim slopes are capped so normals stay finite.
            root = np.sqrt(np.clip(1.0 - r2, RIM_FLOOR, None))
            zu = bump * (u - cx) / (radius ** 2 * root)
            zv = bump * (v - cy) / (radius ** 2 * root)
        else:
            theta = rng.uniform(0, 2 * np.pi)
            mask = (u - cx) * np.cos(theta) + (v - cy) * np.sin(theta) > 0
            tx, ty = slope()
            z = d0 + 0.2 + tx * (u - cx) + ty * (v - cy)
            zu, zv = tx, ty
        front = mask & (z < depth)
        depth = np.where(front, z, depth)
        gu = np.where(front, zu, gu)
        gv = np.where(front, zv, gv)
        label = np.where(front, classes[k], label)
        albedo[int(classes[k])] = rng.uniform(0.85, 1.0)
    depth = np.clip(depth, 0.0, 1.0)

    normals = _normals_from_slopes(gu, gv)
    light = np.asarray(cfg.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = cfg.ambient + (1 - cfg.ambient) * np.clip(normals @ light, 0.0, None)
    pal = palette(cfg.class_count, cfg.palette_seed, cfg.palette_value)
    gain = np.vectorize(albedo.get)(label)
    if cfg.texture:
        phase = rng.uniform(0, 2 * np.pi, size=2)
        y, x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        k = 2 * np.pi * depth / cfg.texture_period
        gain = gain * (1 + cfg.texture * np.sin(k * x + phase[0]) * np.sin(k * y + phase[1]))
    color = pal[label] * (gain * shade)[..., None]
    t = (cfg.fog * depth)[..., None]
    color = (1 - t) * color + t * FOG_COLOR
    rgb = np.clip(0.2 + 0.6 * color, 0.0, 1.0)
    return rgb, depth, normals, label


def generate_scene(cfg: SceneConfig, sample: int) -> dict[str, PredictionMap]:
    """Ground-truth rgb, depth, normals and seg maps for one sample.

    Normals are stored as ``(n + 1) / 2`` so that they fit the [0, 1] range;
    decode with ``2 * x - 1``.
    """
    rgb, depth, normals, label = _render(cfg, sample)
    enc = (normals + 1.0) / 2.0
    if cfg.normals_2ch:
        enc = enc[..., :2]
    onehot = np.eye(cfg.class_count)[label]
    return {
        "rgb": PredictionMap(task_spec("rgb", cfg), rgb),
        "depth": PredictionMap(task_spec("depth", cfg), depth[..., None]),
        "normals": PredictionMap(task_spec("normals", cfg), enc),
        "seg": PredictionMap(task_spec("seg", cfg), onehot),
    }


def _derive(rgb: np.ndarray, name: str) -> np.ndarray:
    """Derived view of an (..., h, w, 3) rgb array."""
    rgb = np.asarray(rgb, dtype=np.float64)
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    if name == "grayscale":
        return gray[..., None]
    if name == "hsv":
        return rgb_to_hsv(rgb)
    if name in EDGE_BLUR:
        mag = sobel_magnitude(box_blur(gray, EDGE_BLUR[name])) / SOBEL_MAX
        # Blur round-off leaves ~1e-17 responses on flat regions; snap them to 0.
        mag = np.where(mag < 1e-9, 0.0, mag)
        return np.clip(mag, 0.0, 1.0)[..., None]
    if name == "halftone":
        h, w = gray.shape[-2:]
        thresh = (BAYER4[np.arange(h)[:, None] % 4, np.arange(w)[None, :] % 4] + 0.5) / 16
        on = (gray > thresh).astype(np.float64)
        return np.stack([1.0 - on, on], axis=-1)
    raise ConfigError(f"unsupported derived task {name!r}")


def derive_view(rgb: PredictionMap, task: TaskSpec) -> PredictionMap:
    if rgb.data.shape[-1] != 3:
        raise ConfigError("derive_view needs a 3-channel rgb map")
    if task.name not in DERIVED_TASKS:
        raise ConfigError(f"unsupported derived task {task.name!r}")
    return PredictionMap(task, _derive(rgb.data, task.name))


def scene_views(cfg: SceneConfig, sample: int, tasks) -> dict[str, np.ndarray]:
    """Ground-truth arrays for every task in ``tasks`` (TaskSpec or names)."""
    base = generate_scene(cfg, sample)
    out = {}
    for t in tasks:
        name = t if isinstance(t, str) else t.name
        if name in base:
            out[name] = base[name].data
        else:
            out[name] = _derive(base["rgb"].data, name).astype(np.float32)
    return out


@dataclass(frozen=True)
class Corruption:
    noise_sigma: float = 0.0
    blur_radius: int = 0
    region_bias: float = 0.0
    flip_rate: float = 0.0
    region_cells: int = 4

    def __post_init__(self):
        if self.noise_sigma < 0 or self.region_bias < 0 or self.blur_radius < 0:
            raise ConfigError("corruption amplitudes must be >= 0")
        if not 0 <= self.flip_rate < 1:
            raise ConfigError("flip_rate must lie in [0, 1)")
        if self.region_cells < 1:
            raise ConfigError("region_cells must be >= 1")

    @property
    def is_identity(self) -> bool:
        return (self.noise_sigma == 0 and self.blur_radius == 0
                and self.region_bias == 0 and self.flip_rate == 0)

    @classmethod
    def at_level(cls, level: float, kind: Kind = Kind.REGRESSION) -> Corruption:
        """Structured corruption profile with one strength knob."""
        if level <= 0:
            return cls()
        if kind is Kind.CLASSIFICATION:
            return cls(flip_rate=min(1.5 * level, 0.9), region_bias=min(2.0 * level, 1.0))
        return cls(noise_sigma=level, blur_radius=1, region_bias=level)


@dataclass(frozen=True)
class ExpertSimulator:
    task: TaskSpec
    corruption: Corruption = field(default_factory=Corruption)
    seed: int = 0


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    pos = (np.arange(n_out) + 0.5) / n_out * n_in - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), lo] += 1 - frac
    mat[np.arange(n_out), hi] += frac
    return mat


def corrupt(task: TaskSpec, corruption: Corruption, seed: int, sample: int,
            data: np.ndarray) -> np.ndarray:
    """Corrupt one (h, w, c) ground-truth array; deterministic in (seed, sample)."""
    if corruption.is_identity:
        return np.array(data, dtype=np.float32)
    h, w, c = data.shape
    rng = np.random.default_rng([int(seed), int(sample), zlib.crc32(task.name.encode())])
    cells = corruption.region_cells
    if not task.is_classification:
        x = np.asarray(data, dtype=np.float64)
        if corruption.blur_radius:
            x = np.moveaxis(box_blur(np.moveaxis(x, -1, 0), corruption.blur_radius), 0, -1)
        grid = rng.uniform(-1.0, 1.0, size=(c, cells, cells))
        z = rng.standard_normal(size=(h, w, c))
        field_ = _bilinear_matrix(h, cells) @ grid @ _bilinear_matrix(w, cells).T
        x = x + corruption.region_bias * np.moveaxis(field_, 0, -1)
        x = x + corruption.noise_sigma * z
        return np.clip(x, 0.0, 1.0).astype(np.float32)

    label = np.argmax(data, axis=-1)
    cell_y = np.arange(h) * cells // h
    cell_x = np.arange(w) * cells // w
    hit = rng.random((cells, cells)) < corruption.region_bias
    src = rng.integers(c, size=(cells, cells))
    dst = (src + rng.integers(1, c, size=(cells, cells))) % c
    region = hit[cell_y[:, None], cell_x[None, :]]
    from_c = src[cell_y[:, None], cell_x[None, :]]
    to_c = dst[cell_y[:, None], cell_x[None, :]]
    label = np.where(region & (label == from_c), to_c, label)
    flip = rng.random((h, w)) < corruption.flip_rate
    shift = rng.integers(1, c, size=(h, w))
    label = np.where(flip, (label + shift) % c, label)
    eps = 1e-3
    probs = np.eye(c)[label] * (1.0 - eps * c) + eps
    return probs.astype(np.float32)


def expert_predict(expert: ExpertSimulator, gt: PredictionMap, sample: int) -> PredictionMap:
    if gt.task != expert.task:
        raise ConfigError(f"expert for {expert.task.name!r} given a {gt.task.name!r} map")
    out = corrupt(expert.task, expert.corruption, expert.seed, sample, gt.data)
    check_values(expert.task, out)
    return PredictionMap(expert.task, out)


def ground_truth_store(cfg: SceneConfig, tasks, ids) -> ViewStore:
    """Stacked ground-truth views for samples ``ids``."""
    tasks = tuple(tasks)
    ids = tuple(int(i) for i in ids)
    per = [scene_views(cfg, i, tasks) for i in ids]
    views = {t.name: (np.stack([p[t.name] for p in per]).astype(np.float32) if per
                      else np.zeros((0, cfg.h, cfg.w, t.channels), np.float32)) for t in tasks}
    return ViewStore(tasks, ids, views)


def default_experts(tasks, level: float = 0.1, seed: int = 0,
                    overrides: dict | None = None) -> dict[str, ExpertSimulator]:
    """One simulated expert per non-rgb task at a shared corruption level."""
    overrides = overrides or {}
    return {t.name: ExpertSimulator(t, overrides.get(t.name, Corruption.at_level(level, t.kind)),
                                    seed)
            for t in tasks if t.name != "rgb"}
