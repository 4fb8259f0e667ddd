"""Selection ensemble: per-pixel similarity weights and weighted-median fusion.

Batched helpers work on candidate stacks shaped (N, ..., H, W, C) with one
weight per candidate and pixel, (N, ..., H, W), shared across channels.
Reductions over the candidate axis go through a sort first so results do
not depend on the order candidates are listed in.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .imaging import SOBEL_MAX, box_blur, separable, box_taps, sobel_magnitude, ssim_map
from .maps import PredictionMap, TaskSpec

EPS = 1e-6
PSNR_MAX = 100.0
# Relative slack on the 0.5 cumulative-mass test, absorbs float accumulation.
TIE_TOL = 1e-12
CURRENT = "<current>"


class Metric(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"
    PSNR = "psnr"
    SSIM = "ssim"
    VARIANCE = "variance"
    PERCEPTUAL = "perceptual"

    @property
    def larger_is_similar(self) -> bool:
        return self in (Metric.PSNR, Metric.SSIM)

    @classmethod
    def parse(cls, name: str) -> Metric:
        aliases = {"var": "variance", "perc": "perceptual", "lpips": "perceptual"}
        try:
            return cls(aliases.get(name.lower(), name.lower()))
        except ValueError:
            raise ConfigError(f"unknown metric {name!r}") from None


@dataclass(frozen=True)
class Kernel:
    """Maps similarities (or distances) to unnormalized weights.

    ``identity`` returns its input, ``constant`` returns 1, ``gaussian`` returns
    ``exp(-gap**2 / (2 sigma**2))`` where ``gap`` is the distance to the most
    similar candidate at that pixel.
    """

    kind: str = "identity"
    sigma: float = 0.1
    apply_to: str = "similarity"

    def __post_init__(self):
        if self.kind not in ("identity", "gaussian", "constant"):
            raise ConfigError(f"unknown kernel {self.kind!r}")
        if self.apply_to not in ("similarity", "distance"):
            raise ConfigError("kernel apply_to must be 'similarity' or 'distance'")
        if self.sigma <= 0:
            raise ConfigError("kernel sigma must be > 0")


IDENTITY = Kernel("identity")
CONSTANT = Kernel("constant")


# -- per-pixel distance maps ---------------------------------------------------

def _perceptual_features(x: np.ndarray) -> np.ndarray:
    """Intensity plus edge strength at three blur scales, per channel.

    (..., H, W, C) -> (4, ..., C, H, W).
    """
    ch = np.moveaxis(x, -1, -3)
    feats = [ch] + [sobel_magnitude(box_blur(ch, r)) / SOBEL_MAX for r in (0, 1, 2)]
    return np.stack(feats, axis=0)


def pair_distance(a: np.ndarray, b: np.ndarray, metric: Metric) -> np.ndarray:
    """Per-pixel score between (..., H, W, C) arrays, averaged over channels.

    Distances for L1/L2/Perceptual; similarities for SSIM ((s+1)/2, in [0, 1])
    and PSNR (dB clamped to [0, 100], broadcast over the map).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if metric is Metric.L1:
        return np.abs(a - b).mean(axis=-1)
    if metric is Metric.L2:
        return ((a - b) ** 2).mean(axis=-1)
    if metric is Metric.SSIM:
        s = ssim_map(np.moveaxis(a, -1, -3), np.moveaxis(b, -1, -3)).mean(axis=-3)
        return np.clip((s + 1.0) / 2.0, 0.0, 1.0)
    if metric is Metric.PSNR:
        mse = ((a - b) ** 2).mean(axis=(-3, -2, -1))
        with np.errstate(divide="ignore"):
            psnr = np.where(mse > 0, 10.0 * np.log10(1.0 / np.where(mse > 0, mse, 1.0)),
                            PSNR_MAX)
        psnr = np.clip(psnr, 0.0, PSNR_MAX)
        return np.broadcast_to(psnr[..., None, None], a.shape[:-1]).copy()
    if metric is Metric.PERCEPTUAL:
        diff = np.abs(_perceptual_features(a) - _perceptual_features(b)).mean(axis=(0, -3))
        return separable(diff, box_taps(1))
    raise ConfigError(f"{metric.value} is set-wise; use compute_weights")


def distance_map(a: PredictionMap, b: PredictionMap, metric: Metric | str) -> np.ndarray:
    """(h, w) per-pixel distance (or similarity, for PSNR/SSIM) between two maps."""
    metric = Metric.parse(metric) if isinstance(metric, str) else metric
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return pair_distance(a.data, b.data, metric)


# -- weights -----------------------------------------------------------------------

def _sorted_sum(x: np.ndarray) -> np.ndarray:
    return np.sort(x, axis=0).sum(axis=0)


def stack_weights(stack: np.ndarray, current: int, metric: Metric, kernel: Kernel = IDENTITY,
                  ) -> np.ndarray:
    """Per-pixel normalized weights (N, ..., H, W) for a candidate stack."""
    stack = np.asarray(stack, dtype=np.float64)
    n = stack.shape[0]
    if kernel.kind == "constant":
        return np.full(stack.shape[:-1], 1.0 / n)
    if metric is Metric.VARIANCE:
        mean = _sorted_sum(stack) / n
        raw = ((stack - mean) ** 2).mean(axis=-1)
    else:
        ref = np.broadcast_to(stack[current], stack.shape)
        raw = pair_distance(stack, ref, metric)
        if metric is Metric.PSNR:
            raw = raw / PSNR_MAX
    if metric.larger_is_similar:
        sim, dist = raw, 1.0 - raw
    else:
        dist = raw
        sim = raw.max(axis=0) - raw + EPS
    score = sim if kernel.apply_to == "similarity" else dist
    if kernel.kind == "identity":
        k = score
    else:
        gap = (score.max(axis=0) - score if kernel.apply_to == "similarity"
               else score - score.min(axis=0))
        k = np.exp(-gap ** 2 / (2 * kernel.sigma ** 2))
    k = np.clip(k, 0.0, None)
    total = _sorted_sum(k)
    ok = np.isfinite(total) & (total > 0)
    return np.where(ok, k / np.where(ok, total, 1.0), 1.0 / n)


def median_select(stack: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-pixel, per-channel weighted median over the candidate axis."""
    stack = np.asarray(stack)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64)[..., None], stack.shape)
    order = np.lexsort((w, stack), axis=0)
    vals = np.take_along_axis(stack, order, axis=0)
    cum = np.cumsum(np.take_along_axis(w, order, axis=0), axis=0)
    hit = cum >= cum[-1] * (0.5 - TIE_TOL)
    idx = np.argmax(hit, axis=0)
    return np.take_along_axis(vals, idx[None], axis=0)[0]


def mean_select(stack: np.ndarray) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    return _sorted_sum(stack) / stack.shape[0]


def renormalize(x: np.ndarray) -> np.ndarray:
    """Project non-negative per-pixel class scores back onto the simplex."""
    x = np.clip(x, 0.0, None)
    s = x.sum(axis=-1, keepdims=True)
    c = x.shape[-1]
    return np.where(s > 0, x / np.where(s > 0, s, 1.0), 1.0 / c)


def fuse(stack: np.ndarray, task: TaskSpec, weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted median (or mean, when ``weights`` is None) as float32 task values."""
    out = mean_select(stack) if weights is None else median_select(stack, weights)
    if task.is_classification:
        out = renormalize(np.asarray(out, dtype=np.float64))
    return np.asarray(out, dtype=np.float32)


# -- map-level API -------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateSet:
    """Neighborhood of a destination view: edge predictions plus the current view."""

    task: TaskSpec
    tags: tuple[str, ...]
    maps: tuple[PredictionMap, ...]

    def __post_init__(self):
        if not self.maps or len(self.tags) != len(self.maps):
            raise ConfigError("candidate set needs one tag per map and at least one map")
        if self.tags.count(CURRENT) != 1:
            raise ConfigError("candidate set must contain the current view exactly once")
        shape = self.maps[0].shape
        for m in self.maps:
            if m.shape != shape or m.task != self.task:
                raise ShapeError("all candidates must share task and shape")

    @classmethod
    def build(cls, task: TaskSpec, current: PredictionMap, predictions: dict) -> CandidateSet:
        tags = tuple(predictions) + (CURRENT,)
        return cls(task, tags, tuple(predictions.values()) + (current,))

    @property
    def current(self) -> int:
        return self.tags.index(CURRENT)

    def stack(self) -> np.ndarray:
        return np.stack([m.data for m in self.maps])


@dataclass(frozen=True, eq=False)
class EnsembleWeights:
    """(h, w, N) per-pixel weights, channel order matching the candidate set."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError("weights must be (h, w, N)")
        if np.any(self.data < 0) or np.any(np.abs(self.data.sum(axis=-1) - 1) > 1e-6):
            raise ConfigError("weights must be non-negative and sum to 1 per pixel")


def compute_weights(cands: CandidateSet, metric: Metric | str,
                    kernel: Kernel = IDENTITY) -> EnsembleWeights:
    metric = Metric.parse(metric) if isinstance(metric, str) else metric
    w = stack_weights(cands.stack(), cands.current, metric, kernel)
    return EnsembleWeights(np.moveaxis(w, 0, -1))


def weighted_median(values, weights) -> float:
    """Smallest value whose cumulative normalized weight reaches 0.5."""
    v = np.asarray(values, dtype=np.float64).ravel()
    w = np.asarray(weights, dtype=np.float64).ravel()
    if v.size == 0:
        raise ConfigError("weighted_median of an empty sequence")
    if v.shape != w.shape:
        raise ShapeError("values and weights must have equal length")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ConfigError("weights must be finite and non-negative")
    if not w.sum() > 0:
        raise ConfigError("weights have zero total mass")
    return float(median_select(v[:, None], w)[0])


def cshift_select(cands: CandidateSet, weights: EnsembleWeights) -> PredictionMap:
    if weights.data.shape != cands.maps[0].shape[:2] + (len(cands.maps),):
        raise ShapeError("weights do not match the candidate set")
    out = fuse(cands.stack(), cands.task, np.moveaxis(weights.data, -1, 0))
    return PredictionMap(cands.task, out)


def mean_ensemble(cands: CandidateSet) -> PredictionMap:
    return PredictionMap(cands.task, fuse(cands.stack(), cands.task))
