"""Trainable edge predictors, their losses, optimizer and scheduler.

Everything is plain numpy with hand-written backward passes. Parameters live
in one flat float64 vector per model; maps enter as float32 and are promoted.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, NumericsError, ShapeError, WriteError
from .imaging import ssim_mean_and_grad
from .maps import Kind, PredictionMap, TaskSpec

LR = 5e-2
WEIGHT_DECAY = 1e-3
MOMENTUM = 0.9
PATIENCE = 10
FACTOR = 0.5
THRESHOLD = 1e-2
MIN_LR = 5e-5
# Inputs live in [0, 1]; centering them conditions the first layer.
INPUT_CENTER = 0.5


class Arch(str, enum.Enum):
    PATCH_LINEAR = "patch_linear"
    PATCH_MLP = "patch_mlp"
    SHALLOW_CONV = "shallow_conv"


class LossKind(str, enum.Enum):
    L2_SSIM = "l2_ssim"
    CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind

    @classmethod
    def for_task(cls, task: TaskSpec) -> LossSpec:
        return cls(LossKind.CROSS_ENTROPY if task.is_classification else LossKind.L2_SSIM)


# -- convolution helpers -----------------------------------------------------

def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H, W, C*k*k) zero-padded 'same' patches."""
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H, W, C, k, k)
    b, h, w = x.shape[:3]
    return win.reshape(b, h, w, -1)


def col2im(dcol: np.ndarray, k: int, c: int) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    b, h, w = dcol.shape[:3]
    r = k // 2
    d = dcol.reshape(b, h, w, c, k, k)
    out = np.zeros((b, h + 2 * r, w + 2 * r, c))
    for dy in range(k):
        for dx in range(k):
            out[:, dy:dy + h, dx:dx + w, :] += d[..., dy, dx]
    return out[:, r:r + h, r:r + w, :]


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- losses ------------------------------------------------------------------

def l2_ssim_loss(pred: np.ndarray, target: np.ndarray):
    """0.5*MSE + 0.5*(1 - mean SSIM), averaged over the batch.

    ``pred``/``target`` are (B, H, W, C). Returns ``(value, d value / d pred)``.
    """
    b, h, w, c = pred.shape
    diff = pred - target
    mse = np.mean(diff ** 2)
    p = np.moveaxis(pred, -1, 1)
    t = np.moveaxis(target, -1, 1)
    ssim, g = ssim_mean_and_grad(p, t)  # (B, C), (B, C, H, W)
    value = 0.5 * mse + 0.5 * (1.0 - ssim.mean())
    grad = diff / diff.size - 0.5 * np.moveaxis(g, 1, -1) / (b * c)
    return float(value), grad


def cross_entropy_loss(pred: np.ndarray, target: np.ndarray):
    """Mean per-pixel cross-entropy of probabilities ``pred`` against ``target``."""
    n = pred.shape[0] * pred.shape[1] * pred.shape[2]
    logp = np.log(np.clip(pred, 1e-300, None))
    value = -np.sum(target * logp) / n
    return float(value), -target / np.clip(pred, 1e-300, None) / n


def composite_loss(pred: PredictionMap, target: PredictionMap, spec: LossSpec | None = None):
    """Loss value and gradient with respect to ``pred.data`` for one map pair."""
    if pred.task != target.task or pred.shape != target.shape:
        raise ShapeError("pred and target must share task and dimensions")
    spec = spec or LossSpec.for_task(pred.task)
    if (spec.kind is LossKind.CROSS_ENTROPY) != pred.task.is_classification:
        raise ConfigError("loss kind does not match the task kind")
    p = pred.data.astype(np.float64)[None]
    t = target.data.astype(np.float64)[None]
    fn = cross_entropy_loss if spec.kind is LossKind.CROSS_ENTROPY else l2_ssim_loss
    value, grad = fn(p, t)
    return value, grad[0]


# -- models ------------------------------------------------------------------

@dataclass
class EdgeModel:
    src: TaskSpec
    dst: TaskSpec
    arch: Arch = Arch.PATCH_LINEAR
    params: np.ndarray | None = None
    patch: int = 5
    width: int = 16

    def __post_init__(self):
        self.arch = Arch(self.arch)
        n = self.n_params
        if self.params is None:
            self.params = np.zeros(n)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (n,):
            raise ShapeError(f"{self.name}: expected {n} parameters, got {self.params.shape}")

    @property
    def name(self) -> str:
        return f"{self.src.name}->{self.dst.name}"

    @property
    def loss_spec(self) -> LossSpec:
        return LossSpec.for_task(self.dst)

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        cin, cout = self.src.channels, self.dst.channels
        if self.arch is Arch.PATCH_LINEAR:
            return [("w", (cin * self.patch ** 2, cout)), ("b", (cout,))]
        f = self.width
        if self.arch is Arch.PATCH_MLP:
            return [("w1", (cin * self.patch ** 2, f)), ("b1", (f,)),
                    ("w2", (f, cout)), ("b2", (cout,))]
        return [("w1", (cin * 9, f)), ("b1", (f,)),
                ("w2", (f * 9, f)), ("b2", (f,)),
                ("w3", (f * 9, cout)), ("b3", (cout,))]

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.layout())

    def unpack(self, params: np.ndarray | None = None) -> dict[str, np.ndarray]:
        params = self.params if params is None else params
        out, k = {}, 0
        for name, shape in self.layout():
            n = math.prod(shape)
            out[name] = params[k:k + n].reshape(shape)
            k += n
        return out

    def copy(self) -> EdgeModel:
        return replace(self, params=self.params.copy())

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[-1] != self.src.channels:
            raise ShapeError(f"{self.name}: input must be (B, H, W, {self.src.channels}), "
                             f"got {x.shape}")
        return x

    # forward / backward on (B, H, W, C) arrays

    @property
    def uses_patches(self) -> bool:
        return self.arch in (Arch.PATCH_LINEAR, Arch.PATCH_MLP)

    def columns(self, x: np.ndarray) -> np.ndarray:
        """Centered input patches consumed by patch models."""
        return im2col(np.asarray(x, dtype=np.float64) - INPUT_CENTER, self.patch)

    def _forward(self, x: np.ndarray, params=None, cols=None):
        p = self.unpack(params)
        if self.arch is Arch.PATCH_LINEAR:
            cols = self.columns(x) if cols is None else cols
            return cols @ p["w"] + p["b"], (cols,)
        if self.arch is Arch.PATCH_MLP:
            cols = self.columns(x) if cols is None else cols
            hid = np.tanh(cols @ p["w1"] + p["b1"])
            return hid @ p["w2"] + p["b2"], (cols, hid)
        c0 = im2col(x - INPUT_CENTER, 3)
        h1 = np.tanh(c0 @ p["w1"] + p["b1"])
        c1 = im2col(h1, 3)
        h2 = np.tanh(c1 @ p["w2"] + p["b2"])
        c2 = im2col(h2, 3)
        return c2 @ p["w3"] + p["b3"], (c0, h1, c1, h2, c2)

    def _backward(self, cache, dz: np.ndarray, params=None) -> np.ndarray:
        p = self.unpack(params)
        flat = lambda a: a.reshape(-1, a.shape[-1])
        if self.arch is Arch.PATCH_LINEAR:
            (cols,) = cache
            grads = {"w": flat(cols).T @ flat(dz), "b": dz.sum(axis=(0, 1, 2))}
        elif self.arch is Arch.PATCH_MLP:
            cols, hid = cache
            grads = {"w2": flat(hid).T @ flat(dz), "b2": dz.sum(axis=(0, 1, 2))}
            dh = (dz @ p["w2"].T) * (1 - hid ** 2)
            grads["w1"] = flat(cols).T @ flat(dh)
            grads["b1"] = dh.sum(axis=(0, 1, 2))
        else:
            c0, h1, c1, h2, c2 = cache
            f = self.width
            grads = {"w3": flat(c2).T @ flat(dz), "b3": dz.sum(axis=(0, 1, 2))}
            dh2 = col2im(dz @ p["w3"].T, 3, f) * (1 - h2 ** 2)
            grads["w2"] = flat(c1).T @ flat(dh2)
            grads["b2"] = dh2.sum(axis=(0, 1, 2))
            dh1 = col2im(dh2 @ p["w2"].T, 3, f) * (1 - h1 ** 2)
            grads["w1"] = flat(c0).T @ flat(dh1)
            grads["b1"] = dh1.sum(axis=(0, 1, 2))
        return np.concatenate([grads[name].ravel() for name, _ in self.layout()])

    def head(self, z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        return softmax(z / temperature) if self.dst.is_classification else sigmoid(z)

    def predict(self, x: np.ndarray, params=None, temperature: float = 1.0) -> np.ndarray:
        """Head outputs for a (B, H, W, Cin) or (H, W, Cin) array, float64.

        ``temperature`` divides classification logits; regression ignores it.
        """
        if not temperature > 0:
            raise ConfigError("temperature must be > 0")
        x = self._check_input(x)
        return self.head(self._forward(x, params)[0], temperature)

    def features(self, x: np.ndarray) -> np.ndarray:
        """Penultimate activations (hidden layer, or logits for PatchLinear)."""
        x = self._check_input(x)
        z, cache = self._forward(x)
        if self.arch is Arch.PATCH_LINEAR:
            return z
        return cache[1] if self.arch is Arch.PATCH_MLP else cache[3]

    def loss_and_grad(self, x: np.ndarray, target: np.ndarray, params=None, cols=None):
        """Batch-mean loss and its gradient with respect to the flat parameters.

        ``cols`` optionally supplies ``self.columns(x)`` for patch models.
        """
        x = self._check_input(x)
        target = np.asarray(target, dtype=np.float64)
        if target.ndim == 3:
            target = target[None]
        if target.shape != x.shape[:3] + (self.dst.channels,):
            raise ShapeError(f"{self.name}: target shape {target.shape} does not match input")
        z, cache = self._forward(x, params, cols)
        y = self.head(z)
        if self.dst.is_classification:
            value, _ = cross_entropy_loss(y, target)
            dz = (y - target) / (y.shape[0] * y.shape[1] * y.shape[2])
        else:
            value, dy = l2_ssim_loss(y, target)
            dz = dy * y * (1 - y)
        return value, self._backward(cache, dz, params)


def init_edge(src: TaskSpec, dst: TaskSpec, arch: Arch | str = Arch.PATCH_LINEAR,
              seed=0, scale: float = 1.0, patch: int = 5, width: int = 16) -> EdgeModel:
    """Edge with fan-in scaled Gaussian weights and zero biases."""
    model = EdgeModel(src, dst, Arch(arch), patch=patch, width=width)
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in model.layout():
        if name.startswith("b"):
            chunks.append(np.zeros(math.prod(shape)))
        else:
            chunks.append(rng.standard_normal(math.prod(shape)) * scale / math.sqrt(shape[0]))
    model.params = np.concatenate(chunks)
    return model


def edge_forward(model: EdgeModel, inp: PredictionMap) -> PredictionMap:
    if inp.task != model.src:
        raise ShapeError(f"{model.name}: got a {inp.task.name!r} map")
    out = model.predict(inp.data)[0]
    return PredictionMap(model.dst, out)


# -- optimizer and scheduler ---------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = LR
    momentum: float = MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    buffer: np.ndarray | None = None
    initial_lr: float = LR
    min_lr: float = MIN_LR


def sgd_nesterov_step(params: np.ndarray, grads: np.ndarray, opt: OptimizerState):
    """One Nesterov SGD step; returns ``(new_params, new_state)``.

    g' = g + wd*p;  b <- mu*b + g';  p <- p - lr*(g' + mu*b)
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ShapeError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grads)):
        raise NumericsError("non-finite gradient")
    g = grads + opt.weight_decay * params
    buf = g if opt.buffer is None else opt.momentum * opt.buffer + g
    new = params - opt.lr * (g + opt.momentum * buf)
    return new, replace(opt, buffer=buf)


@dataclass
class SchedulerState:
    best: float = math.inf
    bad_epochs: int = 0
    patience: int = PATIENCE
    factor: float = FACTOR
    threshold: float = THRESHOLD
    min_lr: float = MIN_LR


def plateau_step(sched: SchedulerState, epoch_loss: float, opt: OptimizerState):
    """ReduceLROnPlateau, 'min' mode with a relative threshold."""
    if epoch_loss < sched.best * (1.0 - sched.threshold):
        sched = replace(sched, best=float(epoch_loss), bad_epochs=0)
    else:
        sched = replace(sched, bad_epochs=sched.bad_epochs + 1)
    if sched.bad_epochs > sched.patience:
        opt = replace(opt, lr=max(opt.lr * sched.factor, sched.min_lr))
        sched = replace(sched, bad_epochs=0)
    return sched, opt


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: EdgeModel
    trace: list[float]
    probes: list[np.ndarray] = field(default_factory=list)
    lr: float = LR


def fit(model: EdgeModel, x: np.ndarray, y: np.ndarray, epochs: int, batch: int, seed,
        lr: float = LR, probe: np.ndarray | None = None) -> TrainResult:
    """Train on stacked arrays ``x`` (N, H, W, Cin), ``y`` (N, H, W, Cout).

    ``probe`` inputs, if given, are predicted after every epoch (float32).
    """
    if len(x) != len(y):
        raise ShapeError("inputs and targets must be aligned")
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    model = model.copy()
    if epochs <= 0:
        return TrainResult(model, [], [], lr)
    cols = model.columns(x) if model.uses_patches else None
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(seed)
    opt = OptimizerState(lr=lr, initial_lr=lr)
    sched = SchedulerState()
    params = model.params
    trace, probes = [], []
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = np.sort(order[start:start + batch])
            value, grad = model.loss_and_grad(x[idx], y[idx], params,
                                              None if cols is None else cols[idx])
            if not math.isfinite(value):
                raise NumericsError(f"{model.name}: loss diverged")
            params, opt = sgd_nesterov_step(params, grad, opt)
            total += value * len(idx)
        epoch_loss = total / n
        trace.append(epoch_loss)
        sched, opt = plateau_step(sched, epoch_loss, opt)
        if probe is not None:
            probes.append(model.predict(probe, params).astype(np.float32))
    if not np.all(np.isfinite(params)):
        raise NumericsError(f"{model.name}: non-finite parameters")
    model.params = params
    return TrainResult(model, trace, probes, opt.lr)


def train_edge(model: EdgeModel, inputs, targets, epochs: int, batch: int, seed,
               lr: float = LR) -> TrainResult:
    """Train ``model`` on aligned lists of PredictionMaps."""
    if len(inputs) != len(targets):
        raise ShapeError("inputs and targets must be aligned")
    for a, b in zip(inputs, targets):
        if a.task != model.src or b.task != model.dst:
            raise ShapeError(f"{model.name}: wrong task in training data")
    if not inputs:
        return fit(model, np.zeros((0, 1, 1, model.src.channels)),
                   np.zeros((0, 1, 1, model.dst.channels)), 0, batch, seed, lr)
    x = np.stack([m.data for m in inputs])
    y = np.stack([m.data for m in targets])
    return fit(model, x, y, epochs, batch, seed, lr)


# -- checkpoints ---------------------------------------------------------------

PRM_MAGIC = b"CSPRM\0"
PRM_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_edge(model: EdgeModel, path) -> None:
    """CSPRM container: magic, version, arch, task descriptors, f32 params."""
    parts = [PRM_MAGIC, struct.pack("<H", PRM_VERSION), _pack_str(model.arch.value),
             struct.pack("<HH", model.patch, model.width)]
    for t in (model.src, model.dst):
        parts += [_pack_str(t.name), struct.pack("<BH", t.is_classification, t.channels)]
    parts += [struct.pack("<I", model.n_params), model.params.astype("<f4").tobytes()]
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def load_edge(path) -> EdgeModel:
    blob = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise FormatError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    def take_str():
        nonlocal pos
        (n,) = take("<H")
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated")
        s = blob[pos:pos + n].decode("utf-8")
        pos += n
        return s

    if blob[:6] != PRM_MAGIC:
        raise FormatError(f"{path}: bad magic")
    pos = 6
    (version,) = take("<H")
    if version != PRM_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    arch = take_str()
    patch, width = take("<HH")
    tasks = []
    for _ in range(2):
        name = take_str()
        cls, ch = take("<BH")
        tasks.append(TaskSpec(name, ch, Kind.CLASSIFICATION if cls else Kind.REGRESSION))
    (n,) = take("<I")
    if len(blob) - pos != 4 * n:
        raise FormatError(f"{path}: payload size mismatch")
    params = np.frombuffer(blob, dtype="<f4", offset=pos, count=n).astype(np.float64)
    return EdgeModel(tasks[0], tasks[1], Arch(arch), params, patch, width)
