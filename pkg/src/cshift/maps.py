"""Map, task, split and store types plus the CSMAP tensor file format.

A CSMAP file is::

    b"CSMAP\\0"  | u16 version (=1) | u32 h | u32 w | u32 c | h*w*c f32

all little-endian, payload in row-major (y, x, channel) order.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InvalidMap, ShapeError, WriteError

MAGIC = b"CSMAP\0"
VERSION = 1
HEADER = struct.Struct("<6sHIII")  # 20 bytes
SIMPLEX_TOL = 1e-5


class Kind(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


@dataclass(frozen=True)
class TaskSpec:
    name: str
    channels: int
    kind: Kind = Kind.REGRESSION

    def __post_init__(self):
        if not self.name:
            raise ConfigError("task name must be non-empty")
        if self.channels < 1:
            raise ConfigError(f"task {self.name!r}: channels must be >= 1")
        if self.kind is Kind.CLASSIFICATION and self.channels < 2:
            raise ConfigError(f"task {self.name!r}: classification needs >= 2 classes")

    @property
    def is_classification(self) -> bool:
        return self.kind is Kind.CLASSIFICATION


def check_values(task: TaskSpec, data: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    """Raise InvalidMap unless ``data`` (..., c) satisfies ``task``'s invariants."""
    if data.shape[-1] != task.channels:
        raise InvalidMap(
            f"{task.name}: expected {task.channels} channels, got {data.shape[-1]}"
        )
    if not np.all(np.isfinite(data)):
        raise InvalidMap(f"{task.name}: non-finite values")
    if task.is_classification:
        if np.any(data < 0):
            raise InvalidMap(f"{task.name}: negative class probability")
        sums = data.sum(axis=-1, dtype=np.float64)
        if np.any(np.abs(sums - 1.0) > tol):
            raise InvalidMap(f"{task.name}: per-pixel probabilities do not sum to 1")
    elif np.any(data < 0) or np.any(data > 1):
        raise InvalidMap(f"{task.name}: regression values outside [0, 1]")


@dataclass(frozen=True, eq=False)
class PredictionMap:
    """One dense h x w x c view of one sample under one task."""

    task: TaskSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError(f"map data must be (h, w, c), got {data.shape}")
        check_values(self.task, data)
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PredictionMap):
            return NotImplemented
        return self.task == other.task and np.array_equal(self.data, other.data)


def write_map(pmap: PredictionMap, path: str | os.PathLike) -> None:
    if not isinstance(pmap, PredictionMap):
        raise InvalidMap("write_map expects a PredictionMap")
    h, w, c = pmap.shape
    payload = pmap.data.astype("<f4", copy=False).tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, VERSION, h, w, c))
            fh.write(payload)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def read_raw(path: str | os.PathLike) -> np.ndarray:
    """Read a CSMAP file into an (h, w, c) float32 array without task checks."""
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, h, w, c = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = h * w * c
    if len(blob) != HEADER.size + 4 * n:
        raise FormatError(f"{path}: payload has {len(blob) - HEADER.size} bytes, expected {4 * n}")
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=HEADER.size)
    data = data.astype(np.float32).reshape(h, w, c)
    if not np.all(np.isfinite(data)):
        raise InvalidMap(f"{path}: non-finite payload")
    return data


def read_map(path: str | os.PathLike, task: TaskSpec | None = None) -> PredictionMap:
    """Inverse of :func:`write_map`.

    Without ``task`` a regression spec named after the file stem is assumed.
    Classification maps within the simplex tolerance are renormalized.
    """
    data = read_raw(path)
    if task is None:
        task = TaskSpec(Path(path).stem or "map", data.shape[2])
    if task.is_classification:
        check_values(task, data)
        sums = data.sum(axis=-1, keepdims=True, dtype=np.float64)
        if np.any(sums != 1.0):
            data = (data / sums).astype(np.float32)
    return PredictionMap(task, data)


@dataclass(frozen=True)
class DatasetSplit:
    parts: tuple[tuple[int, ...], ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        groups = [*self.parts, self.val, self.test]
        seen: set[int] = set()
        for g in groups:
            if seen.intersection(g) or len(set(g)) != len(g):
                raise ConfigError("split groups must be pairwise disjoint")
            seen.update(g)

    @property
    def pool(self) -> tuple[int, ...]:
        """The training pool P: union of all parts."""
        return tuple(sorted(i for p in self.parts for i in p))

    @property
    def all_ids(self) -> tuple[int, ...]:
        return tuple(sorted((*self.pool, *self.val, *self.test)))


def make_splits(n_samples: int, n_iters: int, val_frac: float, test_frac: float,
                seed: int) -> DatasetSplit:
    if n_iters < 1 or n_samples < n_iters + 2:
        raise ConfigError(f"need n_samples >= n_iters + 2 (got {n_samples}, {n_iters})")
    if not (0 < val_frac < 1 and 0 < test_frac < 1 and val_frac + test_frac < 1):
        raise ConfigError("val_frac and test_frac must lie in (0, 1) with sum < 1")
    n_val = max(1, int(round(val_frac * n_samples)))
    n_test = max(1, int(round(test_frac * n_samples)))
    if n_samples - n_val - n_test < n_iters:
        raise ConfigError("training pool smaller than the number of iterations")
    order = np.random.default_rng(seed).permutation(n_samples)
    val = tuple(sorted(int(i) for i in order[:n_val]))
    test = tuple(sorted(int(i) for i in order[n_val:n_val + n_test]))
    pool = order[n_val + n_test:]
    parts = tuple(tuple(sorted(int(i) for i in p)) for p in np.array_split(pool, n_iters))
    return DatasetSplit(parts=parts, val=val, test=test)


@dataclass
class ViewStore:
    """Views of a set of samples under every task, as stacked arrays.

    ``views[task][k]`` is the (h, w, c) map of sample ``ids[k]``. Used both for
    ground truth and for the pseudo-label store Y.
    """

    tasks: tuple[TaskSpec, ...]
    ids: tuple[int, ...]
    views: dict[str, np.ndarray]
    iteration: int = 0
    _row: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = tuple(int(i) for i in self.ids)
        self._row = {i: k for k, i in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise ConfigError("duplicate sample ids in store")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError("task names must be unique")
        for t in self.tasks:
            arr = self.views.get(t.name)
            if arr is None:
                raise ConfigError(f"store is missing task {t.name!r}")
            if arr.ndim != 4 or arr.shape[0] != len(self.ids) or arr.shape[-1] != t.channels:
                raise ShapeError(f"{t.name}: bad store array shape {arr.shape}")

    @property
    def task_map(self) -> dict[str, TaskSpec]:
        return {t.name: t for t in self.tasks}

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._row[int(i)] for i in ids], dtype=np.intp)
        except KeyError as exc:
            raise ConfigError(f"sample {exc.args[0]} not in store") from None

    def take(self, task: str, ids) -> np.ndarray:
        return self.views[task][self.rows(ids)]

    def get(self, sample: int, task: str) -> PredictionMap:
        return PredictionMap(self.task_map[task], self.views[task][self._row[int(sample)]])

    def subset(self, ids, tasks=None) -> ViewStore:
        keep = self.tasks if tasks is None else tuple(
            t for t in self.tasks if t.name in set(tasks))
        rows = self.rows(ids)
        return ViewStore(keep, tuple(ids), {t.name: self.views[t.name][rows] for t in keep},
                         self.iteration)

    def copy(self) -> ViewStore:
        return ViewStore(self.tasks, self.ids, {k: v.copy() for k, v in self.views.items()},
                         self.iteration)

    def validate(self) -> None:
        for t in self.tasks:
            check_values(t, self.views[t.name])

    def save(self, root: str | os.PathLike, ids=None) -> None:
        """Write ``<root>/<sample_index>/<task_name>.csmap`` for each sample."""
        root = Path(root)
        for i in (self.ids if ids is None else ids):
            d = root / str(int(i))
            try:
                d.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise WriteError(str(exc)) from exc
            for t in self.tasks:
                write_map(self.get(i, t.name), d / f"{t.name}.csmap")

    @classmethod
    def load(cls, root: str | os.PathLike, tasks, ids=None, iteration: int = 0) -> ViewStore:
        root = Path(root)
        if ids is None:
            ids = sorted(int(p.name) for p in root.iterdir() if p.is_dir() and p.name.isdigit())
        views = {}
        for t in tasks:
            maps = [read_map(root / str(i) / f"{t.name}.csmap", t).data for i in ids]
            views[t.name] = np.stack(maps) if maps else np.zeros((0, 1, 1, t.channels), np.float32)
        return cls(tuple(tasks), tuple(ids), views, iteration)
