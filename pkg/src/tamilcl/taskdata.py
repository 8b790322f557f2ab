"""Class-incremental task streams: synthetic generation, CSV I/O, minibatching."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .seeding import child_rng


class StreamValidationError(ValueError):
    """A task stream violates class-partition rules."""


class StreamParseError(ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    class_ids: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        allowed = set(self.class_ids)
        for name in ("train_y", "test_y"):
            labels = getattr(self, name)
            bad = set(np.unique(labels).tolist()) - allowed
            if bad:
                raise StreamValidationError(
                    f"task {self.task_id}: {name} has labels {sorted(bad)} outside {list(self.class_ids)}"
                )
        for name in ("train_x", "test_x"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise StreamValidationError(f"task {self.task_id}: non-finite features in {name}")

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[TaskSpec, ...]
    n_features: int
    n_classes: int = field(init=False)

    def __post_init__(self):
        if not self.tasks:
            raise StreamValidationError("a stream needs at least one task")
        seen: dict[int, int] = {}
        for spec in self.tasks:
            for c in spec.class_ids:
                if c in seen:
                    raise StreamValidationError(
                        f"class {c} belongs to both task {seen[c]} and task {spec.task_id}"
                    )
                seen[c] = spec.task_id
            for arr in (spec.train_x, spec.test_x):
                if arr.ndim != 2 or arr.shape[1] != self.n_features:
                    raise StreamValidationError(
                        f"task {spec.task_id}: features of shape {arr.shape}, expected (*, {self.n_features})"
                    )
        if sorted(seen) != list(range(len(seen))):
            raise StreamValidationError(f"class ids must be contiguous from 0, got {sorted(seen)}")
        object.__setattr__(self, "n_classes", len(seen))

    def __len__(self) -> int:
        return len(self.tasks)

    def classes_upto(self, t: int) -> int:
        """Number of classes in tasks ``0..t`` inclusive."""
        return sum(s.n_classes for s in self.tasks[: t + 1])

    def task_of_class(self) -> np.ndarray:
        owner = np.empty(self.n_classes, dtype=np.int64)
        for i, spec in enumerate(self.tasks):
            owner[list(spec.class_ids)] = i
        return owner

    def joint(self) -> TaskSpec:
        """All tasks merged into one (the joint-training upper bound)."""
        return TaskSpec(
            task_id=0,
            class_ids=tuple(c for s in self.tasks for c in s.class_ids),
            train_x=np.concatenate([s.train_x for s in self.tasks]),
            train_y=np.concatenate([s.train_y for s in self.tasks]),
            test_x=np.concatenate([s.test_x for s in self.tasks]),
            test_y=np.concatenate([s.test_y for s in self.tasks]),
        )


@dataclass(frozen=True)
class SyntheticConfig:
    tasks: int = 5
    classes_per_task: int = 2
    feature_dim: int = 32
    train_per_class: int = 200
    test_per_class: int = 100
    cluster_separation: float = 6.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.tasks < 1:
            raise ValueError(f"tasks must be >= 1, got {self.tasks}")
        if self.classes_per_task < 2:
            raise ValueError(f"classes_per_task must be >= 2, got {self.classes_per_task}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("samples per class must be positive")
        if not self.cluster_separation > 0:
            raise ValueError(f"cluster_separation must be > 0, got {self.cluster_separation}")
        if not self.noise_std > 0:
            raise ValueError(f"noise_std must be > 0, got {self.noise_std}")


def generate_synthetic(cfg: SyntheticConfig) -> TaskStream:
    """One isotropic Gaussian cluster per class; class ids are contiguous per task."""
    rng = np.random.default_rng(cfg.seed)
    n_classes = cfg.tasks * cfg.classes_per_task
    f = cfg.feature_dim
    means = rng.uniform(-cfg.cluster_separation, cfg.cluster_separation, size=(n_classes, f))

    def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for c in range(n_classes):
            xs.append(means[c] + rng.normal(0.0, cfg.noise_std, size=(per_class, f)))
            ys.append(np.full(per_class, c, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    train_x, train_y = draw(cfg.train_per_class)
    test_x, test_y = draw(cfg.test_per_class)
    tasks = []
    for t in range(cfg.tasks):
        cls = tuple(range(t * cfg.classes_per_task, (t + 1) * cfg.classes_per_task))
        tr = np.isin(train_y, cls)
        te = np.isin(test_y, cls)
        tasks.append(TaskSpec(t, cls, train_x[tr], train_y[tr], test_x[te], test_y[te]))
    return TaskStream(tuple(tasks), f)


def _split_path(path: Path) -> tuple[Path, Path]:
    return path, path.with_name(path.stem + ".test" + path.suffix)


def write_stream(stream: TaskStream, path: str | Path) -> None:
    """Write ``path`` (train rows) and ``<stem>.test.csv`` (test rows).

    Floats are written with ``repr`` so a read-back reproduces them exactly.
    """
    train_path, test_path = _split_path(Path(path))
    header = ["task_id", "label"] + [f"f{i}" for i in range(stream.n_features)]
    for out, xs, ys in (
        (train_path, "train_x", "train_y"),
        (test_path, "test_x", "test_y"),
    ):
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for spec in stream.tasks:
                for row, label in zip(getattr(spec, xs), getattr(spec, ys)):
                    w.writerow([spec.task_id, int(label)] + [repr(float(v)) for v in row])


def _read_rows(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StreamParseError("empty file", 1) from None
        if header[:2] != ["task_id", "label"] or len(header) < 3:
            raise StreamParseError("header must start with task_id,label followed by feature columns", 1)
        expected = [f"f{i}" for i in range(len(header) - 2)]
        if header[2:] != expected:
            raise StreamParseError(f"feature columns must be named f0..f{len(expected) - 1}", 1)
        nf = len(expected)
        tids, labels, feats = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != nf + 2:
                raise StreamParseError(f"expected {nf + 2} fields, found {len(row)}", lineno)
            try:
                tids.append(int(row[0]))
                labels.append(int(row[1]))
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise StreamParseError(str(exc), lineno) from None
            if not all(np.isfinite(vals)):
                raise StreamParseError("non-finite feature value", lineno)
            feats.append(vals)
    x = np.asarray(feats, dtype=np.float64).reshape(-1, nf)
    return np.asarray(tids, dtype=np.int64), np.asarray(labels, dtype=np.int64), x, nf


def load_stream(path: str | Path, manifest: str | Path | None = None) -> TaskStream:
    """Read a CSV stream.

    Test rows come from ``<stem>.test.csv`` next to ``path`` when present;
    otherwise the test split is empty. An optional JSON manifest
    ``{"tasks": {"0": [0, 1], ...}}`` fixes each task's class list; without
    one, task membership is taken from the ``task_id`` column.
    """
    train_path, test_path = _split_path(Path(path))
    if not train_path.exists():
        raise FileNotFoundError(train_path)
    tid, y, x, nf = _read_rows(train_path)
    if test_path.exists():
        ttid, ty, tx, tnf = _read_rows(test_path)
        if tnf != nf:
            raise StreamParseError(f"test file has {tnf} features, train file has {nf}")
    else:
        ttid, ty, tx = np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, nf))

    if manifest is None and train_path.with_suffix(".json").exists():
        manifest = train_path.with_suffix(".json")
    if manifest is not None:
        spec = json.loads(Path(manifest).read_text(encoding="utf-8"))
        mapping = {int(k): tuple(int(c) for c in v) for k, v in spec["tasks"].items()}
    else:
        mapping = {}
        for t, c in zip(np.concatenate([tid, ttid]), np.concatenate([y, ty])):
            mapping.setdefault(int(t), [])
            if int(c) not in mapping[int(t)]:
                mapping[int(t)].append(int(c))
        mapping = {t: tuple(sorted(cs)) for t, cs in mapping.items()}

    tasks = []
    for t in sorted(mapping):
        tr, te = tid == t, ttid == t
        tasks.append(TaskSpec(t, mapping[t], x[tr], y[tr], tx[te], ty[te]))
    return TaskStream(tuple(tasks), nf)


def minibatches(
    spec: TaskSpec, batch: int, seed: int | np.random.Generator
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch over ``spec``'s training split in a seeded random order."""
    if batch < 1:
        raise ValueError(f"batch size must be >= 1, got {batch}")
    n = spec.train_x.shape[0]
    if n == 0:
        raise ValueError(f"task {spec.task_id} has no training examples")
    rng = seed if isinstance(seed, np.random.Generator) else child_rng(seed, "data")
    order = rng.permutation(n)
    for start in range(0, n, batch):
        idx = order[start : start + batch]
        yield spec.train_x[idx], spec.train_y[idx]
