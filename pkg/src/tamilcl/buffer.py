"""Reservoir-sampled episodic memory."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class BufferEmptyError(LookupError):
    """Sampling from a buffer that holds nothing."""


@dataclass
class BufferEntry:
    features: np.ndarray
    label: int
    task_id: int
    logits: np.ndarray | None = None


class ReservoirBuffer:
    """Fixed-capacity memory where every offered item is kept with equal probability.

    Entries live in preallocated arrays; ``logits`` is a per-slot list because
    stored predictions are as wide as the classifier was when they were recorded.
    """

    def __init__(self, capacity: int, n_features: int, rng: np.random.Generator | int | None = None):
        if capacity < 0:
            raise ValueError(f"capacity must be non-negative, got {capacity}")
        self.capacity = int(capacity)
        self.n_features = int(n_features)
        self.seen_count = 0
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.features = np.zeros((self.capacity, self.n_features))
        self.labels = np.zeros(self.capacity, dtype=np.int64)
        self.task_ids = np.zeros(self.capacity, dtype=np.int64)
        self.logits: list[np.ndarray | None] = [None] * self.capacity

    def __len__(self) -> int:
        return min(self.capacity, self.seen_count)

    def is_empty(self) -> bool:
        return len(self) == 0

    def _store(self, i: int, item: BufferEntry) -> None:
        self.features[i] = item.features
        self.labels[i] = item.label
        self.task_ids[i] = item.task_id
        self.logits[i] = None if item.logits is None else np.array(item.logits, dtype=np.float64)

    def offer(self, item: BufferEntry) -> int | None:
        """Reservoir step; returns the slot written, or None if the item was dropped."""
        n = self.seen_count
        self.seen_count += 1
        if n < self.capacity:
            self._store(n, item)
            return n
        v = int(self.rng.integers(0, n + 1))
        if v < self.capacity:
            self._store(v, item)
            return v
        return None

    def offer_batch(self, x: np.ndarray, y: np.ndarray, task_id: int, logits: np.ndarray | None = None) -> None:
        for i in range(x.shape[0]):
            self.offer(BufferEntry(x[i], int(y[i]), task_id, None if logits is None else logits[i]))

    def sample_indices(self, batch: int) -> np.ndarray:
        """Uniform draw of ``batch`` occupied slots, with replacement."""
        if self.is_empty():
            raise BufferEmptyError("buffer empty")
        return self.rng.integers(0, len(self), size=batch)

    def sample(self, batch: int) -> list[BufferEntry]:
        return [self.entry(i) for i in self.sample_indices(batch)]

    def entry(self, index: int) -> BufferEntry:
        self._check_index(index)
        z = self.logits[index]
        return BufferEntry(
            self.features[index].copy(),
            int(self.labels[index]),
            int(self.task_ids[index]),
            None if z is None else z.copy(),
        )

    def update_logits(self, index: int, z) -> None:
        self._check_index(index)
        z = np.array(z, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(z)):
            raise ValueError("stored logits must be finite")
        self.logits[index] = z

    def padded_logits(self, indices: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
        """Stored logits for ``indices`` zero-padded to ``width``, plus a 0/1 validity mask.

        Components beyond a slot's stored length are masked out, so classes
        added after the logits were recorded are never penalised.
        """
        z = np.zeros((len(indices), width))
        m = np.zeros((len(indices), width))
        for row, i in enumerate(indices):
            s = self.logits[i]
            if s is None:
                continue
            k = min(len(s), width)
            z[row, :k] = s[:k]
            m[row, :k] = 1.0
        return z, m

    def _check_index(self, index: int) -> None:
        if not 0 <= index < len(self):
            raise IndexError(f"buffer index {index} outside [0, {len(self)})")

    def save(self, path: str | Path) -> None:
        """CSV rows ``task_id,label,f0..,z_len,z0..`` plus a ``.meta.json`` with counters and rng state."""
        path = Path(path)
        n = len(self)
        width = max([0] + [len(z) for z in self.logits[:n] if z is not None])
        header = (
            ["task_id", "label"]
            + [f"f{i}" for i in range(self.n_features)]
            + ["z_len"]
            + [f"z{i}" for i in range(width)]
        )
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(n):
                z = self.logits[i]
                zl = -1 if z is None else len(z)
                zs = [] if z is None else [repr(float(v)) for v in z]
                zs += [""] * (width - len(zs))
                w.writerow(
                    [int(self.task_ids[i]), int(self.labels[i])]
                    + [repr(float(v)) for v in self.features[i]]
                    + [zl]
                    + zs
                )
        meta = {
            "capacity": self.capacity,
            "n_features": self.n_features,
            "seen_count": self.seen_count,
            "rng_state": self.rng.bit_generator.state,
        }
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ReservoirBuffer":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".meta.json").read_text(encoding="utf-8"))
        buf = cls(meta["capacity"], meta["n_features"])
        buf.rng.bit_generator.state = meta["rng_state"]
        nf = buf.n_features
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for i, row in enumerate(reader):
                buf.task_ids[i] = int(row[0])
                buf.labels[i] = int(row[1])
                buf.features[i] = [float(v) for v in row[2 : 2 + nf]]
                zl = int(row[2 + nf])
                if zl >= 0:
                    buf.logits[i] = np.array([float(v) for v in row[3 + nf : 3 + nf + zl]])
        buf.seen_count = meta["seen_count"]
        return buf
