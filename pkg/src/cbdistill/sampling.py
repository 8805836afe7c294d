"""Instance and class-balanced mini-batch sampling.

Both strategies draw i.i.d. with replacement. Class-balanced sampling picks a
class uniformly and then an instance uniformly inside that class. An epoch is
``ceil(n / batch_size)`` batches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .data import Dataset

SamplingKind = Literal["instance", "class_balanced"]


@dataclass(frozen=True)
class SamplingStrategy:
    kind: SamplingKind = "instance"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("instance", "class_balanced"):
            raise ValueError(f"unknown sampling strategy {self.kind!r}")


def class_probabilities(d: Dataset, s: SamplingStrategy | str) -> np.ndarray:
    kind = s if isinstance(s, str) else s.kind
    counts = d.class_counts.astype(np.float64)
    if kind == "instance":
        return counts / counts.sum()
    if kind == "class_balanced":
        return np.full(d.num_classes, 1.0 / d.num_classes)
    raise ValueError(f"unknown sampling strategy {kind!r}")


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


class BatchIterator:
    def __init__(self, dataset: Dataset, batch_size: int, strategy: SamplingStrategy):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if len(dataset) == 0:
            raise ValueError("cannot sample from an empty dataset")
        if strategy.kind == "class_balanced" and np.any(dataset.class_counts == 0):
            empty = np.flatnonzero(dataset.class_counts == 0).tolist()
            raise ValueError(f"class-balanced sampling needs every class populated; empty: {empty}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.strategy = strategy
        self.rng = np.random.Generator(np.random.PCG64(strategy.seed))
        # instance indices grouped by class; class j occupies [starts[j], starts[j] + counts[j])
        self._by_class = np.argsort(dataset.labels, kind="stable")
        self._starts = np.concatenate([[0], np.cumsum(dataset.class_counts)[:-1]])

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        return self.next_batch()

    def next_batch(self) -> np.ndarray:
        b = self.batch_size
        if self.strategy.kind == "instance":
            return self.rng.integers(0, len(self.dataset), size=b)
        counts = self.dataset.class_counts
        cls = self.rng.integers(0, self.dataset.num_classes, size=b)
        offset = self.rng.integers(0, counts[cls])
        return self._by_class[self._starts[cls] + offset]


def next_batch(it: BatchIterator) -> np.ndarray:
    return it.next_batch()
