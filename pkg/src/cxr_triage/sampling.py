"""Fixed class-ratio batch composition.

An epoch is one pass over the minority class (smallest ratio entry; the
last one on ties).  Minority images are shuffled and each used exactly
once; every other class is subsampled without replacement, cycling through
fresh permutations only if it runs short.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from torch.utils.data import Sampler


@dataclass(frozen=True)
class BatchPlan:
    per_class_counts: tuple[int, ...]

    @classmethod
    def from_ratio(cls, ratio: Sequence[int], batch_size: int) -> "BatchPlan":
        unit = sum(ratio)
        if batch_size % unit:
            raise ValueError(f"batch size {batch_size} is not a multiple of ratio sum {unit} ({ratio})")
        k = batch_size // unit
        return cls(tuple(int(r) * k for r in ratio))

    @property
    def batch_size(self) -> int:
        return sum(self.per_class_counts)

    @property
    def minority(self) -> int:
        counts = self.per_class_counts
        low = min(counts)
        return max(i for i, c in enumerate(counts) if c == low)


class RatioBatchSampler(Sampler):
    """Batch sampler yielding lists of dataset indices with an exact class histogram.

    With ``with_aug_seeds=True`` each index is paired with a per-item
    augmentation seed (see :class:`cxr_triage.dataset.XrayDataset`).
    """

    def __init__(self, labels: Sequence[int], plan: BatchPlan, seed: int = 0, with_aug_seeds: bool = False):
        self.labels = np.asarray(labels)
        self.plan = plan
        self.seed = seed
        self.epoch = 0
        self.with_aug_seeds = with_aug_seeds
        self.pools = [np.flatnonzero(self.labels == c) for c in range(len(plan.per_class_counts))]
        for c, (pool, need) in enumerate(zip(self.pools, plan.per_class_counts)):
            if len(pool) < need:
                raise ValueError(f"class {c} has {len(pool)} training images but the plan needs {need} per batch")

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        m = self.plan.minority
        return len(self.pools[m]) // self.plan.per_class_counts[m]

    def _draw(self, rng, pool, n):
        out = []
        while len(out) < n:
            out.extend(rng.permutation(pool)[: n - len(out)].tolist())
        return out

    def __iter__(self) -> Iterator[list]:
        rng = np.random.default_rng([self.seed, self.epoch])
        n_batches = len(self)
        streams = [self._draw(rng, pool, n_batches * need)
                   for pool, need in zip(self.pools, self.plan.per_class_counts)]
        for b in range(n_batches):
            batch = []
            for stream, need in zip(streams, self.plan.per_class_counts):
                batch.extend(stream[b * need:(b + 1) * need])
            batch = [batch[i] for i in rng.permutation(len(batch))]
            if self.with_aug_seeds:
                seeds = rng.integers(0, 2**31, size=len(batch)).tolist()
                batch = list(zip(batch, seeds))
            yield batch


def compose_batches(records, labels: Sequence[int], plan: BatchPlan, seed: int = 0, epoch: int = 0):
    """One epoch of batches as lists of ``(record, label)`` pairs."""
    sampler = RatioBatchSampler(labels, plan, seed)
    sampler.set_epoch(epoch)
    for idx in sampler:
        yield [(records[i], labels[i]) for i in idx]
