"""Per-sample store of frozen-path activations.

Slot ``i`` holds, for training sample ``i``, the post-BN/ReLU output of every
hidden block and the raw output of the last FC layer.  Slots are directly
indexed by sample number, so a lookup touches one slot.  Entries are written
once and never change during a fine-tuning run; start a new cache whenever
frozen weights change.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, ShapeError


class CacheStats(NamedTuple):
    hits: int
    misses: int
    occupancy: int
    bytes_used: int


def payload_bytes(num_samples: int, layer_dims) -> int:
    """float32 bytes needed to cache every sample (input layer excluded)."""
    return num_samples * sum(int(d) for d in list(layer_dims)[1:]) * 4


class SkipCache:
    def __init__(self, num_samples: int, layer_dims):
        if num_samples < 1:
            raise ContractViolation(f"cache needs at least one sample slot, got {num_samples}")
        dims = [int(d) for d in layer_dims]
        if len(dims) < 3:
            raise ShapeError(f"layer_dims must list d0..dn with n >= 2, got {dims}")
        self.layer_dims = tuple(dims)
        self._store = [np.zeros((num_samples, d), dtype=np.float32) for d in dims[1:]]
        self._filled = np.zeros(num_samples, dtype=bool)
        self.hits = 0
        self.misses = 0
        self.occupancy = 0

    @property
    def capacity(self) -> int:
        return self._filled.shape[0]

    @property
    def entry_bytes(self) -> int:
        return sum(s.shape[1] for s in self._store) * 4

    @property
    def bytes_used(self) -> int:
        return self.occupancy * self.entry_bytes

    def _check_index(self, i: int) -> int:
        i = int(i)
        if not 0 <= i < self.capacity:
            raise IndexError(f"sample index {i} outside cache capacity {self.capacity}")
        return i

    def __contains__(self, i) -> bool:
        return bool(self._filled[self._check_index(i)])

    def lookup(self, i):
        """The cached vectors for sample ``i`` (read-only views), or ``None``."""
        i = self._check_index(i)
        if not self._filled[i]:
            self.misses += 1
            return None
        self.hits += 1
        entry = []
        for s in self._store:
            row = s[i]
            row.flags.writeable = False
            entry.append(row)
        return tuple(entry)

    def insert(self, i, activations) -> None:
        i = self._check_index(i)
        if self._filled[i]:
            raise ContractViolation(f"sample {i} is already cached; entries are immutable")
        activations = list(activations)
        if len(activations) != len(self._store):
            raise ShapeError(f"expected {len(self._store)} vectors, got {len(activations)}")
        rows = []
        for k, (a, s) in enumerate(zip(activations, self._store), start=1):
            a = np.asarray(a, dtype=np.float32).reshape(-1)
            if a.shape[0] != s.shape[1]:
                raise ShapeError(f"layer {k}: vector length {a.shape[0]} != {s.shape[1]}")
            rows.append(a)
        for a, s in zip(rows, self._store):
            s[i] = a
        self._filled[i] = True
        self.occupancy += 1

    def gather(self, indices) -> list[np.ndarray]:
        """Stack cached rows for ``indices`` per layer; does not touch the counters."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.capacity):
            raise IndexError("sample index outside cache capacity")
        if not self._filled[idx].all():
            raise ContractViolation("gather of samples that are not cached")
        return [s[idx] for s in self._store]

    def stats(self) -> CacheStats:
        return CacheStats(self.hits, self.misses, self.occupancy, self.bytes_used)
