"""Uniform experience replay."""

from __future__ import annotations

import numpy as np


class ReplayBuffer:
    """Fixed-capacity ring buffer of ``(s, a, r, s', done)`` records.

    Storage is preallocated on the first insert, when the observation and
    action shapes become known.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.inserted = 0
        self._cols = None

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, s, a, r, s_next, done) -> None:
        s = np.asarray(s, dtype=float)
        a = np.asarray(a)
        if self._cols is None:
            c = self.capacity
            self._cols = {
                "s": np.zeros((c,) + s.shape),
                "a": np.zeros((c,) + a.shape, dtype=a.dtype if a.dtype.kind in "iu" else float),
                "r": np.zeros(c),
                "s_next": np.zeros((c,) + s.shape),
                "done": np.zeros(c, dtype=bool),
            }
        i = self.inserted % self.capacity
        cols = self._cols
        cols["s"][i] = s
        cols["a"][i] = a
        cols["r"][i] = r
        cols["s_next"][i] = s_next
        cols["done"][i] = done
        self.inserted += 1

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, len(self), size=n)

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        idx = self.sample_indices(n, rng)
        return {k: v[idx] for k, v in self._cols.items()}
