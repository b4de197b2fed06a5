"""FIFO transition store plus the positive / negative pair batches for the discriminator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .env import Transition

POSITIVE, CONTRASTIVE, REVERSED = "positive", "contrastive", "reversed"


class TransitionBatch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.s)


@dataclass
class PairBatch:
    left: np.ndarray
    right: np.ndarray
    label: str

    def __len__(self) -> int:
        return len(self.left)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.left.tolist(), self.right.tolist()))


class ReplayBuffer:
    """Ring buffer of (s, a, s', terminal) ids.

    With ``holdout_every=k`` every k-th pushed transition is diverted into
    ``self.heldout`` and never enters the training ring.
    """

    def __init__(self, capacity: int = 100_000, rng_seed: int = 0, holdout_every: int = 0):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self._s = np.zeros(capacity, dtype=np.int64)
        self._a = np.zeros(capacity, dtype=np.int64)
        self._s_next = np.zeros(capacity, dtype=np.int64)
        self._terminal = np.zeros(capacity, dtype=bool)
        self._head = 0  # next write slot
        self._size = 0
        self.n_pushed = 0
        self.holdout_every = holdout_every
        self.heldout = ReplayBuffer(max(capacity // holdout_every, 1), rng_seed + 1) if holdout_every else None

    def __len__(self) -> int:
        return self._size

    def push(self, t: Transition):
        self.push_ids(t.s.id, t.a.id, t.s_next.id, t.terminal)

    def push_ids(self, s: int, a: int, s_next: int, terminal: bool):
        self.n_pushed += 1
        if self.holdout_every and self.n_pushed % self.holdout_every == 0:
            self.heldout.push_ids(s, a, s_next, terminal)
            return
        i = self._head
        self._s[i], self._a[i], self._s_next[i], self._terminal[i] = s, a, s_next, terminal
        self._head = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._head) % self.capacity

    def contents(self) -> TransitionBatch:
        idx = self._order()
        return TransitionBatch(self._s[idx], self._a[idx], self._s_next[idx], self._terminal[idx])

    def _draw(self, n: int) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return self.rng.integers(self._size, size=n)

    def sample(self, n: int) -> TransitionBatch:
        idx = self._draw(n)
        return TransitionBatch(self._s[idx], self._a[idx], self._s_next[idx], self._terminal[idx])


def build_positive_batch(buffer: ReplayBuffer, n: int) -> PairBatch:
    """(s, s') of stored transitions, uniform with replacement."""
    idx = buffer._draw(n)
    return PairBatch(buffer._s[idx], buffer._s_next[idx], POSITIVE)


def build_negative_batch(buffer: ReplayBuffer, n_contrastive: int, n_reversed: int,
                         use_reversed: bool = True) -> list[PairBatch]:
    """Contrastive pairs pair up head states of two independent draws; reversed pairs flip one transition.

    A contrastive draw can land on a genuinely valid pair (including (s, s));
    that label noise is tolerated and is what the positive weight alpha absorbs.
    """
    i = buffer._draw(n_contrastive)
    j = buffer._draw(n_contrastive)
    contrastive = PairBatch(buffer._s[i], buffer._s[j], CONTRASTIVE)
    k = buffer._draw(n_reversed if use_reversed else 0)
    reversed_ = PairBatch(buffer._s_next[k], buffer._s[k], REVERSED)
    return [contrastive, reversed_]
