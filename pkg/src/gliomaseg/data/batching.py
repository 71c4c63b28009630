"""Shuffled mini-batch generation over in-memory slice samples."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .preprocess import SliceSample


class BatchGenerator:
    """Yields ``(images [B,C,H,W], masks [B,4,H,W])``.

    With ``shuffle`` every epoch draws a fresh permutation from the seeded
    generator; the last batch may be short.
    """

    def __init__(self, samples: Sequence[SliceSample], batch_size: int = 16, shuffle: bool = True, seed: int = 0):
        if not samples:
            raise ValueError("BatchGenerator needs at least one sample")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.images = np.stack([s.image for s in samples]).astype(np.float32)
        self.masks = np.stack([s.mask for s in samples]).astype(np.float32)
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.rng = np.random.default_rng(seed)
        self._pending: list[np.ndarray] = []
        self.last_order: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self) // self.batch_size)

    def _order(self) -> np.ndarray:
        order = self.rng.permutation(len(self)) if self.shuffle else np.arange(len(self))
        self.last_order = order
        return order

    def epoch_indices(self) -> list[np.ndarray]:
        order = self._order()
        return [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]

    def epoch(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for idx in self.epoch_indices():
            yield self.images[idx], self.masks[idx]

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        """Stateful single-batch access; starts a new epoch when the current one is used up."""
        if not self._pending:
            self._pending = self.epoch_indices()
        idx = self._pending.pop(0)
        return self.images[idx], self.masks[idx]
