"""Structured attention patterns for block diffusion.

Training runs the noised sequence and the clean sequence side by side as
one input of length 2L. Queries/keys ``0..L-1`` are the noised half,
``L..2L-1`` the clean half, and the full pattern is assembled from three
block-structured sub-patterns::

    [[block_diagonal, offset_block_causal],
     [nothing,        block_causal       ]]

At inference only the current block is evaluated; it sees the whole
committed prefix and itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, InvalidPatternError

DENSE_LIMIT = 4096


@dataclass(frozen=True)
class BlockGeometry:
    """A length-``L`` sequence cut into ``L // D`` blocks of ``D`` tokens."""

    L: int
    D: int

    def __post_init__(self):
        if self.D < 1 or self.L < 1:
            raise ConfigError(f"need L >= 1 and D >= 1, got L={self.L}, D={self.D}")
        if self.L % self.D:
            raise ConfigError(f"sequence length {self.L} is not a multiple of block size {self.D}")

    @property
    def B(self) -> int:
        return self.L // self.D

    def block_of(self, i):
        return np.asarray(i) // self.D


Predicate = Callable[[np.ndarray, np.ndarray], np.ndarray]


class AttentionPattern:
    """Boolean query/key admissibility relation.

    ``predicate(i, j)`` must accept broadcastable integer arrays. Patterns used
    for attention are checked at construction to give every query at least
    one key; the building blocks (e.g. the offset block-causal quadrant,
    whose first block row is empty) skip that check.
    """

    def __init__(self, n_queries: int, n_keys: int, predicate: Predicate,
                 name: str = "", require_nonempty_rows: bool = True):
        self.n_queries = int(n_queries)
        self.n_keys = int(n_keys)
        self.name = name
        self._predicate = predicate
        self._dense: np.ndarray | None = None
        if require_nonempty_rows and self.n_queries:
            self._check_rows()

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_queries, self.n_keys

    def allowed(self, i: int, j: int) -> bool:
        if not (0 <= i < self.n_queries and 0 <= j < self.n_keys):
            raise IndexError(f"({i}, {j}) outside pattern of shape {self.shape}")
        return bool(self._predicate(np.asarray(i), np.asarray(j)))

    def dense(self) -> np.ndarray:
        if self._dense is None:
            if max(self.shape) > DENSE_LIMIT:
                raise ValueError(f"refusing to materialize a {self.shape} pattern (limit {DENSE_LIMIT})")
            i = np.arange(self.n_queries)[:, None]
            j = np.arange(self.n_keys)[None, :]
            out = np.broadcast_to(self._predicate(i, j), self.shape)
            self._dense = np.array(out, dtype=bool)
            self._dense.setflags(write=False)
        return self._dense

    def row_counts(self) -> np.ndarray:
        return self.dense().sum(axis=1)

    def _check_rows(self) -> None:
        if self.n_keys == 0 or not self.row_counts().all():
            bad = int(np.flatnonzero(self.row_counts() == 0)[0]) if self.n_keys else 0
            raise InvalidPatternError(f"{self.name or 'pattern'}: query {bad} admits no key")

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttentionPattern):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.dense(), other.dense()))

    __hash__ = None

    def __repr__(self) -> str:
        return f"AttentionPattern({self.name or 'custom'}, {self.n_queries}x{self.n_keys})"


def block_diagonal(geom: BlockGeometry) -> AttentionPattern:
    D = geom.D
    return AttentionPattern(geom.L, geom.L, lambda i, j: (i // D) == (j // D),
                            name="block_diagonal")


def offset_block_causal(geom: BlockGeometry) -> AttentionPattern:
    D = geom.D
    return AttentionPattern(geom.L, geom.L, lambda i, j: (j // D) < (i // D),
                            name="offset_block_causal", require_nonempty_rows=False)


def block_causal(geom: BlockGeometry) -> AttentionPattern:
    D = geom.D
    return AttentionPattern(geom.L, geom.L, lambda i, j: (j // D) <= (i // D),
                            name="block_causal")


def build_training_mask(geom: BlockGeometry) -> AttentionPattern:
    """The 2L x 2L pattern over the concatenation [noised ; clean]."""
    L, D = geom.L, geom.D

    def pred(i, j):
        qi, kj = i % L, j % L
        q_noised, k_noised = i < L, j < L
        same = (qi // D) == (kj // D)
        earlier = (kj // D) < (qi // D)
        return np.where(q_noised,
                        np.where(k_noised, same, earlier),
                        ~k_noised & (same | earlier))

    return AttentionPattern(2 * L, 2 * L, pred, name="training")


def build_inference_mask(prefix_len: int, window_len: int) -> AttentionPattern:
    """Current window over ``prefix_len`` committed keys followed by itself."""
    if window_len < 1:
        raise ConfigError("window_len must be >= 1")
    if prefix_len < 0:
        raise ConfigError("prefix_len must be >= 0")
    return AttentionPattern(window_len, prefix_len + window_len,
                            lambda i, j: np.ones(np.broadcast(i, j).shape, dtype=bool),
                            name="inference")


def render_grid(pattern: AttentionPattern, split: int | None = None) -> str:
    """0/1 text grid, one line per query; ``split`` draws quadrant separators."""
    dense = pattern.dense().astype(np.uint8)
    lines = []
    for r, row in enumerate(dense):
        if split is not None and r == split:
            lines.append("-" * split + "+" + "-" * (pattern.n_keys - split))
        cells = "".join(map(str, row))
        if split is not None:
            cells = cells[:split] + "|" + cells[split:]
        lines.append(cells)
    return "\n".join(lines) + "\n"
