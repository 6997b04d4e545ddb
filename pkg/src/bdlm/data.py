"""Byte-level data pipeline: padding, packing, block masks and training views."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .masking import BlockGeometry


@dataclass(frozen=True)
class Vocabulary:
    """Bytes 0..255 followed by special tokens."""

    size: int = 260
    eos_id: int = 256
    mask_id: int = 257

    def __post_init__(self):
        if self.mask_id == self.eos_id:
            raise ValueError("mask_id and eos_id must differ")
        for tok in (self.mask_id, self.eos_id):
            if not 256 <= tok < self.size:
                raise ValueError(f"special id {tok} must lie in [256, {self.size})")

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        raw = bytes(int(t) for t in ids if 0 <= int(t) < 256)
        return raw.decode("utf-8", errors="replace")


def pad_to_block_multiple(tokens: Sequence[int], D: int, mask_id: int) -> tuple[list[int], list[bool]]:
    """Right-pad with ``mask_id`` up to the next multiple of ``D``."""
    if D < 1:
        raise ValueError("block size must be >= 1")
    n = len(tokens)
    extra = (-n) % D
    return list(tokens) + [mask_id] * extra, [False] * n + [True] * extra


def pack_stream(samples: Sequence[Sequence], L: int, D: int | None = None) -> np.ndarray:
    """Concatenate ``samples`` and cut into rows of length ``L``.

    The final partial row is dropped. Works for any per-token payload (ids,
    pad flags, sample indices), so parallel streams stay aligned.
    """
    if D is not None:
        if L % D:
            raise ValueError(f"L={L} is not a multiple of D={D}")
        for s in samples:
            if len(s) % D:
                raise ValueError(f"sample of length {len(s)} is not padded to a multiple of {D}")
    stream = np.concatenate([np.asarray(s) for s in samples]) if len(samples) else np.zeros(0, np.int64)
    n = len(stream) // L
    return stream[: n * L].reshape(n, L)


@dataclass
class BlockMaskSample:
    geom: BlockGeometry
    t: np.ndarray  # per-block mask ratio
    m: np.ndarray  # bool, True = masked
    pad: np.ndarray  # bool padding flags


def sample_block_masks(geom: BlockGeometry, pad_flags, rng: np.random.Generator,
                       t=None) -> BlockMaskSample:
    """Draw a per-block ratio ``t_b`` and i.i.d. Bernoulli(t_b) masks.

    ``t`` overrides the ratios (scalar or one per block). Padding is always
    masked.
    """
    pad = np.asarray(pad_flags, dtype=bool)
    if pad.shape != (geom.L,):
        raise ValueError(f"pad flags must have length {geom.L}")
    if t is None:
        t = rng.random(geom.B)
        while (t == 0).any():
            t[t == 0] = rng.random(int((t == 0).sum()))
    else:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (geom.B,)).copy()
    u = rng.random(geom.L)
    m = (u < np.repeat(t, geom.D)) | pad
    return BlockMaskSample(geom, t, m, pad)


def complement(sample: BlockMaskSample) -> BlockMaskSample:
    m = ~sample.m | sample.pad
    return BlockMaskSample(sample.geom, 1.0 - sample.t, m, sample.pad)


@dataclass
class TrainingView:
    x_t: np.ndarray
    x_0: np.ndarray
    m: np.ndarray
    labels: np.ndarray
    loss_active: np.ndarray
    pad_flags: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))


def build_shifted_targets(x_0, m, pad_flags) -> tuple[np.ndarray, np.ndarray]:
    """Token shift: masked position ``i`` is scored at position ``i - 1``.

    Inactive label slots hold -1. Position 0 has no predecessor and never
    contributes.
    """
    x_0 = np.asarray(x_0, dtype=np.int64)
    target = np.asarray(m, dtype=bool) & ~np.asarray(pad_flags, dtype=bool)
    labels = np.full(len(x_0), -1, dtype=np.int64)
    active = np.zeros(len(x_0), dtype=bool)
    active[:-1] = target[1:]
    labels[:-1][active[:-1]] = x_0[1:][target[1:]]
    return labels, active


def make_view(x_0, sample: BlockMaskSample, mask_id: int) -> TrainingView:
    x_0 = np.asarray(x_0, dtype=np.int64)
    x_t = np.where(sample.m, mask_id, x_0)
    labels, active = build_shifted_targets(x_0, sample.m, sample.pad)
    return TrainingView(x_t, x_0, sample.m.copy(), labels, active, sample.pad.copy(), sample.t.copy())


def make_complementary_views(x_0, sample: BlockMaskSample, mask_id: int) -> tuple[TrainingView, TrainingView]:
    return make_view(x_0, sample, mask_id), make_view(x_0, complement(sample), mask_id)


@dataclass
class TrainingBatch:
    geom: BlockGeometry
    views: list[TrainingView]

    @property
    def x_t(self) -> np.ndarray:
        return np.stack([v.x_t for v in self.views])

    @property
    def x_0(self) -> np.ndarray:
        return np.stack([v.x_0 for v in self.views])

    @property
    def labels(self) -> np.ndarray:
        return np.stack([v.labels for v in self.views])

    @property
    def loss_active(self) -> np.ndarray:
        return np.stack([v.loss_active for v in self.views])

    def n_active(self) -> int:
        return int(sum(v.loss_active.sum() for v in self.views))


def build_batch(tokens: np.ndarray, pad_flags: np.ndarray, geom: BlockGeometry,
                rng: np.random.Generator, mask_id: int, complementary: bool = True) -> TrainingBatch:
    """One pair of complementary views per packed row (views stored A0, B0, A1, B1, ...)."""
    views = []
    for row, pad in zip(np.atleast_2d(tokens), np.atleast_2d(pad_flags)):
        sample = sample_block_masks(geom, pad, rng)
        if complementary:
            views.extend(make_complementary_views(row, sample, mask_id))
        else:
            views.append(make_view(row, sample, mask_id))
    return TrainingBatch(geom, views)


# ---------------------------------------------------------------------------
# corpora


def read_corpus(path: str | Path) -> list[str]:
    """One sample per non-empty line of a UTF-8 text file."""
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


def encode_samples(lines: Sequence[str], vocab: Vocabulary, D: int) -> list[tuple[list[int], list[bool]]]:
    out = []
    for line in lines:
        ids = vocab.encode(line) + [vocab.eos_id]
        out.append(pad_to_block_multiple(ids, D, vocab.mask_id))
    return out


def pack_samples(samples: Sequence[tuple[list[int], list[bool]]], L: int, D: int) -> tuple[np.ndarray, np.ndarray]:
    toks = pack_stream([s[0] for s in samples], L, D)
    pads = pack_stream([s[1] for s in samples], L, D).astype(bool)
    return toks.astype(np.int64), pads


class PackedDataset:
    """Re-packs a shuffled copy of the samples every epoch."""

    def __init__(self, lines: Sequence[str], vocab: Vocabulary, L: int, D: int, seed: int = 0):
        self.samples = encode_samples(lines, vocab, D)
        self.L, self.D = L, D
        self.rng = np.random.default_rng(seed)
        self._rows: tuple[np.ndarray, np.ndarray] | None = None
        self._cursor = 0
        if sum(len(s[0]) for s in self.samples) < L:
            raise ValueError("corpus is shorter than one packed sequence")

    def _new_epoch(self) -> None:
        order = self.rng.permutation(len(self.samples))
        self._rows = pack_samples([self.samples[i] for i in order], self.L, self.D)
        self._cursor = 0

    def next_rows(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        toks, pads = [], []
        while len(toks) < n:
            if self._rows is None or self._cursor >= len(self._rows[0]):
                self._new_epoch()
            toks.append(self._rows[0][self._cursor])
            pads.append(self._rows[1][self._cursor])
            self._cursor += 1
        return np.stack(toks), np.stack(pads)


# ---------------------------------------------------------------------------
# synthetic toy task: letter walks "^" + c, c+k, c+2k, ... (mod 26)

ALPHABET = "abcdefghijklmnopqrstuvwxyz"


def letter_walk(start: int, step: int, n_letters: int = 30) -> str:
    return "^" + "".join(ALPHABET[(start + step * j) % 26] for j in range(n_letters))


def letter_walk_task(n_train: int = 64, steps: Sequence[int] = (1, 2, 3), n_letters: int = 30,
                     seed: int = 0) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Split all (start, step) walks into ``n_train`` training and held-out pairs."""
    combos = [(c, k) for k in steps for c in range(26)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(combos))
    train = sorted(combos[i] for i in order[:n_train])
    held = sorted(combos[i] for i in order[n_train:])
    return train, held
