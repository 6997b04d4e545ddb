"""Block-wise parallel decoding with a prefix KV cache and a sub-block DualCache.

Generation commits one block of ``D`` tokens at a time. Inside a block the
masked positions are filled sub-block by sub-block (``s`` tokens each); every
iteration unmasks all positions of the active sub-block whose confidence
exceeds ``tau``, or the single most confident one if none does. Predictions
are token-shifted: position ``i`` is read from the output at ``i - 1``.

Refresh policies:

``per-sub-block``
    The whole block is recomputed on entry to each sub-block; later
    iterations only recompute the active sub-block and read stale keys and
    values for the rest of the block.
``every-iteration``
    Every iteration recomputes the whole block against the prefix cache.
``none``
    No cache at all: every iteration recomputes the full sequence. This is
    the reference the cached decoders are checked against.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DecodeContractError
from .masking import BlockGeometry, block_causal, build_inference_mask
from .model import BlockDiffusionLM

log = logging.getLogger(__name__)

POLICIES = ("per-sub-block", "every-iteration", "none")


@dataclass
class DecodeStats:
    prompt_id: int | str | None
    tokens_out: int
    forward_passes: int
    iterations: int
    tau: float
    sub_block: int
    block_size: int
    refresh_policy: str
    exact_match_vs_oracle: bool | None = None
    max_logit_drift: float | None = None

    @property
    def tokens_per_forward(self) -> float:
        return self.tokens_out / self.forward_passes if self.forward_passes else 0.0

    def to_record(self) -> dict:
        rec = asdict(self)
        if rec["max_logit_drift"] is None:
            del rec["max_logit_drift"]
        if rec["exact_match_vs_oracle"] is None:
            del rec["exact_match_vs_oracle"]
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


class LayerCacheSet:
    """Append-only per-layer keys/values of the committed prefix."""

    def __init__(self, n_layers: int):
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.values: list[np.ndarray | None] = [None] * n_layers
        self.length = 0

    def append(self, kv: Sequence[tuple[np.ndarray, np.ndarray]]) -> None:
        n = kv[0][0].shape[2]
        for i, (k, v) in enumerate(kv):
            if self.keys[i] is None:
                self.keys[i], self.values[i] = k.copy(), v.copy()
            else:
                self.keys[i] = np.concatenate([self.keys[i], k], axis=2)
                self.values[i] = np.concatenate([self.values[i], v], axis=2)
        self.length += n


class DualCache:
    """Keys/values of every position of the current block.

    Filled by a whole-block pass; the entries outside the active sub-block
    (committed sub-blocks before it, masked suffix after it) are then reused
    by cheaper sub-block passes until the next refresh.
    """

    def __init__(self, policy: str, block_size: int):
        self.policy = policy
        self.block_size = block_size
        self.keys: list[np.ndarray] = []
        self.values: list[np.ndarray] = []
        self.sub_block: int | None = None
        self.active = (0, 0)
        self.stale = False

    def refresh(self, kv: Sequence[tuple[np.ndarray, np.ndarray]], sub_block: int, active: tuple[int, int]) -> None:
        self.keys = [k for k, _ in kv]
        self.values = [v for _, v in kv]
        self.sub_block = sub_block
        self.active = active
        self.stale = False

    def invalidate(self) -> None:
        self.sub_block = None
        self.stale = False

    def mark_stale(self) -> None:
        self.stale = True

    @property
    def prefix_range(self) -> tuple[int, int]:
        return 0, self.active[0]

    @property
    def suffix_range(self) -> tuple[int, int]:
        return self.active[1], self.block_size

    def splice(self, layer: int, k: np.ndarray, v: np.ndarray, start: int) -> tuple[np.ndarray, np.ndarray]:
        if self.policy == "every-iteration" and self.stale:
            raise DecodeContractError("every-iteration DualCache read while stale")
        bk, bv = self.keys[layer].copy(), self.values[layer].copy()
        bk[:, :, start:start + k.shape[2]] = k
        bv[:, :, start:start + v.shape[2]] = v
        return bk, bv


@dataclass
class DecodeState:
    committed: list[int]
    block_buf: np.ndarray
    masked: np.ndarray
    confidences: np.ndarray
    tau: float
    n_context: int  # prompt length (plus seed token) before generation
    cache: LayerCacheSet
    dual: DualCache
    last_hidden: np.ndarray | None = None
    iter_count: int = 0
    forward_count: int = 0
    finished: bool = False
    seeded: bool = False
    drift: list[float] = field(default_factory=list)

    @property
    def block_start(self) -> int:
        return len(self.committed)

    def generated(self) -> list[int]:
        return self.committed[self.n_context:]


class BlockDecoder:
    """Holds decoding settings for one model; decoding state lives in DecodeState."""

    def __init__(self, model: BlockDiffusionLM, tau: float = 1.0, sub_block: int | None = None,
                 block_size: int | None = None, refresh_policy: str = "per-sub-block",
                 allow_block_mismatch: bool = False, track_drift: bool = False):
        cfg = model.config
        D = cfg.D if block_size is None else int(block_size)
        s = cfg.s if sub_block is None else int(sub_block)
        if D != cfg.D and not allow_block_mismatch:
            raise ConfigError(f"model was trained with block size {cfg.D}; decoding with {D} "
                              "needs allow_block_mismatch=True")
        if D < 1 or cfg.L % D:
            raise ConfigError(f"block size {D} does not divide the context length {cfg.L}")
        if s < 1 or D % s:
            raise ConfigError(f"sub-block size {s} does not divide the block size {D}")
        if not 0.0 < tau <= 1.0:
            raise ConfigError(f"threshold must lie in (0, 1], got {tau}")
        if refresh_policy not in POLICIES:
            raise ConfigError(f"refresh policy must be one of {POLICIES}")
        self.model = model
        self.tau, self.D, self.s = float(tau), D, s
        self.policy = refresh_policy
        self.track_drift = track_drift
        emb = model.params["tok_emb"].data
        self._emb_t = emb.T.astype(np.float64)

    # -- model passes ------------------------------------------------------

    def _cached_pass(self, state: DecodeState, tokens: np.ndarray, start: int,
                     dual_start: int | None = None) -> tuple[np.ndarray, list]:
        """Run ``tokens`` at absolute position ``start`` against the prefix cache.

        With ``dual_start`` the keys/values of the rest of the current block
        come from the DualCache; the queries replace entries from
        ``dual_start`` on.
        """
        cache = state.cache
        n = len(tokens)
        n_keys = cache.length + (self.D if dual_start is not None else n)
        allowed = np.ones((n, n_keys), dtype=bool)
        fresh = []

        def hook(i, k, v):
            fresh.append((k.data, v.data))
            kd, vd = k.data, v.data
            if dual_start is not None:
                kd, vd = state.dual.splice(i, kd, vd, dual_start)
            if cache.length:
                kd = np.concatenate([cache.keys[i], kd], axis=2)
                vd = np.concatenate([cache.values[i], vd], axis=2)
            return T.Tensor(kd), T.Tensor(vd)

        with T.no_grad():
            h = self.model.run(tokens[None, :], np.arange(start, start + n), allowed, hook)
        return h.data[0], fresh

    def _full_pass(self, state: DecodeState) -> np.ndarray:
        """Cache-free pass over committed tokens plus the current block."""
        seq = np.concatenate([np.asarray(state.committed, dtype=np.int64), state.block_buf])
        pattern = block_causal(BlockGeometry(len(seq), self.D))
        with T.no_grad():
            h = self.model.run(seq[None, :], np.arange(len(seq)), pattern)
        return h.data[0]

    def _predict(self, hidden: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Confidence and argmax token per row; [MASK] is never a candidate."""
        logits = hidden.astype(np.float64) @ self._emb_t
        logits[:, self.model.config.mask_id] = -np.inf
        probs = np.exp(T.log_softmax_rows(logits))
        tok = probs.argmax(axis=1)
        return probs[np.arange(len(tok)), tok], tok

    # -- decoding steps ----------------------------------------------------

    def start(self, prompt: Sequence[int]) -> DecodeState:
        """Commit the full prompt blocks; the prompt tail opens the first block."""
        cfg = self.model.config
        prompt = [int(t) for t in prompt]
        seeded = not prompt
        if seeded:
            prompt = [cfg.eos_id]
        n_full = len(prompt) // self.D * self.D
        tail = prompt[n_full:]
        state = DecodeState(
            committed=prompt[:n_full],
            block_buf=np.full(self.D, cfg.mask_id, dtype=np.int64),
            masked=np.ones(self.D, dtype=bool),
            confidences=np.full(self.D, np.nan),
            tau=self.tau,
            n_context=len(prompt),
            cache=LayerCacheSet(cfg.n_layers),
            dual=DualCache(self.policy, self.D),
            seeded=seeded,
        )
        if n_full and self.policy != "none":
            toks = np.asarray(state.committed, dtype=np.int64)
            pattern = block_causal(BlockGeometry(n_full, self.D))
            kv = []

            def hook(i, k, v):
                kv.append((k.data, v.data))
                return k, v

            with T.no_grad():
                h = self.model.run(toks[None, :], np.arange(n_full), pattern, hook)
            state.cache.append(kv)
            state.last_hidden = h.data[0, -1]
            state.forward_count += 1
        self._open_block(state, tail)
        return state

    def _open_block(self, state: DecodeState, tail: Sequence[int] = ()) -> None:
        cfg = self.model.config
        state.block_buf = np.full(self.D, cfg.mask_id, dtype=np.int64)
        state.block_buf[:len(tail)] = tail
        state.masked = np.ones(self.D, dtype=bool)
        state.masked[:len(tail)] = False
        state.confidences = np.full(self.D, np.nan)
        state.dual.invalidate()

    def decode_iteration(self, state: DecodeState, k: int) -> int:
        """One forward pass for sub-block ``k``; returns the number of tokens unmasked."""
        a, b = k * self.s, (k + 1) * self.s
        todo = np.flatnonzero(state.masked[a:b]) + a
        if not todo.size:
            raise DecodeContractError(f"sub-block {k} has no masked position")
        if (todo == 0).any() and state.block_start == 0:
            raise DecodeContractError("position 0 has no predecessor to predict from")
        h_prev = state.last_hidden
        offset = 0  # block position of hidden row 0
        if self.policy == "none":
            full = self._full_pass(state)
            h = full[state.block_start:]
            h_prev = full[state.block_start - 1] if state.block_start else None
        elif self.policy == "every-iteration" or state.dual.sub_block != k:
            h, kv = self._cached_pass(state, state.block_buf, state.block_start)
            state.dual.refresh(kv, k, (a, b))
        else:
            offset = max(a - 1, 0)
            h, _ = self._cached_pass(state, state.block_buf[offset:b], state.block_start + offset,
                                     dual_start=offset)
            if self.track_drift:
                exact, _ = self._cached_pass(state, state.block_buf, state.block_start)
                d = np.abs(self._logits(h) - self._logits(exact[offset:b])).max()
                state.drift.append(float(d))
        state.forward_count += 1
        state.iter_count += 1

        rows = np.stack([h_prev if p == 0 else h[p - 1 - offset] for p in todo])
        conf, tok = self._predict(rows)
        pick = conf > self.tau
        if not pick.any():
            pick[int(conf.argmax())] = True
        chosen = todo[pick]
        state.block_buf[chosen] = tok[pick]
        state.masked[chosen] = False
        state.confidences[chosen] = conf[pick]
        if self.policy == "per-sub-block":
            state.dual.mark_stale()
        return int(pick.sum())

    def _logits(self, hidden: np.ndarray) -> np.ndarray:
        return hidden.astype(np.float64) @ self._emb_t

    def decode_sub_block(self, state: DecodeState, k: int) -> None:
        a, b = k * self.s, (k + 1) * self.s
        state.dual.invalidate()
        while state.masked[a:b].any():
            self.decode_iteration(state, k)

    def commit_block(self, state: DecodeState) -> None:
        """Freeze the current block and append its keys/values to the prefix cache."""
        if state.masked.any():
            raise DecodeContractError("cannot commit a block that still has masked positions")
        if self.policy != "none":
            h, kv = self._cached_pass(state, state.block_buf, state.block_start)
            state.cache.append(kv)
            state.last_hidden = h[-1]
            state.forward_count += 1
        state.committed.extend(int(t) for t in state.block_buf)
        self._open_block(state)

    def decode_block(self, state: DecodeState) -> None:
        for k in range(self.D // self.s):
            if state.masked[k * self.s:(k + 1) * self.s].any():
                self.decode_sub_block(state, k)
        self.commit_block(state)

    def _check_done(self, state: DecodeState, max_new: int) -> None:
        gen = state.generated()
        if self.model.config.eos_id in gen or len(gen) >= max_new:
            state.finished = True

    def _result(self, state: DecodeState, max_new: int, prompt_id) -> tuple[list[int], DecodeStats]:
        out = state.generated()[:max_new]
        eos = self.model.config.eos_id
        if eos in out:
            out = out[:out.index(eos)]
        stats = DecodeStats(prompt_id, len(out), state.forward_count, state.iter_count, self.tau,
                            self.s, self.D, self.policy,
                            max_logit_drift=max(state.drift, default=0.0) if self.track_drift else None)
        return out, stats

    def generate(self, prompt: Sequence[int], max_new: int, prompt_id=None) -> tuple[list[int], DecodeStats]:
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        state = self.start(prompt)
        while not state.finished:
            self.decode_block(state)
            self._check_done(state, max_new)
        return self._result(state, max_new, prompt_id)

    def generate_batch(self, prompts: Sequence[Sequence[int]], max_new: int,
                       workers: int | None = None) -> list[tuple[list[int], DecodeStats]]:
        """Decode all prompts in lockstep, one block per sequence per outer step.

        Finished sequences idle on inert padding blocks until the whole batch
        is done. ``workers`` > 1 spreads each outer step over threads.
        """
        if not prompts:
            raise ValueError("batch must be non-empty")
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        states = [self.start(p) for p in prompts]
        pad_blocks = [0] * len(states)

        def advance(st):
            self.decode_block(st)
            self._check_done(st, max_new)

        pool = ThreadPoolExecutor(workers) if workers and workers > 1 else None
        try:
            while not all(st.finished for st in states):
                live = [st for st in states if not st.finished]
                for i, st in enumerate(states):
                    if st.finished:
                        pad_blocks[i] += 1
                if pool is None:
                    for st in live:
                        advance(st)
                else:
                    list(pool.map(advance, live))
        finally:
            if pool is not None:
                pool.shutdown()
        log.debug("inert padding blocks per sequence: %s", pad_blocks)
        return [self._result(st, max_new, i) for i, st in enumerate(states)]


def generate(model: BlockDiffusionLM, prompt: Sequence[int], max_new: int, tau: float = 1.0,
             s: int | None = None, block_size: int | None = None, **kwargs) -> tuple[list[int], DecodeStats]:
    return BlockDecoder(model, tau, s, block_size, **kwargs).generate(prompt, max_new)


def generate_batch(model: BlockDiffusionLM, prompts: Sequence[Sequence[int]], max_new: int,
                   tau: float = 1.0, s: int | None = None, block_size: int | None = None,
                   workers: int | None = None, **kwargs) -> list[tuple[list[int], DecodeStats]]:
    return BlockDecoder(model, tau, s, block_size, **kwargs).generate_batch(prompts, max_new, workers)
