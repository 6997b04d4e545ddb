"""Decoder transformer trained with the block-diffusion objective."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .data import PackedDataset, TrainingBatch, TrainingView, build_batch
from .errors import CheckpointError, ConfigError, DimensionError, TrainingDivergedError
from .masking import AttentionPattern, BlockGeometry, build_training_mask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    V: int = 260
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    L: int = 64
    D: int = 8
    s: int = 4
    mask_id: int = 257
    eos_id: int = 256
    rope_base: float = 10000.0
    seed: int = 0
    ffn_mult: int = 4

    def __post_init__(self):
        if self.L % self.D:
            raise ConfigError(f"L={self.L} must be a multiple of D={self.D}")
        if self.D % self.s:
            raise ConfigError(f"D={self.D} must be a multiple of s={self.s}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be a multiple of n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.mask_id == self.eos_id or not (0 <= self.mask_id < self.V and 0 <= self.eos_id < self.V):
            raise ConfigError("mask_id and eos_id must be distinct ids below V")

    @property
    def geometry(self) -> BlockGeometry:
        return BlockGeometry(self.L, self.D)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.ffn_mult * cfg.d_model
    shapes = {"tok_emb": (cfg.V, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn_norm": (d,), p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "mlp_norm": (d,), p + "w_in": (d, f), p + "w_out": (f, d),
        })
    shapes["final_norm"] = (d,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig) -> dict[str, T.Tensor]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        data = np.ones(shape) if name.endswith("norm") else _trunc_normal(rng, shape, 0.02)
        params[name] = T.Tensor(data, requires_grad=True, name=name)
    return params


# per-layer hook: (layer, k, v) -> (keys, values) to attend over
KVHook = Callable[[int, T.Tensor, T.Tensor], tuple[T.Tensor, T.Tensor]]


class BlockDiffusionLM:
    """Pre-norm transformer with rotary attention and tied input/output embedding."""

    def __init__(self, config: ModelConfig, params: dict[str, T.Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        expected = param_shapes(config)
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            raise ConfigError("parameter set does not match the configuration")

    def parameters(self) -> Iterator[T.Tensor]:
        return iter(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def run(self, tokens, positions, allowed, kv_hook: KVHook | None = None) -> T.Tensor:
        """Final-norm hidden states for ``tokens`` of shape (N, T).

        ``allowed`` is an AttentionPattern or boolean array of shape
        (T, T_keys). ``kv_hook`` lets the caller splice cached keys/values in
        front of (or around) the freshly computed ones.
        """
        cfg, P = self.config, self.params
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        N, n = tokens.shape
        H, dh = cfg.n_heads, cfg.head_dim
        x = T.embedding(P["tok_emb"], tokens)
        inv_sqrt = 1.0 / math.sqrt(dh)

        def heads(t):
            return T.permute(T.reshape(t, (N, n, H, dh)), (0, 2, 1, 3))

        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            h = T.rmsnorm(x, P[p + "attn_norm"])
            q = T.rope(heads(h @ P[p + "wq"]), positions, cfg.rope_base)
            k = T.rope(heads(h @ P[p + "wk"]), positions, cfg.rope_base)
            v = heads(h @ P[p + "wv"])
            if kv_hook is not None:
                k, v = kv_hook(i, k, v)
            att = T.softmax_masked(T.scale(q @ T.swap_last(k), inv_sqrt), allowed)
            o = T.reshape(T.permute(att @ v, (0, 2, 1, 3)), (N, n, cfg.d_model))
            x = x + o @ P[p + "wo"]
            h = T.rmsnorm(x, P[p + "mlp_norm"])
            x = x + T.silu(h @ P[p + "w_in"]) @ P[p + "w_out"]
        return T.rmsnorm(x, P["final_norm"])

    def logits(self, hidden: T.Tensor) -> T.Tensor:
        return hidden @ T.swap_last(self.params["tok_emb"])

    def forward_concat(self, x_t, x_0, pattern: AttentionPattern | None = None) -> T.Tensor:
        """Logits for the noised half of the [x_t ; x_0] input.

        Inputs are (L,) or (N, L); the result is (L, V) or (N, L, V). Both
        halves use rotary positions 0..L-1.
        """
        x_t, x_0 = np.asarray(x_t), np.asarray(x_0)
        single = x_t.ndim == 1
        x_t, x_0 = np.atleast_2d(x_t), np.atleast_2d(x_0)
        if x_t.shape != x_0.shape:
            raise DimensionError(f"x_t {x_t.shape} and x_0 {x_0.shape} differ")
        L = x_t.shape[1]
        if pattern is None:
            pattern = build_training_mask(BlockGeometry(L, self.config.D))
        if pattern.shape != (2 * L, 2 * L):
            raise DimensionError(f"pattern {pattern.shape} does not fit a concatenated length {2 * L}")
        positions = np.concatenate([np.arange(L), np.arange(L)])
        hidden = self.run(np.concatenate([x_t, x_0], axis=1), positions, pattern)
        out = self.logits(T.take(hidden, slice(0, L), axis=1))
        return T.reshape(out, out.shape[1:]) if single else out


def loss_block(logits: T.Tensor, views: TrainingView | Sequence[TrainingView]) -> T.Tensor:
    """Summed cross-entropy at the shifted loss-active positions of each view."""
    if isinstance(views, TrainingView):
        views = [views]
    V = logits.shape[-1]
    labels = np.concatenate([v.labels for v in views])
    active = np.concatenate([v.loss_active for v in views])
    flat = T.reshape(logits, (-1, V))
    if flat.shape[0] != len(labels):
        raise DimensionError("logits rows do not match the views")
    if not active.any():
        return T.Tensor(0.0)
    return T.cross_entropy_masked(flat, labels, active)


class AdamW:
    """AdamW with linear warmup then a constant rate, and global-norm clipping."""

    def __init__(self, params: dict[str, T.Tensor], lr: float = 1e-3, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.01, warmup_steps: int = 0,
                 clip: float | None = 1.0):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.warmup_steps, self.clip = weight_decay, warmup_steps, clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                             for p in self.params.values() if p.grad is not None))

    def step(self) -> float:
        """Apply one update from the current grads; returns the pre-clip grad norm."""
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise TrainingDivergedError(f"non-finite gradient norm at step {self.t}")
        coef = 1.0
        if self.clip is not None and norm > self.clip:
            coef = self.clip / (norm + 1e-6)
        lr = self.lr_at(self.t)
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * coef
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim > 1:
                update = update + self.weight_decay * p.data
            if lr:
                p.data -= (lr * update).astype(p.data.dtype)
        return norm


def train_step(model: BlockDiffusionLM, batch: TrainingBatch, opt: AdamW,
               pattern: AttentionPattern | None = None) -> float | None:
    """One optimizer step on the summed loss of every view in ``batch``.

    Returns the pre-step loss, or None when the batch has no loss-active
    position (the step is skipped).
    """
    if batch.n_active() == 0:
        log.warning("skipping step: batch has no loss-active positions")
        return None
    model.zero_grad()
    logits = model.forward_concat(batch.x_t, batch.x_0, pattern or build_training_mask(batch.geom))
    loss = loss_block(logits, batch.views)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss {value} at step {opt.t} "
            f"(active positions {batch.n_active()}, lr {opt.lr_at(opt.t):.3g})")
    T.backward(loss)
    opt.step()
    return value


def train(model: BlockDiffusionLM, dataset: PackedDataset, steps: int, batch_size: int,
          lr: float, seed: int = 0, warmup_frac: float = 0.05, weight_decay: float = 0.01,
          clip: float = 1.0, callback: Callable[[int, float | None], None] | None = None) -> list[float | None]:
    """Run ``steps`` optimizer steps; each batch holds ``batch_size`` packed rows as view pairs."""
    cfg = model.config
    geom = BlockGeometry(dataset.L, cfg.D)
    opt = AdamW(model.params, lr=lr, weight_decay=weight_decay,
                warmup_steps=int(round(warmup_frac * steps)), clip=clip)
    rng = np.random.default_rng(seed)
    pattern = build_training_mask(geom)
    losses = []
    for step in range(steps):
        toks, pads = dataset.next_rows(batch_size)
        batch = build_batch(toks, pads, geom, rng, cfg.mask_id)
        loss = train_step(model, batch, opt, pattern)
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return losses


# ---------------------------------------------------------------------------
# checkpoints: b"BDLM" | u32 version | u32 len + config JSON | u32 count |
# per parameter: u32 len + name, u32 ndim, u32 dims..., little-endian f32 data

MAGIC = b"BDLM"
VERSION = 1


def save_checkpoint(model: BlockDiffusionLM, path: str | Path) -> None:
    cfg = model.config.to_json().encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path) -> BlockDiffusionLM:
    """Read a checkpoint; parameters come back in the current precision."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("not a BDLM checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from exc
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        params[name] = T.Tensor(data, requires_grad=True, name=name)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after the last parameter")
    if {k: v.shape for k, v in params.items()} != param_shapes(cfg):
        raise CheckpointError("parameter records do not match the stored configuration")
    return BlockDiffusionLM(cfg, params)
