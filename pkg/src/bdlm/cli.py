"""Command line: ``bdlm {train,generate,bench,inspect-mask}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Set ``BDLM_PRECISION=f64`` for bit-reproducible 64-bit runs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from itertools import product
from pathlib import Path

from . import tensor as T
from .data import PackedDataset, Vocabulary, read_corpus
from .decode import POLICIES, BlockDecoder
from .errors import BDLMError, ConfigError
from .masking import BlockGeometry, build_training_mask, render_grid
from .model import BlockDiffusionLM, ModelConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("bdlm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
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
    corpus: str = ""
    steps: int = 200
    lr: float = 3e-3
    batch_size: int = 8
    out_dir: str = "run"
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    clip: float = 1.0

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        data = {}
        if path:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**data)
        if cfg.steps < 0 or cfg.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        cfg.model_config()
        return cfg


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def read_prompts(path: str) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    cfg = RunConfig.load(args.config, overrides)
    if not cfg.corpus:
        raise ConfigError("no corpus given (config key 'corpus' or --corpus)")
    mcfg = cfg.model_config()
    lines = read_corpus(cfg.corpus)
    vocab = Vocabulary(mcfg.V, mcfg.eos_id, mcfg.mask_id)
    dataset = PackedDataset(lines, vocab, mcfg.L, mcfg.D, seed=cfg.seed)
    model = BlockDiffusionLM(mcfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    warm = int(round(cfg.warmup_frac * cfg.steps))

    def record(step, loss):
        lr = cfg.lr * (step + 1) / warm if warm and step < warm else cfg.lr
        rows.append((step, "" if loss is None else repr(float(loss)), repr(lr)))
        if step % 50 == 0 or step == cfg.steps - 1:
            log.info("step %d loss %s", step, rows[-1][1])

    train(model, dataset, cfg.steps, cfg.batch_size, cfg.lr, seed=cfg.seed, warmup_frac=cfg.warmup_frac,
          weight_decay=cfg.weight_decay, clip=cfg.clip, callback=record)
    save_checkpoint(model, out / "model.bdlm")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        w.writerows(rows)
    (out / "run_config.json").write_text(cfg.to_json(), encoding="utf-8")
    print(out / "model.bdlm")
    return 0


def _decoder(model: BlockDiffusionLM, args, tau=None, s=None, policy=None) -> BlockDecoder:
    return BlockDecoder(model, tau=args.tau if tau is None else tau,
                        sub_block=args.sub_block if s is None else s,
                        block_size=args.block_size,
                        refresh_policy=args.refresh_policy if policy is None else policy,
                        allow_block_mismatch=args.allow_block_mismatch)


def cmd_generate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dec = _decoder(model, args)
    vocab = Vocabulary(model.config.V, model.config.eos_id, model.config.mask_id)
    buf = io.StringIO()
    stats_lines = []
    for i, prompt in enumerate(read_prompts(args.prompts)):
        toks, stats = dec.generate(vocab.encode(prompt), args.max_new, prompt_id=i)
        buf.write(json.dumps({"prompt_id": i, "prompt": prompt, "text": vocab.decode(toks)},
                             ensure_ascii=False) + "\n")
        stats_lines.append(stats.to_json() + "\n")
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    if args.stats:
        Path(args.stats).write_text("".join(stats_lines), encoding="utf-8")
    return 0


BENCH_COLUMNS = ["tau", "s", "refresh_policy", "forward_passes", "tokens", "exact_match_rate",
                 "wall_clock_s", "flags"]


def run_bench(model: BlockDiffusionLM, prompts: list[list[int]], taus, subs, policies, max_new: int,
              block_size=None, allow_block_mismatch=False, workers: int | None = None) -> list[dict]:
    """Full-factorial sweep; each cell is compared with the tau=1 cache-free run at the same s."""
    refs = {}

    def reference(s):
        if s not in refs:
            dec = BlockDecoder(model, 1.0, s, block_size, "none", allow_block_mismatch)
            refs[s] = [dec.generate(p, max_new)[0] for p in prompts]
        return refs[s]

    for s in subs:
        reference(s)

    def cell(key):
        tau, s, policy = key
        dec = BlockDecoder(model, tau, s, block_size, policy, allow_block_mismatch)
        t0 = time.perf_counter()
        outs = [dec.generate(p, max_new) for p in prompts]
        wall = time.perf_counter() - t0
        ref = refs[s]
        matches = sum(o == r for (o, _), r in zip(outs, ref))
        return {"tau": tau, "s": s, "refresh_policy": policy,
                "forward_passes": sum(st.forward_passes for _, st in outs),
                "tokens": sum(st.tokens_out for _, st in outs),
                "exact_match_rate": matches / len(prompts) if prompts else 1.0,
                "wall_clock_s": round(wall, 4), "flags": ""}

    grid = list(product(taus, subs, policies))
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(cell, grid))
    else:
        rows = [cell(g) for g in grid]
    _flag_monotonicity(rows)
    return rows


def _flag_monotonicity(rows: list[dict]) -> None:
    """Mark cells where fewer forward passes were expected than measured."""
    by_key = {(r["tau"], r["s"], r["refresh_policy"]): r for r in rows}
    for (tau, s, pol), r in by_key.items():
        flags = []
        higher_tau = [by_key[k] for k in by_key if k[1:] == (s, pol) and k[0] > tau]
        if any(r["forward_passes"] > h["forward_passes"] for h in higher_tau):
            flags.append("tau_non_monotone")
        if pol == "per-sub-block":
            smaller_s = [by_key[k] for k in by_key if k[0] == tau and k[2] == pol and k[1] < s]
            if any(r["forward_passes"] > o["forward_passes"] for o in smaller_s):
                flags.append("s_non_monotone")
        r["flags"] = ";".join(flags)


def cmd_bench(args) -> int:
    model = load_checkpoint(args.checkpoint)
    taus, subs = _floats(args.taus), _ints(args.sub_blocks)
    policies = [p for p in args.policies.split(",") if p]
    if not taus or not subs or not policies:
        raise ConfigError("tau, sub-block and policy grids must be non-empty")
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(f"unknown refresh policy {p!r}")
    for tau, s in product(taus, subs):  # validate before running anything
        BlockDecoder(model, tau, s, args.block_size, policies[0], args.allow_block_mismatch)
    vocab = Vocabulary(model.config.V, model.config.eos_id, model.config.mask_id)
    prompts = [vocab.encode(p) for p in read_prompts(args.prompts)]
    rows = run_bench(model, prompts, taus, subs, policies, args.max_new, args.block_size,
                     args.allow_block_mismatch, args.workers)
    buf = io.StringIO()
    w = csv.DictWriter(buf, BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_inspect_mask(args) -> int:
    geom = BlockGeometry(args.L, args.D)
    sys.stdout.write(render_grid(build_training_mask(geom), split=geom.L))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bdlm", description="Block-diffusion language model toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on a line-per-sample corpus")
    t.add_argument("--config", help="JSON run config; flags override its fields")
    for f in fields(RunConfig):
        kind = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]
        t.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)
    t.set_defaults(func=cmd_train)

    def decode_flags(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--prompts", required=True, help="text file, one prompt per line")
        q.add_argument("--max-new", type=int, default=32)
        q.add_argument("--block-size", type=int, default=None)
        q.add_argument("--allow-block-mismatch", action="store_true")
        q.add_argument("--out")

    g = sub.add_parser("generate", help="decode one continuation per prompt line")
    decode_flags(g)
    g.add_argument("--tau", type=float, default=0.9)
    g.add_argument("--sub-block", type=int, default=None)
    g.add_argument("--refresh-policy", choices=POLICIES, default="per-sub-block")
    g.add_argument("--stats", help="write per-prompt DecodeStats as JSON lines")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="sweep thresholds and sub-block sizes")
    decode_flags(b)
    b.add_argument("--taus", default="1.0,0.95,0.9,0.8")
    b.add_argument("--sub-blocks", default="4")
    b.add_argument("--policies", default="per-sub-block")
    b.add_argument("--workers", type=int, default=None)
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("inspect-mask", help="print the 2L x 2L training mask")
    m.add_argument("--L", type=int, required=True)
    m.add_argument("--D", type=int, required=True)
    m.set_defaults(func=cmd_inspect_mask)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"bdlm: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        with T.precision(os.environ.get("BDLM_PRECISION", "f32").strip().lower() or "f32"):
            return args.func(args)
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"bdlm: {exc}", file=sys.stderr)
        return 1
    except (BDLMError, OSError) as exc:
        print(f"bdlm: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
