"""``omnifuse`` command line: train, eval, tile-plan, bench-adapters, grad-check.

Exit codes:

    0  success
    2  usage error (argparse)
    3  invalid configuration
    4  missing input file
    5  pipeline order violated (stage 2 without a stage-1 checkpoint)
    6  gradient check failed
    7  malformed checkpoint file
    8  cost guard refused a non-toy grad-check
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import config as C
from . import tensor as T
from .adapters import AdapterKind
from .checkpoint import Checkpoint
from .data import synth_dataset
from .errors import (CheckpointFormatError, ConfigError, ContractError, PreprocessingError,
                     ShapeError, StateError)
from .evaluation import DEFAULT_BENCH_ENCODERS, bench_adapters, evaluate, format_bench, load_records
from .gradcheck import check_gradients
from .lora import lora_inject
from .tiling import plan_grid
from .trainer import prepare_examples, run_stage1, run_stage2

log = logging.getLogger("omnifuse")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3, 4
EXIT_ORDER, EXIT_GRADCHECK, EXIT_CHECKPOINT, EXIT_COST = 5, 6, 7, 8

# grad-check refuses anything bigger than this.
TOY_LIMITS = {"decoder_width": 64, "decoder_layers": 4, "encoder_tokens": 64, "parameters": 400_000}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_config(args) -> C.RunConfig:
    if args.config is None:
        cfg = C.RunConfig()
    else:
        if not Path(args.config).is_file():
            raise CliError(EXIT_MISSING, f"config file not found: {args.config}")
        cfg = C.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _records(cfg: C.RunConfig, path: str | None):
    path = path or cfg.data.records
    if path is not None:
        if not Path(path).is_file():
            raise CliError(EXIT_MISSING, f"records file not found: {path}")
        return load_records(path)
    return synth_dataset(cfg.data.kind, cfg.data.n, cfg.data.seed)


def _read_checkpoint(path: str) -> Checkpoint:
    if not Path(path).is_file():
        raise CliError(EXIT_MISSING, f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    model = cfg.build_model()
    examples = prepare_examples(model, _records(cfg, args.records), cfg.tiling.enabled)
    if cfg.pretrain is not None:
        result = run_stage1(model, examples, cfg.stage("pretrain"), log_path)
        print(f"stage1: {cfg.pretrain.steps} steps, final loss {result.history[-1]['loss']:.4f}")
        result.checkpoint.save(out / "stage1.omnf")
    elif args.checkpoint:
        model.load_checkpoint(_read_checkpoint(args.checkpoint))
    if cfg.sft is not None:
        if "pretrain" not in model.completed_stages:
            raise CliError(EXIT_ORDER, "stage 2 needs a stage-1 checkpoint (--checkpoint) or a "
                                       "pretrain section in the config")
        result = run_stage2(model, examples, cfg.stage("sft"), log_path)
        print(f"stage2: {cfg.sft.steps} steps, final loss {result.history[-1]['loss']:.4f}")
        result.checkpoint.save(out / "stage2.omnf")
    C.dump(cfg, out / "config.yaml")
    print(f"wrote {out}")
    return EXIT_OK


def _model_for_checkpoint(cfg: C.RunConfig, ckpt: Checkpoint):
    model = cfg.build_model()
    if any(n.endswith(".lora_A") for n in ckpt.params):
        lora = cfg.sft.lora if cfg.sft is not None and cfg.sft.lora is not None else None
        if lora is None:
            raise ConfigError("checkpoint holds LoRA factors but the config has no sft.lora")
        lora_inject(model.decoder, lora.rank, lora.alpha, lora.targets)
    model.load_checkpoint(ckpt)
    return model


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if not args.checkpoint:
        raise CliError(EXIT_MISSING, "eval needs --checkpoint")
    ckpt = _read_checkpoint(args.checkpoint)
    records = _records(cfg, args.records)
    model = _model_for_checkpoint(cfg, ckpt)
    tiling = args.tiling or cfg.eval.tiling
    report = evaluate(model, records, cfg.eval.metrics, tiling, cfg.eval.max_new)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"report_tiling_{tiling}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    for name, value in report.metrics.items():
        print(f"{name}={value:.6f} n={report.n} skipped={report.skipped} tiling={report.tiling}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_tile_plan(args) -> int:
    layout = plan_grid(args.width, args.height, args.tile_res, args.max_tiles)
    print(layout.describe())
    return EXIT_OK


def cmd_bench_adapters(args) -> int:
    cfg = _load_config(args) if args.config else None
    geometry = None
    if cfg is not None and len(cfg.encoders) == 2:
        geometry = [cfg.encoders]
    rows = bench_adapters(geometry or [DEFAULT_BENCH_ENCODERS], repeats=args.repeats,
                          seed=args.seed or 0)
    table = format_bench(rows)
    print(table)
    mha = next(r for r in rows if r.variant == AdapterKind.ATTENTION_POOL_FUSE.value)
    rank = sorted(r.median_ms for r in rows).index(mha.median_ms) + 1
    note = (f"attention_pool_fuse median {mha.median_ms:.3f} ms, rank {rank} of {len(rows)} "
            f"(1 = fastest)")
    print(note)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(
            {"rows": [dataclasses.asdict(r) for r in rows], "mha_note": note}, indent=2) + "\n")
    bad = [r for r in rows if r.tokens != r.expected_tokens]
    if bad:
        raise CliError(EXIT_CONFIG, f"token counts disagree with output_token_count: {bad}")
    return EXIT_OK


def _cost_guard(model, cfg: C.RunConfig) -> None:
    d = cfg.decoder
    problems = []
    if d.width > TOY_LIMITS["decoder_width"]:
        problems.append(f"decoder width {d.width} > {TOY_LIMITS['decoder_width']}")
    if d.layers > TOY_LIMITS["decoder_layers"]:
        problems.append(f"decoder layers {d.layers} > {TOY_LIMITS['decoder_layers']}")
    for e in cfg.encoders:
        if e.token_count > TOY_LIMITS["encoder_tokens"]:
            problems.append(f"encoder {e.name} emits {e.token_count} tokens")
    n = model.num_parameters()
    if n > TOY_LIMITS["parameters"]:
        problems.append(f"{n} parameters > {TOY_LIMITS['parameters']}")
    if problems:
        raise CliError(EXIT_COST, "grad-check is for toy sizes only: " + "; ".join(problems))


def cmd_grad_check(args) -> int:
    cfg = _load_config(args)
    T.set_precision("f64")
    model = cfg.build_model()
    _cost_guard(model, cfg)
    model.apply_freeze(encoders=True, adapter=False, special_tokens=False, lm=False)
    examples = prepare_examples(model, synth_dataset(cfg.data.kind, 2, cfg.seed), False)
    groups = model.parameter_groups()
    failed = False
    for group in ("adapter", "special_tokens", "lm"):
        params = dict(groups[group])
        results = check_gradients(lambda: model.batch_loss(examples), params, seed=cfg.seed,
                                  corrupt=args.corrupt_gradients)
        worst = max(results, key=lambda r: r.rel_error)
        ok = all(r.passed for r in results)
        failed |= not ok
        print(f"{group:<15} {'PASS' if ok else 'FAIL'} tensors={len(results):<3} "
              f"max_rel_err={worst.rel_error:.3e} ({worst.name})")
    return EXIT_GRADCHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnifuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory or file")

    p = sub.add_parser("train", help="run stage 1 and/or stage 2")
    common(p)
    p.add_argument("--records", help="JSONL training records (default: synthetic set)")
    p.add_argument("--checkpoint", help="stage-1 checkpoint for a stage-2-only config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--records", help="JSONL evaluation records (default: synthetic set)")
    p.add_argument("--tiling", choices=("on", "off"), help="override eval.tiling")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tile-plan", help="print the grid chosen for an image size")
    p.add_argument("width", type=int)
    p.add_argument("height", type=int)
    p.add_argument("tile_res", type=int)
    p.add_argument("max_tiles", type=int)
    p.set_defaults(func=cmd_tile_plan)

    p = sub.add_parser("bench-adapters", help="adapter forward latency table")
    common(p)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench_adapters)

    p = sub.add_parser("grad-check", help="finite-difference audit of a toy model")
    common(p)
    p.add_argument("--corrupt-gradients", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)
    return parser


def _thread_limit():
    value = os.environ.get("OMNIFUSE_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(EXIT_CONFIG, f"OMNIFUSE_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CheckpointFormatError as exc:
        print(f"error: bad checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except StateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ORDER
    except (ConfigError, ContractError, ShapeError, PreprocessingError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
