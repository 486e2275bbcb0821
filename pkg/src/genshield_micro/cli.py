"""Command-line entry point: gen-data, train, detect, correct, eval, selftest.

Every subcommand honors --seed and --threads (or GENSHIELD_MICRO_THREADS)
and echoes its effective configuration into the output directory as
resolved_config.json. Errors print one line `ERROR: <code>: <message>` to
stderr; exit code 1 marks validation/config errors, 2 runtime failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import figures
from .dataset import DatasetConfig, generate_datasets, load_manifest, grid_from_manifest
from .errors import CheckpointError, ConfigError, DataFormatError, GenShieldError
from .evalharness import EvalOptions, evaluate, write_report
from .inference import detect as run_detect
from .inference import vcot_correct
from .model import ModelConfig
from .toyworld import GridConfig, VOCAB
from .trainer import (
    TrainingConfig,
    load_checkpoint,
    load_training_config,
    params_from_arrays,
    run_stage,
    split_checkpoint,
    training_config_from_dict,
)

ENV_THREADS = "GENSHIELD_MICRO_THREADS"


def _resolve_threads(arg_threads: int | None) -> int:
    if arg_threads is not None:
        return max(1, arg_threads)
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{ENV_THREADS}={env!r} is not an integer") from None
    return 1


def _write_resolved_config(out_dir: Path, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_image(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if isinstance(payload, dict):
        if "image" not in payload:
            raise DataFormatError(f"{path}: expected an 'image' field")
        payload = payload["image"]
    img = np.asarray(payload, dtype=np.float64)
    if img.ndim != 3:
        raise DataFormatError(f"{path}: image must be a (C,H,W) nested array")
    return img


def _model_from_checkpoint(ckpt_path: str, use_ema: bool = True) -> tuple[dict, ModelConfig]:
    """Rebuild model config from tensor shapes plus the sibling
    resolved_config.json written at training time (for n_heads etc.)."""
    arrays = load_checkpoint(ckpt_path)
    raw, ema = split_checkpoint(arrays)
    chosen = ema if (use_ema and ema) else raw
    if not chosen:
        raise CheckpointError(f"{ckpt_path}: checkpoint holds no tensors")

    sidecar = Path(ckpt_path).parent / "resolved_config.json"
    extras = {}
    if sidecar.exists():
        with open(sidecar, "r", encoding="utf-8") as f:
            extras = json.load(f)
    n_layers = 1 + max(
        int(k.split(".")[1]) for k in chosen if k.startswith("layers."))
    grid = GridConfig(
        channels=chosen["img_in.cond.w"].shape[0],
        height=chosen["pos_row"].shape[0],
        width=chosen["pos_col"].shape[0],
    )
    mcfg = ModelConfig(
        d_model=chosen["tok_emb"].shape[1],
        n_layers=n_layers,
        n_heads=int(extras.get("n_heads", 4)),
        vocab_size=chosen["tok_emb"].shape[0],
        grid=grid,
        max_len=chosen["pos_text"].shape[0],
        timestep_shift=float(extras.get("timestep_shift", 4.0)),
        dtype=str(extras.get("dtype", "float32")),
    )
    return params_from_arrays(chosen, mcfg), mcfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    raw = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            raw = json.load(f)
    for key in ("n_train", "n_test", "n_train_correct", "n_test_correct", "seed", "n_mid"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    known = {f.name for f in dataclasses.fields(DatasetConfig)} - {"grid"}
    unknown = sorted(set(raw) - known - {"grid_channels", "grid_height", "grid_width"})
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    grid = GridConfig(
        channels=raw.pop("grid_channels", args.grid_channels),
        height=raw.pop("grid_height", args.grid_height),
        width=raw.pop("grid_width", args.grid_width),
    )
    cfg = DatasetConfig(grid=grid, **raw)

    mid_generator = None
    if args.mid_ckpt:
        mid_generator = _make_mid_generator(args.mid_ckpt, grid, args.flow_steps)
    manifest = generate_datasets(args.out, cfg, mid_generator=mid_generator)
    echo = {k: v for k, v in dataclasses.asdict(cfg).items() if k != "grid"}
    echo.update({"grid_channels": grid.channels, "grid_height": grid.height,
                 "grid_width": grid.width, "command": "gen-data"})
    _write_resolved_config(Path(args.out), echo)
    print(json.dumps({"out": str(args.out), "counts": manifest["counts"],
                      "tau_keep": manifest["tau_keep"]}))
    return 0


def _make_mid_generator(ckpt_path: str, grid: GridConfig, flow_steps: int):
    """Mid-quality images from a stage-1 checkpoint via few-step sampling."""
    from .inference import Context, flow_sample

    params, mcfg = _model_from_checkpoint(ckpt_path)
    if mcfg.grid != grid:
        raise ConfigError(f"--mid-ckpt grid {mcfg.grid.shape} != dataset grid {grid.shape}")

    def gen(tup):
        rng = np.random.default_rng(np.random.SeedSequence([tup.spec.seed, 0x31D]))
        out = []
        for steps in (max(1, flow_steps // 8), max(2, flow_steps // 4)):
            ctx = Context().add_image(tup.artifact_image)
            out.append(flow_sample(ctx, tup.diag_ids, params, mcfg,
                                   n_steps=steps, rng=rng))
        return out

    return gen


def cmd_train(args) -> int:
    overrides = {}
    for key in ("stage", "seed", "total_steps", "batch_size", "lr", "warmup_steps",
                "d_model", "n_layers", "n_heads", "max_len", "dtype",
                "checkpoint_every", "log_every", "ema_ratio", "clip_norm",
                "loss_lambda", "timestep_shift"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.config:
        cfg = load_training_config(args.config, overrides)
    else:
        cfg = training_config_from_dict(overrides)

    init = None
    if cfg.stage == 2:
        init_path = args.init or str(Path(args.out) / "checkpoint_stage1_final.gshd")
        if not Path(init_path).exists():
            raise ConfigError(
                f"stage 2 requires a stage-1 checkpoint: pass --init or place "
                f"checkpoint_stage1_final.gshd in {args.out}")
        init, _ = split_checkpoint(load_checkpoint(init_path))
    elif args.init:
        init, _ = split_checkpoint(load_checkpoint(args.init))

    threads = _resolve_threads(args.threads)
    echo = dataclasses.asdict(cfg)
    echo.update({"command": "train", "threads": threads, "data": str(args.data)})
    _write_resolved_config(Path(args.out), echo)
    final = run_stage(args.data, args.out, cfg, init=init, threads=threads)
    print(json.dumps({"checkpoint": str(final), "log": str(Path(args.out) / "train_log.csv")}))
    return 0


def cmd_detect(args) -> int:
    if bool(args.input) == bool(args.data):
        raise ConfigError("detect needs exactly one of --input or --data")
    params, mcfg = _model_from_checkpoint(args.ckpt, use_ema=not args.no_ema)
    threads = _resolve_threads(args.threads)
    with threadpool_limits(limits=threads):
        if args.input:
            results = [run_detect(_load_image(args.input), params, mcfg)]
        else:
            from .dataset import load_detection
            samples = load_detection(Path(args.data) / "test_detect.jsonl")
            results = [run_detect(s.image, params, mcfg) for s in samples]
    lines = [json.dumps(r.to_dict()) for r in results]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_correct(args) -> int:
    params, mcfg = _model_from_checkpoint(args.ckpt, use_ema=not args.no_ema)
    image = _load_image(args.input)
    threads = _resolve_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0xC0]))
    with threadpool_limits(limits=threads):
        traj = vcot_correct(image, params, mcfg, max_rounds=args.max_rounds,
                            n_steps=args.flow_steps, rng=rng)
    record = {
        "rounds_used": traj.rounds_used,
        "terminated_by": traj.terminated_by,
        "rounds": [
            {"diagnosis": VOCAB.decode(r.diagnosis_ids), "image": r.image.tolist()}
            for r in traj.rounds
        ],
    }
    with open(out / "trajectory.json", "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2)
        f.write("\n")
    figures.render_trajectory([image] + [r.image for r in traj.rounds],
                              out / "trajectory.png")
    _write_resolved_config(out, {
        "command": "correct", "ckpt": args.ckpt, "input": args.input,
        "max_rounds": args.max_rounds, "flow_steps": args.flow_steps,
        "seed": args.seed, "threads": threads,
    })
    print(json.dumps({"rounds_used": traj.rounds_used,
                      "terminated_by": traj.terminated_by,
                      "out": str(out)}))
    return 0


def cmd_eval(args) -> int:
    params, mcfg = _model_from_checkpoint(args.ckpt, use_ema=not args.no_ema)
    opts = EvalOptions(
        robustness=args.robustness,
        n_detect=args.n_detect,
        n_correct=args.n_correct,
        max_rounds=args.max_rounds,
        flow_steps=args.flow_steps,
        seed=args.seed,
    )
    threads = _resolve_threads(args.threads)
    with threadpool_limits(limits=threads):
        report = evaluate(params, mcfg, args.data, opts)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, report_path, "json")
    csv_path = report_path.with_suffix(".csv") if report_path.suffix else \
        report_path.parent / (report_path.name + ".csv")
    write_report(report, csv_path, "csv")
    figures.render_report_figures(report, report_path.parent)
    _write_resolved_config(report_path.parent, {
        "command": "eval", "ckpt": args.ckpt, "data": str(args.data),
        **dataclasses.asdict(opts), "threads": threads,
    })
    print(json.dumps({
        "report": str(report_path),
        "accuracy": report["detection"]["accuracy"],
        "average_precision": report["detection"]["average_precision"],
    }))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    threads = _resolve_threads(args.threads)
    with threadpool_limits(limits=threads):
        results = run_all()
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += 0 if ok else 1
    return 0 if failed == 0 else 2


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="genshield-micro",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate JSONL datasets + manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, dest="n_train")
    g.add_argument("--n-test", type=int, dest="n_test")
    g.add_argument("--n-train-correct", type=int, dest="n_train_correct")
    g.add_argument("--n-test-correct", type=int, dest="n_test_correct")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-mid", type=int, dest="n_mid")
    g.add_argument("--grid-channels", type=int, default=4)
    g.add_argument("--grid-height", type=int, default=8)
    g.add_argument("--grid-width", type=int, default=8)
    g.add_argument("--mid-ckpt", help="stage-1 checkpoint for model-generated mid images")
    g.add_argument("--flow-steps", type=int, default=20)
    g.add_argument("--config")
    g.add_argument("--threads", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one curriculum stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--total-steps", type=int, dest="total_steps")
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    t.add_argument("--ema-ratio", type=float, dest="ema_ratio")
    t.add_argument("--clip-norm", type=float, dest="clip_norm")
    t.add_argument("--loss-lambda", type=float, dest="loss_lambda")
    t.add_argument("--timestep-shift", type=float, dest="timestep_shift")
    t.add_argument("--d-model", type=int, dest="d_model")
    t.add_argument("--n-layers", type=int, dest="n_layers")
    t.add_argument("--n-heads", type=int, dest="n_heads")
    t.add_argument("--max-len", type=int, dest="max_len")
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    t.add_argument("--log-every", type=int, dest="log_every")
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="structured detection for one image or a dataset")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--input")
    d.add_argument("--data")
    d.add_argument("--format", choices=("json",), default="json")
    d.add_argument("--out")
    d.add_argument("--no-ema", action="store_true")
    d.add_argument("--threads", type=int)
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("correct", help="iterative diagnose-then-correct on one image")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--max-rounds", type=int, default=6)
    c.add_argument("--flow-steps", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--no-ema", action="store_true")
    c.add_argument("--threads", type=int)
    c.set_defaults(func=cmd_correct)

    e = sub.add_parser("eval", help="metrics report over the test sets")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--robustness", action="store_true")
    e.add_argument("--n-detect", type=int, dest="n_detect")
    e.add_argument("--n-correct", type=int, dest="n_correct")
    e.add_argument("--max-rounds", type=int, default=6)
    e.add_argument("--flow-steps", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--no-ema", action="store_true")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="gradient, sampler, mask, optimizer suites")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError) as e:
        print(f"ERROR: {e.code}: {e}", file=sys.stderr)
        return 1
    except GenShieldError as e:
        print(f"ERROR: {e.code}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"ERROR: io: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
