"""Command-line entry points: generate demonstrations, meta-train (or train a
baseline), evaluate on held-out tasks, and run the gradient-check suites.

Exit codes: 0 success; 1 configuration or I/O problem; 2 expert quality below
threshold; 3 training divergence; 4 demonstration-modality mismatch;
5 failed gradient checks. Every command is deterministic under a fixed
``--seed``; worker parallelism is capped by the MIL_THREADS variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time

import numpy as np

from .baselines import train_baseline
from .config import ConfigError, ExperimentConfig, load_config
from .dataset import (DatasetConfig, generate_dataset, read_dataset,
                      write_dataset, env_config_hash)
from .env import EnvConfig
from .evaluation import METHODS, evaluate, report_csv, report_json
from .gradcheck import run_all
from .io_format import FormatError, read_blob, write_blob
from .meta import (INNER_LOSSES, ModalityError, TrainConfig, TrainingDiverged,
                   meta_train)
from .policy import ArchitectureConfig, init_params
from .autodiff import inject_vjp_fault

EXIT_OK, EXIT_CONFIG, EXIT_EXPERT, EXIT_DIVERGED, EXIT_MODALITY, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5

EXPERT_QUALITY_THRESHOLD = 0.95


def _echo(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    env, data, train = cfg.env, cfg.data, cfg.train
    if getattr(args, "vision", None) is not None:
        env = dataclasses.replace(env, vision=args.vision)
    if getattr(args, "seed", None) is not None:
        data = dataclasses.replace(data, seed=args.seed)
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        train = dataclasses.replace(train, epochs=args.epochs)
    if getattr(args, "inner_loss", None) is not None:
        train = dataclasses.replace(train, inner_loss=args.inner_loss)
    arch = dataclasses.replace(
        cfg.arch, vision=env.vision, image_hw=env.image_hw,
        state_dim=env.state_dim, config_dim=env.config_dim,
        two_head=cfg.arch.two_head or train.inner_loss in ("two-head", "action-free"))
    return ExperimentConfig(env=env, arch=arch, data=data, train=train,
                            lstm_width=cfg.lstm_width)


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    try:
        data, stats = generate_dataset(cfg.env, cfg.data)
        write_dataset(data, args.out)
    except (ValueError, OSError) as e:
        return _fail(EXIT_CONFIG, str(e))
    summary = {
        "dataset": str(args.out), "env_hash": data.env_hash,
        "train_tasks": stats["train_tasks"], "test_tasks": stats["test_tasks"],
        "demos": stats["demos"],
        "expert_success_rate": stats["demo_success_rate"],
    }
    _echo(summary)
    if stats["demo_success_rate"] < EXPERT_QUALITY_THRESHOLD:
        return _fail(EXIT_EXPERT,
                     f"expert success rate {stats['demo_success_rate']:.3f} "
                     f"below {EXPERT_QUALITY_THRESHOLD}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def _write_history_csv(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']:.17g},{row['val_loss']:.17g}\n")


def _pack_state(result, cfg: ExperimentConfig, method: str):
    arrays = {f"param/{k}": v for k, v in result.params.items()}
    arrays.update({f"adam_m/{k}": v for k, v in result.adam.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in result.adam.v.items()})
    meta = {
        "kind": "params", "method": method, "epoch": result.epoch,
        "adam_step": result.adam.step, "rng_state": result.rng_state,
        "history": result.history, "env_hash": env_config_hash(cfg.env),
        "config": cfg.as_dict(),
    }
    return meta, arrays


def load_params(path):
    """Read a params/checkpoint file; returns (meta, params, adam arrays)."""
    meta, arrays = read_blob(path)
    if meta.get("kind") != "params":
        raise FormatError(f"{path}: not a parameter file")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    adam_m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    adam_v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return meta, params, (adam_m, adam_v)


def _config_from_meta(meta) -> ExperimentConfig:
    raw = meta["config"]
    env = EnvConfig(**{k: tuple(v) if isinstance(v, list) else v
                       for k, v in raw["env"].items()})
    arch = ArchitectureConfig(**{k: tuple(v) if isinstance(v, list) else v
                                 for k, v in raw["arch"].items()})
    train_raw = {k: tuple(v) if isinstance(v, list) and v is not None else v
                 for k, v in raw["train"].items()}
    return ExperimentConfig(env=env, arch=arch,
                            data=DatasetConfig(**raw["data"]),
                            train=TrainConfig(**train_raw),
                            lstm_width=raw.get("lstm_width", 512))


def cmd_train(args) -> int:
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        data = read_dataset(args.dataset, expected_env=cfg.env)
    except (ConfigError, FormatError, OSError, ValueError) as e:
        return _fail(EXIT_CONFIG, str(e))
    method = args.method
    if method not in ("mil", "contextual", "lstm"):
        return _fail(EXIT_CONFIG, f"--method {method!r} is not trainable")

    resume_kw = {}
    if args.resume:
        try:
            meta, params, (adam_m, adam_v) = load_params(args.resume)
        except FormatError as e:
            return _fail(EXIT_CONFIG, str(e))
        from .optim import AdamState
        adam = AdamState(lr=cfg.train.outer_lr, step=meta["adam_step"],
                         m=adam_m, v=adam_v)
        resume_kw = dict(init=params, adam=adam, start_epoch=meta["epoch"],
                         rng_state=meta["rng_state"], history=meta["history"])

    ckpt_path = str(args.out) + ".ckpt"

    def checkpoint(result):
        if args.checkpoint_every and result.epoch % args.checkpoint_every == 0:
            write_blob(ckpt_path, *_pack_state(result, cfg, method))

    try:
        if method == "mil":
            result = meta_train(data.train_tasks, cfg.arch, cfg.train,
                                epoch_callback=checkpoint, **resume_kw)
        else:
            result = train_baseline(data.train_tasks, cfg.arch, cfg.train, method,
                                    lstm_width=cfg.lstm_width,
                                    epoch_callback=checkpoint, **resume_kw)
    except TrainingDiverged as e:
        return _fail(EXIT_DIVERGED, str(e))
    except ModalityError as e:
        return _fail(EXIT_MODALITY, str(e))
    except ValueError as e:
        return _fail(EXIT_CONFIG, str(e))

    write_blob(args.out, *_pack_state(result, cfg, method))
    _write_history_csv(str(args.out) + ".history.csv", result.history)
    final = result.history[-1] if result.history else {"train_loss": None, "val_loss": None}
    _echo({"params": str(args.out), "method": method, "epochs": result.epoch,
           "final_train_loss": final["train_loss"], "final_val_loss": final["val_loss"]})
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    try:
        data = read_dataset(args.dataset)
    except (FormatError, OSError) as e:
        return _fail(EXIT_CONFIG, str(e))
    method = args.method
    kw = {}
    if method in ("mil", "contextual", "lstm"):
        if not args.params:
            return _fail(EXIT_CONFIG, f"--method {method} requires --params")
        try:
            meta, params, _ = load_params(args.params)
            cfg = _config_from_meta(meta)
        except (FormatError, OSError) as e:
            return _fail(EXIT_CONFIG, str(e))
        if meta["method"] != method:
            return _fail(EXIT_CONFIG,
                         f"params were trained for {meta['method']!r}, not {method!r}")
        kw = dict(arch=cfg.arch, tc=cfg.train, params=params,
                  lstm_width=cfg.lstm_width)
    try:
        report = evaluate(data, method, n_tasks=args.tasks, n_trials=args.trials,
                          k=args.shots, seed=args.seed, **kw)
    except ModalityError as e:
        return _fail(EXIT_MODALITY, str(e))
    except ValueError as e:
        return _fail(EXIT_CONFIG, str(e))
    with open(str(args.out) + ".json", "w") as fh:
        fh.write(report_json(report))
        fh.write("\n")
    with open(str(args.out) + ".csv", "w") as fh:
        fh.write(report_csv(report))
    _echo({"method": method, "shots": report.shots,
           "success_rate": report.success_rate,
           "successes": report.successes, "trials": report.trials,
           "report": str(args.out) + ".json",
           "wall_clock_sec": round(report.wall_clock_sec, 3)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    ctx = inject_vjp_fault(args.inject_fault) if args.inject_fault else None
    t0 = time.monotonic()
    if ctx:
        with ctx:
            results = run_all(include_vision=not args.skip_vision)
    else:
        results = run_all(include_vision=not args.skip_vision)
    failures = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:28s} "
              f"max_rel_err={r.max_rel_err:.3e}  threshold={r.threshold:.0e}")
    print(f"{len(results) - len(failures)}/{len(results)} checks passed "
          f"in {time.monotonic() - t0:.1f}s")
    if failures:
        return _fail(EXIT_GRADCHECK,
                     "failing checks: " + ", ".join(r.name for r in failures))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="milkit",
                                description="one-shot imitation benchmark pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample tasks and expert demonstrations")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--vision", action=argparse.BooleanOptionalAction)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="meta-train or train a baseline")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--method", default="mil", choices=["mil", "contextual", "lstm"])
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--inner-loss", choices=list(INNER_LOSSES))
    t.add_argument("--resume")
    t.add_argument("--checkpoint-every", type=int, default=10)
    t.add_argument("--vision", action=argparse.BooleanOptionalAction)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a method on held-out tasks")
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--method", default="mil", choices=list(METHODS))
    e.add_argument("--params")
    e.add_argument("--shots", "-k", type=int, default=1)
    e.add_argument("--tasks", type=int, default=20)
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--skip-vision", action="store_true")
    c.add_argument("--inject-fault", metavar="OP",
                   help="flip the sign of OP's backward rule (harness self-test)")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
