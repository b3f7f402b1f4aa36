"""Command-line entry point: pretrain, probe, grid, gradcheck, preview.

Exit status is 0 on success, 1 on a validation error (bad flags, config or
paths) and 2 when the run itself fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import augment, evaluation, gradcheck, nn, trainer
from .data import Dataset, SynthSpec, load_cifar_dir, synth_dataset

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
COMMANDS = ("pretrain", "probe", "grid", "gradcheck", "preview")
PROBE_PREFIX = "probe."


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Config files and data specs
# ---------------------------------------------------------------------------


def read_config_file(path: str) -> dict[str, str]:
    """Plain ``key=value`` lines; '#' starts a comment."""
    if not os.path.isfile(path):
        raise ValidationError(f"config file not found: {path}")
    items: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in items:
                raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
            items[key] = value
    return items


def _probe_from_items(items: dict[str, str], base: evaluation.ProbeConfig) -> evaluation.ProbeConfig:
    known = {f.name: f for f in fields(evaluation.ProbeConfig)}
    values = {}
    for key, text in items.items():
        name = key[len(PROBE_PREFIX):]
        if name not in known:
            raise ValidationError(f"unknown config key {key!r}")
        default = known[name].default
        if isinstance(default, bool):
            values[name] = text == "true"
        elif isinstance(default, tuple):
            values[name] = tuple(int(v) for v in text.split(",") if v.strip())
        else:
            values[name] = type(default)(text)
    return replace(base, **values).validate()


SYNTH_KEYS = {"classes": "class_count", "per_class": "per_class", "contrast": "contrast",
              "noise": "noise", "seed": "seed", "size": "size", "recipe": "recipe", "chroma": "chroma"}


def parse_data_spec(text: str) -> dict:
    """``synth:key=value,...`` or a directory of CIFAR binaries (``cifar100:DIR`` for 100 classes)."""
    if text.startswith("synth"):
        spec = {"kind": "synth", "classes": 4, "per_class": 500, "test_per_class": 250,
                "contrast": 0.0, "noise": 0.08, "seed": 0, "size": 32,
                "recipe": "shapes", "chroma": 0.0}
        body = text[len("synth"):].lstrip(":")
        for part in filter(None, body.split(",")):
            if "=" not in part:
                raise ValidationError(f"bad synthetic data option {part!r}")
            k, v = part.split("=", 1)
            if k not in spec or k == "kind":
                raise ValidationError(f"unknown synthetic data option {k!r}")
            try:
                spec[k] = v if k == "recipe" else float(v) if k in ("contrast", "noise", "chroma") else int(v)
            except ValueError:
                raise ValidationError(f"bad value for synthetic data option {k!r}: {v!r}") from None
        return spec
    classes = 10
    if text.startswith("cifar100:"):
        classes, text = 100, text[len("cifar100:"):]
    if not os.path.isdir(text):
        raise ValidationError(f"dataset path not found: {text}")
    return {"kind": "cifar", "path": os.path.abspath(text), "classes": classes}


def load_data(spec: dict) -> tuple[Dataset, Dataset]:
    if spec["kind"] == "cifar":
        try:
            return load_cifar_dir(spec["path"], spec["classes"])
        except FileNotFoundError as e:
            raise ValidationError(str(e)) from None
    common = dict(class_count=spec["classes"], size=spec["size"], contrast=spec["contrast"], noise=spec["noise"],
                  recipe=spec["recipe"], chroma=spec["chroma"])
    try:
        train = synth_dataset(SynthSpec(per_class=spec["per_class"], seed=spec["seed"], **common))
        test = synth_dataset(SynthSpec(per_class=spec["test_per_class"], seed=spec["seed"] + 1000, **common))
    except ValueError as e:
        raise ValidationError(str(e)) from None
    return train, test


def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.images).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def file_digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", default="synth:", help="CIFAR directory or synth:key=value,...")
    p.add_argument("--out", required=True, help="run directory")
    if with_mode:
        p.add_argument("--mode", choices=trainer.MODES)
        p.add_argument("--beta-base", type=float)
        p.add_argument("--beta-schedule", choices=("fixed", "cosine"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=sorted(nn.ARCHS))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="self-supervised pretraining; writes checkpoint and metrics")
    _train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("probe", help="linear and kNN probes on a frozen encoder")
    _train_flags(p, with_mode=False)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--random-init", action="store_true", help="probe a freshly initialized encoder")
    p.add_argument("--knn-k", type=int, default=20)

    p = sub.add_parser("grid", help="mode x beta grid over seeds; CSV and text report")
    _train_flags(p, with_mode=False)
    p.add_argument("--preset", choices=("table1", "beta-sweep"), default="table1")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    p.add_argument("--beta-base", type=float, help="beta_base of the MSR cells (table1 preset)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=100, help="random seeds per case")
    p.add_argument("--out", help="directory for the result table")

    p = sub.add_parser("preview", help="write augmented view quadruples as PPM files")
    p.add_argument("--data", default="synth:")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--jitter-scale", type=float, default=1.0)
    return parser


def resolve(args: argparse.Namespace) -> tuple[trainer.TrainConfig, evaluation.ProbeConfig]:
    """Config file values, then explicit flags on top."""
    items = read_config_file(args.config) if getattr(args, "config", None) else {}
    probe_items = {k: v for k, v in items.items() if k.startswith(PROBE_PREFIX)}
    train_items = {k: v for k, v in items.items() if not k.startswith(PROBE_PREFIX)}
    probe = _probe_from_items(probe_items, evaluation.ProbeConfig())
    try:
        cfg = trainer.config_from_items(train_items)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    overrides = {}
    for flag, name in (("mode", "mode"), ("beta_base", "beta_base"), ("beta_schedule", "beta_schedule"),
                       ("epochs", "epochs"), ("batch_size", "batch_size"), ("seed", "seed"), ("arch", "arch")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    mode = overrides.get("mode", cfg.mode)
    if mode.startswith("byol") and getattr(args, "beta_base", None) is not None and args.command == "pretrain":
        raise ValidationError(f"--beta-base conflicts with --mode {mode} (no aggressive-pair term)")
    cfg = replace(cfg, **overrides)
    if args.command == "grid":
        cfg = replace(cfg, beta_base=None, mode="msr")
    try:
        cfg = cfg.resolved()
    except ValueError as e:
        raise ValidationError(str(e)) from None
    return cfg, probe


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def write_manifest(out: str, command: str, payload: dict) -> str:
    os.makedirs(out, exist_ok=True)
    manifest = {"command": command, **payload}
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def record_outputs(out: str, paths: list[str]) -> None:
    digests = {os.path.relpath(p, out): file_digest(p) for p in paths}
    with open(os.path.join(out, "outputs.json"), "w") as f:
        json.dump(digests, f, indent=2, sort_keys=True)
        f.write("\n")


def _probe_dict(probe: evaluation.ProbeConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(probe).items()}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg, _ = resolve(args)
    data = parse_data_spec(args.data)
    if args.resume and not os.path.isfile(args.resume):
        raise ValidationError(f"checkpoint not found: {args.resume}")
    train, _test = load_data(data)
    write_manifest(args.out, "pretrain", {
        "config": cfg.canonical(), "config_sha256": cfg.digest(), "seeds": [cfg.seed], "data": data,
        "data_sha256": dataset_digest(train), "resume": args.resume,
        "resume_sha256": file_digest(args.resume) if args.resume else None, "out": os.path.abspath(args.out),
    })
    trainer.tune_allocator()
    state = trainer.load_checkpoint(args.resume) if args.resume else None
    state = trainer.pretrain(cfg, train, state)
    ckpt = os.path.join(args.out, "checkpoint.msr")
    metrics = os.path.join(args.out, "metrics.csv")
    trainer.save_checkpoint(state, ckpt)
    trainer.write_metrics_csv(state, metrics)
    record_outputs(args.out, [ckpt, metrics])
    last = state.log[-1]["loss"] if state.log else float("nan")
    print(f"pretrained {state.k} steps; final loss {last:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg, probe = resolve(args)
    data = parse_data_spec(args.data)
    if args.checkpoint and not os.path.isfile(args.checkpoint):
        raise ValidationError(f"checkpoint not found: {args.checkpoint}")
    train, test = load_data(data)
    write_manifest(args.out, "probe", {
        "config": cfg.canonical(), "probe": _probe_dict(probe), "seeds": [cfg.seed], "data": data,
        "data_sha256": dataset_digest(train), "checkpoint": args.checkpoint,
        "checkpoint_sha256": file_digest(args.checkpoint) if args.checkpoint else None,
        "knn_k": args.knn_k, "out": os.path.abspath(args.out),
    })
    if args.checkpoint:
        params = trainer.load_checkpoint(args.checkpoint).pair.online
    else:
        params = nn.init_models(cfg.arch, seed=cfg.seed, dtype=cfg.dtype).online
    res = evaluation.linear_probe(params, train, test, replace(probe, seed=cfg.seed))
    knn = evaluation.knn_probe(params, train, test, args.knn_k)
    path = os.path.join(args.out, "probe.json")
    with open(path, "w") as f:
        json.dump({"linear_accuracy": res.accuracy, "linear_train_accuracy": res.train_accuracy,
                   "knn_accuracy": knn, "lr_trajectory": res.lr_trajectory}, f, indent=2)
        f.write("\n")
    record_outputs(args.out, [path])
    print(f"linear probe {100 * res.accuracy:.1f}%  kNN(k={args.knn_k}) {100 * knn:.1f}%")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg, probe = resolve(args)
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError:
        raise ValidationError(f"bad seed list {args.seeds!r}") from None
    data = parse_data_spec(args.data)
    train, test = load_data(data)
    try:
        if args.preset == "table1":
            grid = evaluation.table1_grid(cfg, seeds, 0.5 if args.beta_base is None else args.beta_base, probe)
        else:
            grid = evaluation.beta_sweep_grid(cfg, seeds, probe=probe)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    write_manifest(args.out, "grid", {
        "config": cfg.canonical(), "probe": _probe_dict(probe), "seeds": list(seeds), "data": data,
        "data_sha256": dataset_digest(train), "preset": args.preset,
        "cells": [dataclasses.asdict(c) for c in grid.cells], "out": os.path.abspath(args.out),
    })
    trainer.tune_allocator()
    report = evaluation.run_grid(grid, train, test)
    evaluation.write_report(report, args.out)
    record_outputs(args.out, [os.path.join(args.out, n) for n in ("grid.csv", "grid.txt")])
    print(report.to_text(), end="")
    failed = [r for r in report.results if r.accuracy is None]
    for r in failed:
        print(f"cell {r.cell.label} seed {r.seed} failed: {r.error}", file=sys.stderr)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ValidationError("--trials must be positive")
    if args.out:
        write_manifest(args.out, "gradcheck", {"trials": args.trials, "tolerance": gradcheck.TOLERANCE,
                                               "out": os.path.abspath(args.out)})
    result = gradcheck.run_suite(args.trials)
    table = result.table()
    print(table, end="")
    print(f"{len(result.errors)} cases x {args.trials} seeds in {result.seconds:.1f}s")
    if args.out:
        path = os.path.join(args.out, "gradcheck.txt")
        with open(path, "w") as f:
            f.write(table)
        record_outputs(args.out, [path])
    return EXIT_OK if result.passed else EXIT_FAILED


def cmd_preview(args) -> int:
    if args.n < 1:
        raise ValidationError("--n must be positive")
    data = parse_data_spec(args.data)
    train, _ = load_data(data)
    if args.n > len(train):
        raise ValidationError(f"--n {args.n} exceeds dataset size {len(train)}")
    spec = augment.AugSpec()
    spec = spec if args.jitter_scale == 1.0 else spec.noisy(args.jitter_scale)
    write_manifest(args.out, "preview", {"seeds": [args.seed], "n": args.n, "data": data,
                                         "data_sha256": dataset_digest(train),
                                         "aug": dataclasses.asdict(spec), "out": os.path.abspath(args.out)})
    views = augment.make_views(train.images[: args.n], args.seed, spec)
    written = []
    for i in range(args.n):
        for name in ("v_w", "v_w_prime", "v_a", "v_a_prime"):
            path = os.path.join(args.out, f"{i:03d}_{name}.ppm")
            augment.write_ppm(path, getattr(views, name)[i])
            written.append(path)
    record_outputs(args.out, written)
    print(f"wrote {len(written)} PPM files to {args.out}")
    return EXIT_OK


HANDLERS = {"pretrain": cmd_pretrain, "probe": cmd_probe, "grid": cmd_grid,
            "gradcheck": cmd_gradcheck, "preview": cmd_preview}


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return HANDLERS[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # runtime failure after validation
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
