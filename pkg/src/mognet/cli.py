"""Command-line interface: train, eval, size, gen-ca.

Configs are flat ``key=value`` files ('#' starts a comment).  Every run
of ``train`` writes a manifest of all resolved settings next to the
checkpoint; a manifest is itself a valid ``--config``, so a run can be
reproduced bit for bit from its output directory.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint
error, 4 internal error (including engine disagreement).
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import __version__, data as data_mod
from .blocks import ModelConfig, build_model, compression_rate, size_report
from .ca_weights import CAConfig, evolve
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    EngineMismatchError,
    MognetError,
)
from .int_inference import (
    QuantTensor,
    export_checkpoint,
    freeze,
    import_checkpoint,
    int_forward,
    prepare_banks,
    real_forward,
)
from .training import TrainConfig, two_stage_train

# Keys a manifest carries beyond the two config dataclasses.
_RUN_KEYS = ("command", "data", "out", "toolkit_version")


def load_config_file(path: str) -> dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path!r} does not exist")
    kv: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
    return kv


def _coerce(field: dataclasses.Field, value: str, key: str):
    try:
        if field.type in ("int", int):
            return int(value)
        if field.type in ("float", float):
            return float(value)
        if field.type in ("bool", bool):
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return value
    except ValueError:
        raise ConfigError(f"field {key}: cannot parse {value!r}") from None


def configs_from_kv(kv: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    model_kwargs, train_kwargs = {}, {}
    for key, value in kv.items():
        if key in model_fields:
            model_kwargs[key] = _coerce(model_fields[key], value, key)
        elif key in train_fields:
            train_kwargs[key] = _coerce(train_fields[key], value, key)
        elif key in _RUN_KEYS:
            continue
        else:
            raise ConfigError(f"unknown config key {key!r}")
    missing = [k for k in ("n", "groups", "k") if k not in model_kwargs]
    if missing:
        raise ConfigError(f"config is missing required keys: {', '.join(missing)}")
    model_cfg = ModelConfig(**model_kwargs)
    train_cfg = TrainConfig(**train_kwargs)
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


def write_manifest(
    path: str, model_cfg: ModelConfig, train_cfg: TrainConfig, run: dict[str, str]
) -> None:
    lines = [f"# run manifest, toolkit {__version__}"]
    for key in _RUN_KEYS:
        if key in run:
            lines.append(f"{key}={run[key]}")
    for cfg in (model_cfg, train_cfg):
        for f in dataclasses.fields(cfg):
            value = getattr(cfg, f.name)
            lines.append(f"{f.name}={str(value).lower() if isinstance(value, bool) else value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_dataset(
    spec: str, model_cfg: ModelConfig, train_cfg: TrainConfig
) -> tuple[np.ndarray, np.ndarray]:
    """'synth' or a path to record files.  Returns float images + labels."""
    if spec == "synth":
        if model_cfg.class_count == 2:
            return data_mod.synthetic_two_class(
                train_cfg.synth_samples, hw=model_cfg.input_hw, seed=train_cfg.synth_seed
            )
        return data_mod.synthetic_multiclass(
            train_cfg.synth_samples,
            classes=model_cfg.class_count,
            hw=model_cfg.input_hw,
            seed=train_cfg.synth_seed,
        )
    images, labels = data_mod.load_image_records(spec)
    if images.shape[2] != model_cfg.input_hw:
        raise DataError(
            f"dataset images are {images.shape[2]}x{images.shape[3]}, "
            f"model expects {model_cfg.input_hw}x{model_cfg.input_hw}"
        )
    if labels.max() >= model_cfg.class_count:
        raise DataError(
            f"dataset has label {labels.max()} but model has {model_cfg.class_count} classes"
        )
    return data_mod.to_float(images), labels


def cmd_train(args: argparse.Namespace) -> int:
    kv = load_config_file(args.config)
    if args.data:
        kv["data"] = args.data
    if args.out:
        kv["out"] = args.out
    model_cfg, train_cfg = configs_from_kv(kv)
    data_spec = kv.get("data")
    out_dir = kv.get("out")
    if not data_spec:
        raise ConfigError("no dataset: pass --data or put data=... in the config")
    if not out_dir:
        raise ConfigError("no output directory: pass --out or put out=... in the config")
    dataset = _load_dataset(data_spec, model_cfg, train_cfg)
    os.makedirs(out_dir, exist_ok=True)
    model = build_model(model_cfg)
    metrics = two_stage_train(model, dataset, train_cfg)
    ckpt_path = os.path.join(out_dir, "checkpoint.mgnc")
    export_checkpoint(model, ckpt_path)
    write_manifest(
        os.path.join(out_dir, "manifest.cfg"),
        model_cfg,
        train_cfg,
        {"command": "train", "data": data_spec, "out": out_dir, "toolkit_version": __version__},
    )
    s_names = sorted(metrics[0].step_sizes) if metrics else []
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(["stage", "epoch", "loss", "accuracy", "lr"]
                          + [f"s[{name}]" for name in s_names]) + "\n")
        for m in metrics:
            row = [m.stage, m.epoch, f"{m.loss:.6f}", f"{m.accuracy:.4f}", f"{m.lr:.6g}"]
            row += [f"{m.step_sizes[name]:.8g}" for name in s_names]
            fh.write(",".join(str(v) for v in row) + "\n")
    last = metrics[-1] if metrics else None
    if last:
        print(f"trained {len(metrics)} epochs; final {last.stage} accuracy={last.accuracy:.4f}")
    print(f"checkpoint written to {ckpt_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    frozen = import_checkpoint(args.checkpoint)
    cfg = frozen.config
    stub_train = TrainConfig(synth_samples=args.synth_samples, synth_seed=args.synth_seed)
    images, labels = _load_dataset(args.data, cfg, stub_train)
    if args.limit:
        images, labels = images[: args.limit], labels[: args.limit]
    levels = QuantTensor.from_levels(data_mod.quantize_images(images, cfg.k), cfg.k)
    if args.engine == "real":
        predicted = real_forward(levels, frozen).labels
    elif args.engine == "integer":
        predicted = int_forward(levels, frozen, prepare_banks(frozen)).labels
    else:
        banks = prepare_banks(frozen)
        ir = int_forward(levels, frozen, banks)
        rr = real_forward(levels, frozen)
        diff = np.flatnonzero(ir.labels != rr.labels)
        if diff.size:
            raise EngineMismatchError(
                f"engines disagree on {diff.size} of {labels.size} samples; "
                f"first at index {int(diff[0])}"
            )
        print(f"engines agree on {labels.size}/{labels.size} samples")
        predicted = ir.labels
    acc = float((predicted == labels).mean())
    print(f"engine={args.engine} samples={labels.size} accuracy={acc:.4f}")
    return 0


def cmd_size(args: argparse.Namespace) -> int:
    if bool(args.config) == bool(args.checkpoint):
        raise ConfigError("size needs exactly one of --config or --checkpoint")
    if args.config:
        model_cfg, _ = configs_from_kv(load_config_file(args.config))
    else:
        model_cfg = import_checkpoint(args.checkpoint).config
    report = size_report(model_cfg)
    print(report.format())
    cr = compression_rate(model_cfg.n, model_cfg.n, model_cfg.groups)
    for i in range(model_cfg.stage_count):
        for half in (1, 2):
            print(f"cr[mrb{i}.cflog{half}]={cr}")
    if args.reference is not None:
        ratio = report.megabits / args.reference if args.reference else float("inf")
        print(f"reference_megabits={args.reference:.6f} ratio={ratio:.4f}")
    return 0


def _parse_seed(seed: str, width: int) -> np.ndarray | int:
    if set(seed) <= {"0", "1"} and len(seed) == width:
        return np.array([int(ch) for ch in seed], dtype=np.uint8)
    try:
        return int(seed)
    except ValueError:
        raise ConfigError(
            f"--seed must be an integer or a {width}-character 0/1 row, got {seed!r}"
        ) from None


def cmd_gen_ca(args: argparse.Namespace) -> int:
    from .ca_weights import default_seed

    seed = _parse_seed(args.seed, args.width)
    row = seed if isinstance(seed, np.ndarray) else default_seed(args.width, seed)
    states = evolve(CAConfig(width=args.width, steps=args.steps, rule=args.rule, seed_row=row))
    for state in states:
        print("".join(str(int(c)) for c in state))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mognet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mognet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and export a checkpoint")
    p_train.add_argument("--config", required=True, help="key=value config file")
    p_train.add_argument("--data", help="dataset path or 'synth' (overrides config)")
    p_train.add_argument("--out", help="output directory (overrides config)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="dataset path or 'synth'")
    p_eval.add_argument("--engine", choices=("real", "integer", "both"), default="integer")
    p_eval.add_argument("--limit", type=int, default=0, help="evaluate at most N samples")
    p_eval.add_argument("--synth-samples", type=int, default=500, dest="synth_samples")
    p_eval.add_argument("--synth-seed", type=int, default=1234, dest="synth_seed")
    p_eval.set_defaults(func=cmd_eval)

    p_size = sub.add_parser("size", help="report serialized model size per layer")
    p_size.add_argument("--config", help="key=value config file")
    p_size.add_argument("--checkpoint", help="existing checkpoint")
    p_size.add_argument(
        "--reference", type=float, help="print the total next to a reference size in megabits"
    )
    p_size.set_defaults(func=cmd_size)

    p_ca = sub.add_parser("gen-ca", help="print evolved CA rows (one 0/1 line per step)")
    p_ca.add_argument("--width", type=int, required=True)
    p_ca.add_argument("--steps", type=int, required=True)
    p_ca.add_argument("--rule", type=int, default=30)
    p_ca.add_argument("--seed", default="0", help="integer seed or a literal 0/1 row")
    p_ca.set_defaults(func=cmd_gen_ca)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors, 0 on --help; keep its codes.
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (MognetError, AssertionError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
