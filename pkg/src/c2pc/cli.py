"""Command-line pipeline driver: synth / train / infer / eval / bench.

All knobs live in a TOML config file (sections [model], [train], [loss],
[eval], [synth]) with CLI flags layered on top; `--show-config` prints the
effective configuration as TOML that reproduces the run.  Exit codes:
1 config error, 2 data error, 3 runtime divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


def _apply_thread_cap() -> None:
    cap = os.environ.get("C2PC_THREADS")
    if not cap:
        return
    try:
        limit = int(cap)
    except ValueError:
        raise ConfigError(f"C2PC_THREADS must be an integer, got {cap!r}")
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=limit)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(limit))


def _load_config(path) -> dict:
    from .model import ModelConfig
    from .train import TrainConfig

    sections = {
        "model": {f.name: f for f in dataclasses.fields(ModelConfig)},
        "train": {f.name: f for f in dataclasses.fields(TrainConfig)},
        "loss": {"lam": None},
        "eval": {"threshold": None, "max_iter": None},
        "synth": {"n": None, "seed": None, "t_slices": None, "n_points": None,
                  "noise_std": None},
    }
    raw = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    cfg = {name: {} for name in sections}
    for section, values in raw.items():
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"top-level keys must live in a section ({section})")
        for key, value in values.items():
            if key not in sections[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            cfg[section][key] = value
    return cfg


def _effective_config(cfg: dict) -> dict:
    """Fill every section with its defaults so --show-config prints everything."""
    from .model import ModelConfig
    from .train import TrainConfig

    model = dataclasses.asdict(ModelConfig(**cfg["model"]))
    train = dataclasses.asdict(TrainConfig(**cfg["train"]))
    loss = {"lam": cfg["loss"].get("lam", train["lam"])}
    ev = {"threshold": cfg["eval"].get("threshold", 0.05),
          "max_iter": cfg["eval"].get("max_iter", 50)}
    synth = {"n": cfg["synth"].get("n", 64), "seed": cfg["synth"].get("seed", 0),
             "t_slices": cfg["synth"].get("t_slices", model["T"]),
             "n_points": cfg["synth"].get("n_points", model["N"]),
             "noise_std": cfg["synth"].get("noise_std", 1e-4)}
    return {"model": model, "train": train, "loss": loss, "eval": ev, "synth": synth}


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


def _print_toml(cfg: dict) -> None:
    for section, values in cfg.items():
        print(f"[{section}]")
        for key, value in values.items():
            print(f"{key} = {_toml_value(value)}")
        print()


def _dataset_pairs(data_dir):
    from .synth import load_dataset

    pairs, _ = load_dataset(data_dir)
    return pairs


# -- subcommands ----------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    from .synth import RfConfig, SceneConfig, make_dataset

    eff = _effective_config(cfg)["synth"]
    n = args.n if args.n is not None else eff["n"]
    seed = args.seed if args.seed is not None else eff["seed"]
    manifest = make_dataset(
        n, seed, args.out,
        rf=RfConfig(noise_std=eff["noise_std"]),
        config=SceneConfig(),
        t_slices=eff["t_slices"],
        n_points=eff["n_points"],
    )
    print(f"wrote {manifest['n']} samples to {args.out} (root seed {seed})")
    return 0


def cmd_train(args, cfg) -> int:
    from .model import ModelConfig
    from .train import TrainConfig, train_loop

    eff = _effective_config(cfg)
    model_cfg = ModelConfig(**eff["model"])
    train_cfg = TrainConfig(**eff["train"])
    pairs = _dataset_pairs(args.data)
    n_val = max(1, len(pairs) // 8) if len(pairs) > 1 else 0
    if n_val == 0:
        raise ConfigError("training requires at least 2 samples (train + val)")
    val, train = pairs[:n_val], pairs[n_val:]
    best, records = train_loop(train, val, train_cfg, model_cfg, args.out,
                               resume_from=args.resume)
    print(f"best checkpoint: {best} (val chamfer {min(r['val_chamfer'] for r in records) if records else float('nan'):.4f})")
    return 0


def cmd_infer(args, cfg) -> int:
    from .csidata import load_csi_container, preprocess, write_ply
    from .model import load_model

    model = load_model(args.checkpoint)
    sample = load_csi_container(args.input)
    cloud = model.predict(preprocess(sample))
    write_ply(cloud, args.out)
    print(f"wrote {len(cloud)} points to {args.out}")
    return 0


def cmd_eval(args, cfg) -> int:
    from .evaluation import evaluate
    from .model import load_model

    eff = _effective_config(cfg)["eval"]
    threshold = args.threshold if args.threshold is not None else eff["threshold"]
    model = None
    if not args.predict_ground_truth:
        model = load_model(args.checkpoint)
    pairs = _dataset_pairs(args.data)
    report = evaluate(model, pairs, threshold=threshold, max_iter=eff["max_iter"],
                      predict_ground_truth=args.predict_ground_truth)
    print(f"threshold {threshold} m | mean fitness {report.mean_fitness:.4f} "
          f"| mean rmse {report.mean_rmse:.6f} m | {len(report.fitness)} samples")
    if args.out:
        report.write_json(args.out)
    if args.csv:
        report.write_csv(args.csv)
    return 0


def cmd_bench(args, cfg) -> int:
    from .model import ModelConfig, PointCloudModel, load_model
    from . import tensor

    eff = _effective_config(cfg)
    if args.random_init:
        model = PointCloudModel(ModelConfig(**eff["model"]), seed=0)
    else:
        model = load_model(args.checkpoint)
    from .evaluation import bench_latency

    tensor.set_checked(False)
    try:
        stats = bench_latency(model, n_warmup=args.warmup, n_runs=args.runs)
    finally:
        tensor.set_checked(True)
    print(f"forward latency over {stats['n_runs']} runs: "
          f"mean {stats['mean_ms']:.2f} ms | p50 {stats['p50_ms']:.2f} ms "
          f"| p95 {stats['p95_ms']:.2f} ms")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(stats, fh, indent=2)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2pc",
                                     description="CSI-to-point-cloud pipeline")
    parser.add_argument("--config", type=Path, help="TOML config file")
    parser.add_argument("--show-config", action="store_true",
                        help="print the effective configuration and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("infer", help="run one sample through a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="ICP metrics of a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--threshold", type=float,
                   help="inlier distance threshold in meters (reported numbers depend on it)")
    p.add_argument("--out", type=Path, help="write the JSON report here")
    p.add_argument("--csv", type=Path, help="write per-sample rows as CSV")
    p.add_argument("--predict-ground-truth", action="store_true",
                   help="debug oracle: score the ground truth against itself")

    p = sub.add_parser("bench", help="latency benchmark of the forward pass")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", type=Path)
    group.add_argument("--random-init", action="store_true")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--out", type=Path)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        cfg = _load_config(args.config)
    except (ConfigError, OSError, tomllib.TOMLDecodeError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.show_config:
        try:
            _print_toml(_effective_config(cfg))
        except (TypeError, ValueError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return 0
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG

    handlers = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer,
                "eval": cmd_eval, "bench": cmd_bench}
    from .csidata import CsiFormatError, PlyParseError
    from .model import CheckpointError
    from .train import TrainingDiverged

    try:
        return handlers[args.command](args, cfg)
    except (ConfigError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} (last good checkpoint: {exc.checkpoint})",
              file=sys.stderr)
        return EXIT_RUNTIME
    except (CsiFormatError, PlyParseError, CheckpointError, FileNotFoundError,
            NotADirectoryError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
