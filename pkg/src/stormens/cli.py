"""Command-line entry point.

Subcommands map onto pipeline stages; ``run-all`` executes the whole chain.
Exit codes: 0 success, 2 stage failure, 3 configuration error. The only
environment variable honored is STORMENS_WORKERS (prediction parallelism).
"""

import argparse
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config, save_config
from .errors import ConfigError, StageFailure, StormensError
from .pipeline import (
    RunPaths,
    build_archive,
    emit_report,
    run_experiment,
    stage_predict,
    stage_synth_data,
    stage_train_cgan,
    stage_train_classifier,
    stage_train_encoder,
    stage_train_mlp,
    stage_verify,
)

EXIT_OK = 0
EXIT_STAGE = 2
EXIT_CONFIG = 3


def build_parser():
    ap = argparse.ArgumentParser(
        prog="stormens",
        description="Generative-ensemble severe weather post-processing",
    )
    ap.add_argument("--config", type=Path, help="experiment config file (INI)")
    ap.add_argument("--seed", type=int, help="override the global seed")
    ap.add_argument("--out", type=Path, default=Path("run"), help="run directory")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("init-config", help="write a default config to --config")
    sub.add_parser("synth-data", help="generate and persist the synthetic archive")

    p = sub.add_parser("train-cgan", help="train the conditional GANs")
    p.add_argument("--group", choices=["A", "B", "both"], default="both")
    p.add_argument("--epochs", type=int, help="override configured epochs")

    sub.add_parser("train-encoder", help="pretrain the patch encoder")

    p = sub.add_parser("train-classifier", help="train per-window classifiers")
    p.add_argument("--window", type=int, help="train a single window start")

    sub.add_parser("train-mlp", help="train the MLP baseline")

    p = sub.add_parser("predict", help="run ensemble prediction on verify days")
    p.add_argument("--method", choices=["cgan", "cnn", "mlp", "all"], default="all")

    p = sub.add_parser("verify", help="compute verification metrics")
    p.add_argument("--method", choices=["cgan", "cnn", "mlp", "all"], default="all")
    p.add_argument("--metric", default="all",
                   help="comma list: bss,reliability,spread-skill,discard,"
                        "bss-map,pattern-corr,perm-importance")

    sub.add_parser("report", help="emit the summary report")

    p = sub.add_parser("run-all", help="execute the full stage chain")
    p.add_argument("--stages", help="comma list of stages to run")
    return ap


def _load_config(args):
    if args.config and args.config.exists():
        cfg = load_config(args.config)
    elif args.config and args.command != "init-config":
        raise ConfigError(f"config file not found: {args.config}")
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = ExperimentConfig(**{**cfg.__dict__, "seed": args.seed})
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "init-config":
        target = args.config or Path("stormens.ini")
        save_config(cfg, target)
        print(f"wrote {target}")
        return EXIT_OK

    paths = RunPaths(args.out)
    try:
        if args.command == "run-all":
            stages = args.stages.split(",") if args.stages else None
            manifest = run_experiment(cfg, args.out, stages=stages)
            print(f"run complete; manifest at {paths.manifest}")
            for stage, secs in manifest.timings.items():
                print(f"  {stage}: {secs:.1f}s")
            return EXIT_OK

        paths.ensure()
        if args.command == "synth-data":
            stage_synth_data(cfg, paths)
            print(f"archive written to {paths.archive}")
        elif args.command == "train-cgan":
            if args.epochs is not None:
                cfg.cgan.epochs = args.epochs
            groups = ("A", "B") if args.group == "both" else (args.group,)
            stage_train_cgan(cfg, paths, build_archive(cfg, paths), groups=groups)
            print(f"CGAN checkpoint at {paths.cgan_checkpoint}")
        elif args.command == "train-encoder":
            stage_train_encoder(cfg, paths, build_archive(cfg, paths))
            print(f"model checkpoint at {paths.models_checkpoint}")
        elif args.command == "train-classifier":
            windows = None if args.window is None else [args.window]
            stage_train_classifier(cfg, paths, build_archive(cfg, paths), windows=windows)
            print("classifiers updated")
        elif args.command == "train-mlp":
            stage_train_mlp(cfg, paths, build_archive(cfg, paths))
            print("MLP updated")
        elif args.command == "predict":
            methods = ("cgan", "cnn", "mlp") if args.method == "all" else (args.method,)
            stage_predict(cfg, paths, build_archive(cfg, paths), methods=methods)
            print(f"forecasts in {paths.forecasts}")
        elif args.command == "verify":
            methods = ("cgan", "cnn", "mlp") if args.method == "all" else (args.method,)
            stage_verify(cfg, paths, build_archive(cfg, paths), methods=methods,
                         metrics=args.metric)
            print(f"metrics in {paths.metrics}")
        elif args.command == "report":
            out = emit_report(cfg, paths)
            print(f"report at {out}")
    except StageFailure as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StormensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
