"""Command-line entry point wiring the pipeline stages.

Exit codes: 0 success, 2 config error, 3 missing prerequisite artifact,
4 numerical failure. Unknown flags of the form `--section.key=value` are
treated as config overrides.
"""

from __future__ import annotations

import argparse
import sys

import torch

from . import pipeline
from .config import load_config
from .errors import ConfigError, MissingArtifactError, NumericalError

COMMANDS = (
    "synth", "build-graph", "train-tokenizer", "assign-sids", "cluster-codebooks",
    "train-model", "infer", "evaluate", "ablate", "all",
)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s2gr",
        description="Generative recommendation pipeline: graph smoothing, "
                    "balanced residual quantization, latent-reasoning decoding.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", "-c", default=None, help="path to the INI config file")
    parser.add_argument("--threads", type=int, default=None,
                        help="torch thread count (1 = deterministic mode)")
    parser.add_argument("--allow-leakage", action="store_true",
                        help="permit graph construction from files containing held-out rows")
    parser.add_argument("--quiet", "-q", action="store_true")
    return parser


def _extract_overrides(extras: list[str]) -> list[str]:
    overrides = []
    for arg in extras:
        if arg.startswith("--") and "." in arg.split("=", 1)[0] and "=" in arg:
            overrides.append(arg[2:])
        else:
            raise ConfigError(f"unrecognized argument {arg!r} "
                              "(overrides look like --section.key=value)")
    return overrides


def main(argv: list[str] | None = None) -> int:
    args, extras = _parser().parse_known_args(argv)
    try:
        overrides = _extract_overrides(extras)
        cfg = load_config(args.config, overrides)
        threads = args.threads if args.threads is not None else cfg.run.threads
        torch.set_num_threads(max(1, threads))

        say = (lambda *a: None) if args.quiet else (lambda *a: print(*a, flush=True))

        if args.command == "synth":
            pipeline.stage_synth(cfg)
            say(f"synthetic corpus written to {cfg.workdir}")
        elif args.command == "build-graph":
            pipeline.stage_build_graph(cfg, allow_leakage=args.allow_leakage)
            say(f"graph + aligned embeddings written to {cfg.workdir}")
        elif args.command == "train-tokenizer":
            pipeline.stage_train_tokenizer(
                cfg, log_fn=lambda e, loss: say(f"tokenizer epoch {e}: loss {loss:.5f}"))
        elif args.command == "assign-sids":
            pipeline.stage_assign_sids(cfg)
            say(pipeline.artifact(cfg, "sid_metrics").read_text().rstrip())
        elif args.command == "cluster-codebooks":
            pipeline.stage_cluster_codebooks(cfg)
            say(f"centroids written to {pipeline.artifact(cfg, 'centroids')}")
        elif args.command == "train-model":
            pipeline.stage_train_model(
                cfg, log_fn=lambda line, dt: say(f"epoch {line}  ({dt:.1f}s)"))
        elif args.command == "infer":
            pipeline.stage_infer(cfg)
            say(f"rankings written to {pipeline.artifact(cfg, 'rankings')}")
        elif args.command == "evaluate":
            report = pipeline.stage_evaluate(cfg)
            for line in report.lines():
                say(line)
        elif args.command == "ablate":
            pipeline.run_ablation(cfg, log_fn=say)
        elif args.command == "all":
            pipeline.stage_all(
                cfg, allow_leakage=args.allow_leakage,
                log_fn=lambda line, dt: say(f"epoch {line}  ({dt:.1f}s)"))
            report_path = pipeline.artifact(cfg, "report")
            say(report_path.read_text().rstrip())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
