"""Command-line surface: train, eval, verify, plot.

Exit codes: 0 success, 1 usage or missing inputs, 2 verification failure,
3 numeric fault. The SLOTPLAN_OUT_ROOT environment variable re-roots
relative output directories.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, from_dict, load_config, save_config, to_dict
from .metrics import MetricsWriter, read_metrics
from .model import NumericFault, init_params
from .plotting import learning_curve_svg, summary_table
from .training import evaluate_policy, run_training
from .verify import run_verification

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY_FAILED = 2
EXIT_NUMERIC_FAULT = 3


def _resolve_out(out_dir: str) -> Path:
    root = os.environ.get("SLOTPLAN_OUT_ROOT")
    path = Path(out_dir)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slotplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    p_train.add_argument("--config", required=True, help="YAML config path")
    p_train.add_argument("--seed", type=int, default=None, help="override config seed")
    p_train.add_argument("--out", default=None, help="override output directory")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, required=True)
    p_eval.add_argument("--seed", type=int, default=0, help="evaluation seed key")

    p_verify = sub.add_parser("verify", help="run the oracle verification suite")
    p_verify.add_argument("--fast", action="store_true", help="reduced trial counts")

    p_plot = sub.add_parser("plot", help="render learning curves from metrics")
    p_plot.add_argument("--metrics", required=True)
    p_plot.add_argument("--out", required=True, help="output SVG path")
    return parser


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.finalize()

    resume_payload = None
    if args.resume:
        resume_payload = load_checkpoint(args.resume)
        saved = resume_payload["config"]
        ours = to_dict(cfg)
        for block in ("env", "model", "planner", "trainer"):
            if saved[block] != ours[block]:
                raise ConfigError(f"resume config mismatch in block {block!r}")
        if saved["seed"] != cfg.seed:
            raise ConfigError("resume seed mismatch")

    out = _resolve_out(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config_resolved.yaml")

    def checkpoint_fn(run) -> None:
        save_checkpoint(run.capture(), out / f"checkpoint_{run.env_steps:08d}.ckpt")

    with MetricsWriter(out / "metrics.csv") as metrics:
        summary, run = run_training(cfg, metrics=metrics, checkpoint_fn=checkpoint_fn,
                                    resume_payload=resume_payload)
    save_checkpoint(run.capture(), out / "checkpoint_final.ckpt")

    print(f"training finished: {summary['env_steps']} env steps, "
          f"{summary['train_iters']} updates, {summary['episodes']} episodes "
          f"({summary['stop_reason']})")
    if summary["final_eval"] is not None:
        ev = summary["final_eval"]
        print(f"final eval: success {ev.success_rate:.3f}, return "
              f"{ev.mean_return:.3f} +/- {ev.std_return:.3f} over {ev.episodes} episodes")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    cfg = from_dict(payload["config"]).finalize()
    params = init_params(cfg.seed, cfg.model)
    params.load_arrays(payload["params"])
    stats = evaluate_policy(params, cfg, args.episodes, args.seed)
    print(f"episodes: {stats.episodes}")
    print(f"success rate: {stats.success_rate:.4f}")
    print(f"mean return: {stats.mean_return:.4f} +/- {stats.std_return:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = run_verification(fast=args.fast)
    print(report.render())
    return EXIT_OK if report.passed else EXIT_VERIFY_FAILED


def cmd_plot(args) -> int:
    if not Path(args.metrics).exists():
        print(f"metrics file not found: {args.metrics}", file=sys.stderr)
        return EXIT_USAGE
    rows = read_metrics(args.metrics)
    svg = learning_curve_svg(rows, title=Path(args.metrics).stem)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")
    print(summary_table(rows))
    print(f"wrote {out}")
    return EXIT_OK


_COMMANDS = {"train": cmd_train, "eval": cmd_eval, "verify": cmd_verify, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC_FAULT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
