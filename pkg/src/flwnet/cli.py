"""Command-line entry point: ``flwnet {train,enhance,sweep,evaluate,gradcheck,info}``.

Exit codes: 0 success, 1 verification or training failure, 2 usage or
input error. ``FLW_THREADS`` caps torch's intra-op thread count. The
process keeps large freed blocks on the heap so repeated full-resolution
forward passes reuse memory instead of faulting in fresh pages.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import torch

from flwnet import imaging, metrics, verify
from flwnet._alloc import keep_large_blocks
from flwnet.checkpoint import CheckpointError, ModelCheckpoint, load_checkpoint
from flwnet.config import ConfigError, RunConfig, load_config
from flwnet.losses import LOSS_NAMES

__all__ = ["main", "build_parser", "sweep_values"]

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_MU = 0.4


class UsageError(Exception):
    """Bad flags or unusable input; maps to exit code 2."""


def _err(msg: str) -> None:
    print(f"flwnet: error: {msg}", file=sys.stderr)


def _mu(text: str) -> float:
    try:
        mu = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (math.isfinite(mu) and 0.0 < mu <= 1.0):
        raise argparse.ArgumentTypeError(f"mu must lie in (0, 1], got {text}")
    return mu


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _loss_flags(text: str) -> tuple[str, ...]:
    names = tuple(n.strip() for n in text.split(",") if n.strip())
    bad = [n for n in names if n not in LOSS_NAMES]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"unknown loss {', '.join(bad) or '(none)'}; choose from {','.join(LOSS_NAMES)}"
        )
    return names


def _existing_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"directory not found: {p}")
    return p


def _existing_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


def _load_model(path: str) -> ModelCheckpoint:
    try:
        return load_checkpoint(_existing_file(path))
    except CheckpointError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc


def _load_input(path: str):
    try:
        return imaging.load_image(_existing_file(path))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc


def sweep_values(start: float, stop: float, step: float) -> list[float]:
    """Inclusive ``start, start + step, ..., <= stop``, rounded to 6 decimals."""
    if step <= 0 or stop < start:
        return []
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 6) for i in range(n)]


# ---------------------------------------------------------------- subcommands


def effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.override(
        "train",
        seed=args.seed,
        max_steps=args.steps,
        batch_size=args.batch_size,
        crop=args.crop,
        learning_rate=args.lr,
        losses=args.loss_flags,
    )


def cmd_train(args) -> int:
    from flwnet import trainer

    cfg = effective_config(args)
    if args.show_config:
        print(cfg.to_json())
        return EXIT_OK
    if args.data_low is None or args.data_high is None or args.out is None:
        raise UsageError("train needs --data-low, --data-high and --out")
    low, high = _existing_dir(args.data_low), _existing_dir(args.data_high)
    try:
        manifest = imaging.DatasetManifest.from_dirs(low, high)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if len(manifest) == 0:
        raise UsageError(f"no paired images in {low} and {high}")
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")

    every = args.progress_every

    def progress(rec: dict) -> None:
        if every and (rec["step"] % every == 0 or rec["step"] == cfg.train.max_steps):
            print(f"step {rec['step']:>6}  loss {rec['total']:.5f}  {rec['wall_time']:8.1f}s",
                  file=sys.stderr)

    try:
        result = trainer.train(
            manifest, cfg.train, cfg.gfe, cfg.len, cfg.loss,
            checkpoint_path=out, log_path=log_path, on_step=progress,
        )
    except trainer.TrainingError as exc:
        _err(f"training failed: {exc}")
        return EXIT_FAIL
    print(f"wrote {out} after {result.checkpoint.step} steps; loss log {log_path}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    model = _load_model(args.model)
    img = _load_input(args.input)
    imaging.save_image(model.enhance(img, args.mu), args.output)
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = sweep_values(args.start, args.stop, args.step)
    if not values:
        raise UsageError(f"empty mu range: from {args.start} to {args.stop} step {args.step}")
    bad = [v for v in values if not 0.0 < v <= 1.0]
    if bad:
        raise UsageError(f"mu values outside (0, 1]: {bad}")
    model = _load_model(args.model)
    img = _load_input(args.input)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    entries = []
    for mu in values:
        out = model.enhance(img, mu)
        name = f"{stem}_mu{mu:.2f}.png"
        imaging.save_image(out, outdir / name)
        # measured on the saved 8-bit image
        entries.append({"mu": mu, "file": name, "mean_v": imaging.mean_v(imaging.to_bytes(out) / 255.0)})
    means = [e["mean_v"] for e in entries]
    summary = {
        "input": str(args.input),
        "outputs": entries,
        "non_decreasing": all(b >= a for a, b in zip(means, means[1:])),
    }
    text = json.dumps(summary, indent=2)
    (outdir / "sweep.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        mu = metrics.parse_mu_mode(args.mu_mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    low, high = _existing_dir(args.data_low), _existing_dir(args.data_high)
    manifest = imaging.DatasetManifest.from_dirs(low, high, check=False)
    if len(manifest) == 0:
        raise UsageError(f"no paired images in {low} and {high}")
    model = _load_model(args.model)
    report = metrics.evaluate_dataset(model, manifest, mu)
    print(report.to_table())
    Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    def show(res: verify.CheckResult) -> None:
        print(verify.format_results([res]), flush=True)

    results = verify.run_suite(args.precision, args.trials, args.seed, on_result=show)
    failed = [r.item for r in results if not r.passed]
    worst = max(r.worst for r in results)
    seconds = sum(r.seconds for r in results)
    print(f"{len(results)} items, {args.precision}-bit, worst {worst:.3e}, {seconds:.1f}s")
    if failed:
        _err(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_info(args) -> int:
    if args.model:
        model = _load_model(args.model)
    else:
        cfg = load_config(args.config)
        model = ModelCheckpoint.fresh(cfg.gfe, cfg.len)
    counts = model.param_counts()
    if args.json:
        print(json.dumps({**counts, "step": model.step}, indent=2))
    else:
        for key in ("gfe", "len", "total"):
            print(f"{key:<6}{counts[key]:>8}")
        print(f"{'step':<6}{model.step:>8}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flwnet", description="Low-light image enhancement with a target-brightness control."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on paired low/normal-light directories")
    p.add_argument("--data-low", help="directory of low-light inputs")
    p.add_argument("--data-high", help="directory of references with matching file names")
    p.add_argument("--config", help="JSON config with train/loss/gfe/len sections")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--log", help="loss log path (default: <out>.log.jsonl)")
    p.add_argument("--loss-flags", type=_loss_flags, help="comma-separated subset of " + ",".join(LOSS_NAMES))
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=_positive_int, help="max_steps")
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--crop", type=_positive_int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--progress-every", type=int, default=100, help="0 silences progress lines")
    p.add_argument("--show-config", action="store_true", help="print the effective config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mu", type=_mu, default=DEFAULT_MU, help="target mean V brightness in (0, 1]")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("sweep", help="enhance one image over a range of target brightness values")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--from", dest="start", type=float, default=0.1)
    p.add_argument("--to", dest="stop", type=float, default=0.9)
    p.add_argument("--step", type=float, default=0.1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="score a model on a paired test set")
    p.add_argument("--model", required=True)
    p.add_argument("--data-low", required=True)
    p.add_argument("--data-high", required=True)
    p.add_argument("--mu-mode", default=f"fixed:{DEFAULT_MU}", help="'ref' or 'fixed:<mu>'")
    p.add_argument("--report", default="eval_report.json", help="JSON report path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p.add_argument("--trials", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="print parameter counts")
    p.add_argument("--model", help="checkpoint (default: a fresh model)")
    p.add_argument("--config", help="config for the fresh model")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_info)
    return parser


def _apply_threads() -> None:
    raw = os.environ.get("FLW_THREADS")
    if raw is None or raw == "":
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FLW_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"FLW_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for bad flags
        return int(exc.code or 0)
    try:
        _apply_threads()
        keep_large_blocks()
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except Exception as exc:  # anything else is a failure of the command itself
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
