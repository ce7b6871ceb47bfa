"""Command-line entry point: ``nwcrf {train,eval,infer,check,synth}``.

Exit codes: 0 success, 2 config or input error, 3 numeric failure,
4 checkpoint error, 5 failed property check.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checks
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import DepthSample, make_dataset, split_seeds, synth_scene, upsample_nearest
from .errors import (CheckpointCorruptError, CheckpointFormatError, ConfigError, ContractError,
                     NumericError, ShapeError)
from .metrics import MetricsReport, evaluate
from .model import DepthNet
from .netpbm import (DEPTH_SCALE, NetpbmError, read_depth_pgm, read_ppm, write_depth_pgm,
                     write_ppm)
from .train import build_splits, evaluate_dataset, net_from_checkpoint, train

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_CHECK = 0, 2, 3, 4, 5
CHECKPOINT_NAME = "checkpoint.nwcf"
THREADS_ENV = "NWCRF_THREADS"

log = logging.getLogger("nwcrf")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_net(path: str) -> tuple[DepthNet, object]:
    try:
        ckpt = load_checkpoint(path)
        return net_from_checkpoint(ckpt), ckpt
    except FileNotFoundError:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint not found: {path}") from None
    except (CheckpointFormatError, CheckpointCorruptError, ShapeError, KeyError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint {path}: {exc}") from None


# train

def cmd_train(args: argparse.Namespace) -> int:
    overrides = list(args.override)
    if args.steps is not None:
        overrides.insert(0, f"train.steps={args.steps}")
    if args.seed is not None:
        overrides.insert(0, f"seed={args.seed}")
    cfg = load_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    loss_rows = ["step,lr,loss"]

    def on_step(step: int, lr: float, loss: float) -> None:
        loss_rows.append(f"{step},{lr:.9g},{loss:.9g}")
        if args.verbose and (step % 50 == 0):
            print(f"step {step} lr {lr:.3g} loss {loss:.4f}", flush=True)

    def on_eval(step: int, report: MetricsReport) -> None:
        print(f"step {step} val abs_rel {report.abs_rel:.4f} rmse {report.rmse:.4f} "
              f"d1 {report.delta1:.4f}", flush=True)

    data = build_splits(cfg)
    result = train(cfg, on_step=on_step, on_eval=on_eval, data=data)
    if result.metrics:
        report = result.metrics[-1][1]
    else:
        report = evaluate_dataset(net_from_checkpoint(result.checkpoint), data[1],
                                  cfg.eval.cap, cfg.eval.min_depth)
    save_checkpoint(out / CHECKPOINT_NAME, result.checkpoint)
    (out / "loss.csv").write_text("\n".join(loss_rows) + "\n", encoding="utf-8")
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    print(f"wrote {out / CHECKPOINT_NAME}")
    return EXIT_OK


# eval

def read_index(directory: Path) -> list[DepthSample]:
    index = directory / "index.txt"
    if not index.is_file():
        raise CliError(EXIT_INPUT, f"no index.txt in {directory}")
    samples = []
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CliError(EXIT_INPUT, f"{index}:{lineno}: expected 'image<TAB>depth'")
        try:
            image = read_ppm(directory / parts[0])
            depth = read_depth_pgm(directory / parts[1])
            samples.append(DepthSample(image, depth, depth > 0))
        except (OSError, NetpbmError, ContractError) as exc:
            raise CliError(EXIT_INPUT, f"{index}:{lineno}: {exc}") from None
    return samples


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(EXIT_INPUT, f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def evaluate_samples(net: DepthNet, samples: list[DepthSample], cap: float, min_depth: float,
                     threads: int = 1) -> MetricsReport:
    """Mean per-sample metrics; results are merged in sample order."""
    def one(sample: DepthSample) -> MetricsReport:
        return evaluate(_predict_full(net, sample.image), sample, cap, min_depth)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(one, samples))
    else:
        reports = [one(s) for s in samples]
    return MetricsReport.mean(reports)


def cmd_eval(args: argparse.Namespace) -> int:
    net, ckpt = _load_net(args.checkpoint)
    cfg = ckpt.config
    if args.data is not None:
        samples = read_index(Path(args.data))
    else:
        tr, va = split_seeds(cfg.seed, cfg.data.train_size, cfg.data.val_size)
        samples = make_dataset(tr if args.split == "train" else va, cfg.data.height, cfg.data.width)
    if not samples:
        raise CliError(EXIT_INPUT, "dataset is empty")
    cap = cfg.eval.cap if args.cap is None else args.cap
    report = evaluate_samples(net, samples, cap, cfg.eval.min_depth, _threads())
    text = report.to_csv()
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


# infer

def _predict_full(net: DepthNet, image: np.ndarray) -> np.ndarray:
    """Depth at the input extents: pad symmetrically to a multiple of 32, predict, upsample, crop."""
    h, w = image.shape[:2]
    ph, pw = -h % 32, -w % 32
    top, left = ph // 2, pw // 2
    padded = np.pad(image, ((top, ph - top), (left, pw - left), (0, 0)))
    depth = upsample_nearest(net.predict(padded), 4)
    return depth[top:top + h, left:left + w]


def cmd_infer(args: argparse.Namespace) -> int:
    try:
        image = read_ppm(args.image)
    except (OSError, NetpbmError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read PPM {args.image}: {exc}") from None
    net, _ = _load_net(args.checkpoint)
    try:
        depth = _predict_full(net, image)
    except ShapeError as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint does not fit the image: {exc}") from None
    out = Path(args.out)
    write_depth_pgm(out, depth)
    scale_file = out.with_name(out.name + ".scale.txt")
    scale_file.write_text(f"units_per_meter = {DEPTH_SCALE:g}\n", encoding="utf-8")
    print(f"wrote {out} ({depth.shape[1]}x{depth.shape[0]}) and {scale_file}")
    return EXIT_OK


# check

def cmd_check(args: argparse.Namespace) -> int:
    h, w = args.grid
    results = checks.run_all(h, w, args.window, args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError(EXIT_CHECK, "failed properties: " + ", ".join(failed))
    return EXIT_OK


# synth

def cmd_synth(args: argparse.Namespace) -> int:
    if args.count < 1:
        raise CliError(EXIT_INPUT, "--count must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(args.count):
        sample = synth_scene(args.seed * 1_000_003 + i, args.height, args.width)
        image_name, depth_name = f"image_{i:05d}.ppm", f"depth_{i:05d}.pgm"
        write_ppm(out / image_name, sample.image)
        write_depth_pgm(out / depth_name, sample.depth)
        lines.append(f"{image_name}\t{depth_name}")
    (out / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nwcrf", description="Window CRF monocular depth toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--steps", type=int, help="shorthand for --override train.steps=N")
    p.add_argument("--seed", type=int, help="shorthand for --override seed=N")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override; later values win")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="directory with index.txt and PPM/PGM pairs")
    src.add_argument("--split", choices=("train", "val"), default="val",
                     help="synthetic split regenerated from the checkpoint config")
    p.add_argument("--cap", type=float, help="clamp depths to this range before metrics")
    p.add_argument("--out", help="also write the metrics CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict depth for one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="binary PPM (P6) input")
    p.add_argument("--out", required=True, help="16-bit PGM output, 256 units per meter")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("check", help="run the window CRF self-checks on a small grid")
    p.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"), default=(8, 8))
    p.add_argument("--window", type=int, default=8, help="window size N")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("synth", help="write a synthetic dataset as PPM/PGM pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointFormatError, CheckpointCorruptError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ContractError, ShapeError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
