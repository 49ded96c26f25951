"""Command-line entry point.

Subcommands: synth, pairs, train, eval, sr, bench, verify. Exit codes:
0 success, 1 verification failure, 2 usage error, 3 I/O or corrupt file.
Every run prints its fully resolved configuration; flags override values
from an optional key=value config file.
"""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import verify as verify_mod
from .attention import AttentionConfig
from .data import (
    CorruptFileError,
    HsiCube,
    PairSet,
    SynthSpec,
    bicubic_resize,
    make_pairs,
    read_cube,
    synthesize,
    write_cube,
)
from .metrics import CSV_HEADER, evaluate_metrics, mean_report
from .model import (
    ConfigMismatchError,
    ModelConfig,
    build_model,
    forward,
    parse_schedule,
)
from .tensor import CorruptTensorError
from .train import (
    TrainConfig,
    evaluate,
    history_csv,
    load_train_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_USAGE = 2
EXIT_IO = 3


class UsageError(ValueError):
    pass


def _read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CorruptFileError(f"cannot read config file {path}: {exc}") from exc
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line is not key=value: {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _subparser_for(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise UsageError(f"no subcommand parser for {command!r}")


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if not getattr(args, "config", None):
        return
    file_vals = _read_config_file(args.config)
    sub = _subparser_for(parser, args.command)
    defaults = {a.dest: a.default for a in sub._actions}
    for key, val in file_vals.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"unknown config key {key!r}")
        # explicit flags beat file values; file values beat defaults
        if getattr(args, dest) == defaults.get(dest):
            cur = defaults.get(dest)
            if isinstance(cur, bool):
                setattr(args, dest, bool(int(val)))
            elif isinstance(cur, int):
                setattr(args, dest, int(val))
            elif isinstance(cur, float):
                setattr(args, dest, float(val))
            else:
                setattr(args, dest, val)


def _print_resolved(args: argparse.Namespace) -> None:
    print("resolved config:")
    for k in sorted(vars(args)):
        if k not in ("func",):
            print(f"  {k}={getattr(args, k)}")


def _model_config(args: argparse.Namespace, bands: int) -> ModelConfig:
    att = AttentionConfig(
        sigma=args.sigma,
        order=args.order,
        mode=args.mode,
        normalize=args.normalize,
        heads=args.heads,
    )
    return ModelConfig(
        bands=bands,
        channels=args.channels,
        scale=args.scale,
        stage_schedule=parse_schedule(args.stages),
        heads=args.heads,
        attention=att,
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scale", type=int, default=2, help="super-resolution factor")
    p.add_argument("--channels", type=int, default=32, help="feature channel width C")
    p.add_argument("--stages", default="2,1/2,2,1/2,2",
                   help="comma-separated per-stage rescale factors (powers of 2)")
    p.add_argument("--order", type=int, default=1, help="kernel series truncation degree")
    p.add_argument("--mode", choices=["exact", "elementwise"], default="elementwise")
    p.add_argument("--normalize", type=int, default=1,
                   help="row-normalize attention output (0/1)")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--sigma", type=float, default=1.0, help="kernel temperature")


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec(seed=args.seed, endmembers=args.endmembers, bands=args.bands,
                     height=args.size, width=args.size,
                     spectral_smoothness=args.smoothness,
                     spatial_freqs=args.freqs, min_cycles=args.min_cycles,
                     max_cycles=args.max_cycles, contrast=args.contrast)
    cube = synthesize(spec)
    write_cube(cube, args.out)
    print(f"wrote {cube.bands}x{cube.height}x{cube.width} cube to {args.out}")
    return EXIT_OK


def _pairs_dir_write(pairs: PairSet, out: Path, patch: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "meta.txt").write_text(
        f"scale={pairs.scale}\npatch={patch}\n"
        f"train={len(pairs.train)}\ntest={len(pairs.test)}\n")
    for split, items in (("train", pairs.train), ("test", pairs.test)):
        d = out / split
        d.mkdir(exist_ok=True)
        for i, (lr, hr) in enumerate(items):
            write_cube(lr, d / f"pair_{i:04d}_lr.hsi1")
            write_cube(hr, d / f"pair_{i:04d}_hr.hsi1")


def load_pairs_dir(path) -> PairSet:
    root = Path(path)
    meta = _read_config_file(root / "meta.txt")
    pairs = PairSet(scale=int(meta["scale"]))
    for split, target in (("train", pairs.train), ("test", pairs.test)):
        i = 0
        while (root / split / f"pair_{i:04d}_lr.hsi1").exists():
            lr = read_cube(root / split / f"pair_{i:04d}_lr.hsi1")
            hr = read_cube(root / split / f"pair_{i:04d}_hr.hsi1")
            target.append((lr, hr))
            i += 1
    pairs.validate()
    return pairs


def cmd_pairs(args) -> int:
    cube = read_cube(args.cube)
    pairs = make_pairs([cube], args.scale, args.patch, test_every=args.test_every)
    _pairs_dir_write(pairs, Path(args.out), args.patch)
    print(f"wrote {len(pairs.train)} train / {len(pairs.test)} test pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    pairs = load_pairs_dir(args.pairs)
    if not pairs.train:
        raise UsageError("pair set has no training pairs")
    bands = pairs.train[0][0].bands
    if args.scale != pairs.scale:
        raise UsageError(f"--scale {args.scale} but pair set has scale {pairs.scale}")
    mcfg = _model_config(args, bands)
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch, lr_init=args.lr_init,
                       lr_min=args.lr_min, seed=args.seed,
                       checkpoint_interval=args.checkpoint_interval)
    if args.resume:
        _, store, adam, start, history = load_train_checkpoint(args.resume, mcfg)
        print(f"resuming at step {start}")
    else:
        store = build_model(mcfg, args.seed)
        adam, start, history = None, 0, None
    history = train(store, mcfg, pairs, tcfg, adam=adam, start_step=start,
                    history=history, checkpoint_path=args.out)
    Path(args.loss_csv).write_text(history_csv(history))
    print(f"trained {tcfg.steps} steps; checkpoint {args.out}, losses {args.loss_csv}")
    print(f"first loss {history[0][2]:.6f}, final loss {history[-1][2]:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pairs = load_pairs_dir(args.pairs)
    cfg, store, _, _, _ = load_train_checkpoint(args.checkpoint)
    model_rep, bic_rep = evaluate(store, cfg, pairs, split=args.split)
    rows = ["kind," + CSV_HEADER,
            "model," + model_rep.as_csv_row(),
            "bicubic," + bic_rep.as_csv_row()]
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def _reload_cfg(path):
    from .model import load_checkpoint
    return load_checkpoint(path)


def cmd_sr(args) -> int:
    cube = read_cube(args.cube)
    cfg, store, _ = _reload_cfg(args.checkpoint)
    if cube.bands != cfg.bands:
        raise UsageError(
            f"input cube has {cube.bands} bands but checkpoint expects {cfg.bands}")
    out = forward(cube, store, cfg, clamp=True)
    write_cube(out, args.out)
    print(f"wrote {out.bands}x{out.height}x{out.width} cube to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    cfg = AttentionConfig(order=args.order, mode=args.mode, heads=args.heads)
    report = bench_mod.run_scaling(sizes, channels=args.channels, cfg=cfg,
                                   repeats=args.repeats, measure=not args.no_measure)
    print(report.as_text())
    if args.out:
        Path(args.out).write_text(report.as_csv())
    return EXIT_OK


def cmd_verify(args) -> int:
    ok = verify_mod.run_all(verbose=True)
    print("verification " + ("PASSED" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_VERIFY_FAIL


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hsisr",
        description="Kernelized-attention hyperspectral super-resolution toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic hyperspectral cube")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bands", type=int, default=31)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--endmembers", type=int, default=4)
    p.add_argument("--smoothness", type=float, default=4.0)
    p.add_argument("--freqs", type=int, default=6)
    p.add_argument("--min-cycles", type=float, default=0.0)
    p.add_argument("--max-cycles", type=float, default=8.0)
    p.add_argument("--contrast", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pairs", help="tile a cube into LR/HR training pairs")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--cube", required=True)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--test-every", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("train", help="train on a pair directory")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--pairs", required=True)
    _add_model_flags(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--lr-init", type=float, default=1e-4)
    p.add_argument("--lr-min", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--resume", help="training checkpoint to resume from")
    p.add_argument("--loss-csv", default="loss.csv")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against bicubic")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sr", help="super-resolve one cube with a checkpoint")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("bench", help="flop counts and latency scaling")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--sizes", default="256,1024,4096,16384")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--mode", choices=["exact", "elementwise"], default="elementwise")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--no-measure", action="store_true", help="counts only, no timing")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run the full property suite")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        if hasattr(args, "config"):
            _apply_config_file(args, parser)
        if hasattr(args, "normalize"):
            args.normalize = bool(args.normalize)
        _print_resolved(args)
        return args.func(args)
    except (CorruptFileError, CorruptTensorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigMismatchError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
