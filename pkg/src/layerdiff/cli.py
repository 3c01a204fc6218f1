"""Command-line entry point: ``layerdiff <command> ...``.

Every command logs one JSON object per line on stdout. Exit codes: 0 success,
1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .composer import compose, parse_removal
from .conditioning import MaskSet
from .config import Config, ConfigError, DataConfig, toy_config
from .diffusion import LayerSet, make_schedule
from .metrics import ReportError, eval_report, write_report
from .rng import DRng
from .scenes import DatasetError, generate_dataset, load_png, read_dataset, read_sample, save_png, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def emit(record: dict, stream=None):
    stream = stream or sys.stdout
    stream.write(json.dumps(record, sort_keys=True, default=_default) + "\n")
    stream.flush()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path, size=None) -> Config:
    if path is None:
        return toy_config(size or 16)
    try:
        return Config.load(path)
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from None
    except (ConfigError, TypeError) as exc:
        raise DataError(f"invalid config: {exc}") from None


# -- commands --------------------------------------------------------------
def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be positive")
    if args.size % 4:
        raise UsageError(f"--size {args.size} must be divisible by 4 (patch size 2, two-level UNet)")
    if not 1 <= args.max_instances <= 4:
        raise UsageError("--max-instances must be in [1, 4]")
    dcfg = DataConfig(size=args.size, max_instances=args.max_instances)
    samples = generate_dataset(args.count, dcfg, args.seed)
    try:
        write_dataset(samples, args.out, config=vars(dcfg), seed=args.seed)
    except OSError as exc:
        raise DataError(f"cannot write dataset: {exc}") from None
    emit({"event": "gen-data", "count": args.count, "size": args.size, "seed": args.seed, "out": args.out})
    return EXIT_OK


def _read_data(path):
    try:
        return read_dataset(path)
    except (DatasetError, OSError) as exc:
        raise DataError(str(exc)) from None


def cmd_train(args) -> int:
    from .training import CheckpointError, train

    samples = _read_data(args.data)
    size = samples[0].size
    cfg = _load_config(args.config, size)
    if cfg.model.image_size != size or cfg.data.size != size:
        raise DataError(f"dataset images are {size}px but the config expects {cfg.model.image_size}px")
    steps = cfg.training.steps if args.steps is None else args.steps
    if steps < 0:
        raise UsageError("--steps must be nonnegative")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    emit({"event": "config", "config": cfg.to_dict(), "seed": args.seed, "steps": steps})
    try:
        train(samples, cfg, seed=args.seed, steps=steps, out_dir=args.out, resume=args.resume, log=emit)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None
    emit({"event": "done", "steps": steps})
    return EXIT_OK


def _load_ckpt(path):
    from .training import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None


def save_layer_set(layers: LayerSet, out_dir, meta: dict):
    os.makedirs(out_dir, exist_ok=True)
    for k, img in enumerate(layers.layers, start=1):
        save_png(os.path.join(out_dir, f"layer_{k}.png"), img)
        save_png(os.path.join(out_dir, f"mask_{k}.png"), layers.masks[k])
    save_png(os.path.join(out_dir, "background.png"), layers.background)
    save_png(os.path.join(out_dir, "full.png"), compose(layers, set()))
    with open(os.path.join(out_dir, "layers.json"), "w") as fh:
        json.dump({"count": len(layers), "depth_order": [int(k) for k in layers.masks.depth_order], **meta},
                  fh, indent=2, sort_keys=True)


def load_layer_set(layers_dir) -> LayerSet:
    path = os.path.join(layers_dir, "layers.json")
    if not os.path.exists(path):
        raise DataError(f"missing layers.json in {layers_dir}")
    try:
        with open(path) as fh:
            meta = json.load(fh)
        n, depth = int(meta["count"]), [int(k) for k in meta["depth_order"]]
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"corrupt layers.json: {exc}") from None

    def need(name):
        p = os.path.join(layers_dir, name)
        if not os.path.exists(p):
            raise DataError(f"missing layer file: {name}")
        return load_png(p)

    layers = [need(f"layer_{k}.png") for k in range(1, n + 1)]
    masks = np.stack([need(f"mask_{k}.png") for k in range(1, n + 1)])
    return LayerSet(layers, need("background.png"), MaskSet((masks > 0.5).astype(np.float64), depth))


def cmd_erase(args) -> int:
    from .composer import erase

    ck = _load_ckpt(args.ckpt)
    try:
        sample = read_sample(args.sample, args.index)
    except (DatasetError, OSError) as exc:
        raise DataError(str(exc)) from None
    if sample.size != ck.config.model.image_size:
        raise DataError(f"sample is {sample.size}px but the checkpoint expects {ck.config.model.image_size}px")
    try:
        removal = parse_removal(args.remove, sample.n_instances)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    d = ck.config.diffusion
    schedule = make_schedule(d.timesteps, d.beta_min, d.beta_max)
    n_steps = d.sample_steps if args.steps is None else args.steps
    image, layers = erase(sample, removal, ck.model, schedule, DRng(args.seed).spawn("erase"), n_steps)
    os.makedirs(args.out, exist_ok=True)
    save_png(os.path.join(args.out, "result.png"), image)
    save_layer_set(layers, args.out, {"seed": args.seed, "removal": sorted(removal), "ddim_steps": n_steps})
    emit({"event": "erase", "instances": sample.n_instances, "removed": sorted(removal), "out": args.out})
    return EXIT_OK


def cmd_compose(args) -> int:
    layers = load_layer_set(args.layers_dir)
    try:
        removal = parse_removal(args.remove, len(layers))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_png(args.out, compose(layers, removal))
    emit({"event": "compose", "removed": sorted(removal), "out": args.out})
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        report = eval_report(args.pred, args.gt, args.masks)
    except (ReportError, ValueError) as exc:
        raise DataError(str(exc)) from None
    if args.out:
        write_report(report, args.out)
    emit({"event": "eval", "samples": len(report["per_sample"]), **report["aggregate"]})
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import all_passed, run_selfcheck

    results = run_selfcheck(log=lambda rec: emit({k: v for k, v in rec.items() if k != "rows"}))
    ok = all_passed(results)
    emit({"event": "selfcheck-summary", "passed": ok, "suites": {k: v["passed"] for k, v in results.items()}})
    return EXIT_OK if ok else EXIT_VERIFY


# -- parser ----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="layerdiff", description="Layered diffusion for multi-person erasing (toy scale).")
    p.add_argument("--dump-config", nargs="?", const="default", choices=["default", "toy"],
                   help="print the embedded default (or toy) configuration and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-instances", type=int, default=3)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON config (default: toy config at the dataset's size)")
    t.add_argument("--out", help="checkpoint directory")
    t.add_argument("--steps", type=int, help="total steps (default: training.steps)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("erase", help="generate layers for one sample and drop instances")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--sample", required=True, help="dataset directory holding the sample")
    e.add_argument("--index", type=int, default=0, help="sample index within the dataset")
    e.add_argument("--remove", default="all", help='comma-separated 1-based indices, "all" or ""')
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int, help="DDIM steps (default: diffusion.sample_steps)")
    e.set_defaults(func=cmd_erase)

    c = sub.add_parser("compose", help="recompose a saved layer set")
    c.add_argument("--layers-dir", required=True)
    c.add_argument("--remove", default="")
    c.add_argument("--out", required=True, help="output PNG path")
    c.set_defaults(func=cmd_compose)

    v = sub.add_parser("eval", help="PSNR/SSIM/masked-MSE report over aligned PNG directories")
    v.add_argument("--pred", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--masks")
    v.add_argument("--out", help="JSON report path")
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("selfcheck", help="run the built-in verification suites")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.dump_config:
            cfg = toy_config() if args.dump_config == "toy" else Config()
            sys.stdout.write(cfg.to_json() + "\n")
            return EXIT_OK
        if not args.command:
            raise UsageError("a command is required (gen-data, train, erase, compose, eval, selfcheck)")
        return args.func(args)
    except UsageError as exc:
        emit({"event": "error", "kind": "usage", "message": str(exc)})
        return EXIT_USAGE
    except DataError as exc:
        emit({"event": "error", "kind": "data", "message": str(exc)})
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
