"""Command-line entry point: ``vsflab <command> [options]``.

Every command that writes files puts them in ``<out>/<run-id>/`` where the
run id hashes the effective configuration, the command, its flags and the
contents of its input files, so identical invocations land in (and
reproduce) the same directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, load_config, parse_seeds
from .data import dataset_arrays, make_dataset, tokenize, write_ppm
from .evaluation import (SWEEP_HEADER, SweepResult, attn_cost, dump_attn_maps, load_record,
                         pareto_frontier, save_record, score_records, sweep)
from .guidance import Variant
from .model import (ToyModel, TrainingDiverged, euler_sample_batch, latent_stats, load_checkpoint,
                    save_checkpoint, train)

__all__ = ["build_parser", "run_command", "main", "train_from_config"]

_GUIDANCE_FLAGS = (("alpha", "alpha"), ("beta", "beta"), ("phi", "phi"), ("tau", "tau"),
                   ("blend", "blend"), ("lambda", "lambda_"))


def _config_default(key):
    return Config().get(key)


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="vsflab", formatter_class=fmt,
                                     description="Toy rectified-flow model with negative-prompt guidance.")
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--out", default=None,
                        help=f"output root (config paths.out, default {_config_default('paths.out')!r})")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", formatter_class=fmt, help="train the toy model")
    p.add_argument("--steps", type=int, default=None,
                   help=f"optimizer steps (config train.steps, default {_config_default('train.steps')})")
    p.add_argument("--lr", type=float, default=None,
                   help=f"peak learning rate (config train.lr, default {_config_default('train.lr')})")
    p.add_argument("--batch", type=int, default=None,
                   help=f"batch size (config train.batch, default {_config_default('train.batch')})")
    p.add_argument("--seed", type=int, default=None,
                   help=f"training seed (config train.seed, default {_config_default('train.seed')})")
    p.add_argument("--dataset-size", type=int, default=None,
                   help=f"synthetic images (config train.dataset_size, "
                        f"default {_config_default('train.dataset_size')})")
    p.add_argument("--dump-dataset", type=int, default=0,
                   help="also write the first N training images as PPM files")

    p = sub.add_parser("sample", formatter_class=fmt, help="sample one image")
    _add_checkpoint(p)
    p.add_argument("--variant", choices=[v.value for v in Variant], default="none", help="guidance variant")
    p.add_argument("--pos", required=True, help="positive prompt")
    p.add_argument("--neg", default=None, help="negative prompt (required for guided variants)")
    for flag, _ in _GUIDANCE_FLAGS:
        p.add_argument(f"--{flag}", type=float, default=None,
                       help=f"guidance {flag} (config guidance.<variant>.{flag})")
    p.add_argument("--steps", type=int, default=None,
                   help=f"Euler steps (config sampling.steps, default {_config_default('sampling.steps')})")
    p.add_argument("--seed", type=int, default=0, help="noise seed")

    p = sub.add_parser("sweep", formatter_class=fmt, help="score a hyperparameter sweep")
    _add_checkpoint(p)
    p.add_argument("--variant", choices=[v.value for v in Variant if v.needs_negative], required=True,
                   help="guidance variant")
    p.add_argument("--runs", type=int, default=20, help="number of hyperparameter settings")
    p.add_argument("--seeds", default=None,
                   help=f"noise seeds, e.g. 0-33 (config eval.seeds, default {_config_default('eval.seeds')!r})")
    p.add_argument("--sampler-seed", type=int, default=None,
                   help=f"seed of the hyperparameter draws (config eval.sampler_seed, "
                        f"default {_config_default('eval.sampler_seed')})")
    p.add_argument("--steps", type=int, default=None,
                   help=f"Euler steps (config sampling.steps, default {_config_default('sampling.steps')})")
    p.add_argument("--jobs", type=int, default=None,
                   help=f"parallel workers (config eval.jobs, default {_config_default('eval.jobs')})")

    p = sub.add_parser("frontier", formatter_class=fmt, help="extract the critical points of a sweep")
    p.add_argument("--in", dest="input", required=True, help="sweep CSV")
    p.add_argument("--y", choices=("pos", "quality"), default="pos", help="trade-off axis")

    p = sub.add_parser("attnmap", formatter_class=fmt, help="dump negative-token attention maps")
    p.add_argument("--record", required=True, help="run directory written by 'sample'")
    p.add_argument("--scale", type=int, default=8, help="pixel upscaling of the PGM maps")

    p = sub.add_parser("cost", formatter_class=fmt, help="attention cost per sampling step")
    p.add_argument("--variant", choices=[v.value for v in Variant], required=True, help="guidance variant")
    p.add_argument("--ni", type=int, required=True, help="image tokens")
    p.add_argument("--np", dest="n_pos", type=int, required=True, help="positive prompt tokens")
    p.add_argument("--nn", dest="n_neg", type=int, default=0, help="negative prompt tokens")
    p.add_argument("--dim", type=int, default=None,
                   help=f"model width (config model.dim, default {_config_default('model.dim')})")
    p.add_argument("--layers", type=int, default=None,
                   help=f"blocks (config model.layers, default {_config_default('model.layers')})")
    return parser


def _add_checkpoint(p):
    p.add_argument("--checkpoint", default=None, help="model checkpoint (config paths.checkpoint)")


def _override(config, pairs):
    for key, value in pairs:
        if value is not None:
            config = config.set(key, value)
    return config


def _run_dir(config, out, *extra):
    path = Path(out if out is not None else config.paths.out) / config.digest(*extra)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _record_dir(path):
    path = Path(path)
    return path.parent if path.is_file() else path


def _model(config, args):
    path = args.checkpoint or config.paths.checkpoint
    if not path:
        raise ConfigError("no checkpoint given (use --checkpoint or paths.checkpoint)")
    return load_checkpoint(path), path


def train_from_config(config, callback=None):
    """Build the dataset and train a fresh model as ``config`` describes.

    Returns ``(model, loss_curve, pixels)``.
    """
    tc, mc = config.train, config.model
    pixels, ids = dataset_arrays(make_dataset(tc.dataset_size, tc.dataset_seed))
    mean, std = latent_stats(pixels)
    model = ToyModel.initialize(seed=mc.seed, dim=mc.dim, heads=mc.heads, layers=mc.layers,
                                patch=mc.patch, mlp_ratio=mc.mlp_ratio, data_mean=mean, data_std=std)
    curve = train(model, pixels, ids, steps=tc.steps, lr=tc.lr, seed=tc.seed, batch_size=tc.batch,
                  uncond_prob=tc.uncond_prob, warmup=min(tc.warmup, tc.steps), ema=tc.ema, callback=callback)
    return model, curve, pixels


def _cmd_train(config, args, out):
    config = _override(config, [("train.steps", args.steps), ("train.lr", args.lr), ("train.batch", args.batch),
                                ("train.seed", args.seed), ("train.dataset_size", args.dataset_size)])
    run = _run_dir(config, out, "train")
    tc = config.train
    model, curve, pixels = train_from_config(config)
    save_checkpoint(run / "model.vsft", model)
    if args.dump_dataset:
        (run / "dataset").mkdir(exist_ok=True)
        for i in range(min(args.dump_dataset, len(pixels))):
            write_ppm(run / "dataset" / f"{i:05d}.ppm", pixels[i], scale=4)
    with open(run / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss"))
        w.writerows((i, repr(float(v))) for i, v in enumerate(curve))
    (run / "config.txt").write_text(config.dump())
    tail = float(np.mean(curve[-min(100, len(curve)):])) if len(curve) else float("nan")
    print(f"trained {tc.steps} steps, final loss {tail:.4f}")
    print(run / "model.vsft")
    return 0


def _cmd_sample(config, args, out, parser):
    variant = Variant(args.variant)
    if variant.needs_negative and args.neg is None:
        parser.error(f"--neg is required for --variant {variant.value}")
    for flag, attr in _GUIDANCE_FLAGS:
        value = getattr(args, attr if attr != "lambda_" else "lambda")
        if value is not None and variant is not Variant.NONE:
            config = config.set(f"guidance.{variant.value}.{flag}", value)
    config = _override(config, [("sampling.steps", args.steps)])
    spec = config.guidance[variant]
    model, ckpt = _model(config, args)
    pos = tokenize(args.pos)
    neg = tokenize(args.neg) if args.neg is not None else None
    run = _run_dir(config, out, "sample", _file_digest(ckpt), variant.value, pos.text,
                   None if neg is None else neg.text, args.seed)
    _, records = euler_sample_batch(model, pos, neg, spec, config.sampling.steps, (args.seed,))
    record = score_records(records)[0]
    save_record(record, run)
    print(f"{variant.value} pos={record.positive} neg={record.negative} quality={record.quality:.4f}")
    print(run)
    return 0


def _cmd_sweep(config, args, out):
    config = _override(config, [("eval.seeds", args.seeds), ("eval.sampler_seed", args.sampler_seed),
                                ("sampling.steps", args.steps), ("eval.jobs", args.jobs)])
    model, ckpt = _model(config, args)
    ec = config.eval
    prompts = [(p.strip(), ec.neg) for p in ec.pos.split(";") if p.strip()]
    run = _run_dir(config, out, "sweep", _file_digest(ckpt), args.variant, args.runs)
    result = sweep(model, prompts, Variant(args.variant), args.runs, parse_seeds(ec.seeds),
                   steps=config.sampling.steps, sampler_seed=ec.sampler_seed, jobs=ec.jobs,
                   base=config.guidance[Variant(args.variant)])
    result.to_csv(run / "sweep.csv")
    print(f"{len(result)} runs")
    print(run / "sweep.csv")
    return 0


def _cmd_frontier(config, args, out):
    rows = SweepResult.from_csv(args.input).rows
    front = pareto_frontier(rows, y_key=args.y)
    run = _run_dir(config, out, "frontier", _file_digest(args.input), args.y)
    SweepResult(front).to_csv(run / "frontier.csv")
    print(",".join(SWEEP_HEADER))
    for row in front:
        print(",".join(str(v) for v in row.csv_fields()))
    print(run / "frontier.csv")
    return 0


def _cmd_attnmap(config, args, out):
    record = load_record(args.record)
    run = _run_dir(config, out, "attnmap", record.run_id, _file_digest(_record_dir(args.record) / "image.npy"))
    written = dump_attn_maps(record, run, scale=args.scale)
    print(f"{len(written) - 1} maps")
    print(run)
    return 0


def _cmd_cost(config, args):
    config = _override(config, [("model.dim", args.dim), ("model.layers", args.layers)])
    dim, layers = config.model.dim, config.model.layers
    macs, forwards = attn_cost(args.variant, args.ni, args.n_pos, args.n_neg, dim, layers=layers)
    base, base_fwd = attn_cost(Variant.NONE, args.ni, args.n_pos, args.n_neg, dim, layers=layers)
    print(f"variant={args.variant} forwards={forwards} attn_macs={macs} "
          f"forward_ratio={forwards / base_fwd:.1f} attn_ratio={macs / base:.3f}")
    return 0


def run_command(argv=None):
    """Run one command; returns the exit status (usage errors raise SystemExit(2))."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if args.command == "train":
            return _cmd_train(config, args, args.out)
        if args.command == "sample":
            return _cmd_sample(config, args, args.out, parser)
        if args.command == "sweep":
            return _cmd_sweep(config, args, args.out)
        if args.command == "frontier":
            return _cmd_frontier(config, args, args.out)
        if args.command == "attnmap":
            return _cmd_attnmap(config, args, args.out)
        return _cmd_cost(config, args)
    except (ConfigError, ValueError, OSError, TrainingDiverged) as exc:
        print(f"vsflab: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None):
    sys.exit(run_command(argv))


if __name__ == "__main__":
    main()
