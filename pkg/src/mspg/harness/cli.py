"""Command line entry point: ``mspg {train,sample,eval,ablate,replay}``.

Exit status is 0 on success, 2 for usage or configuration errors and 3 when a
run fails at runtime (diverged round, unreadable checkpoint, I/O failure).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from ..apfl import RoundAborted
from . import plots
from .ablation import ABLATION_COLUMNS, PER_SEED_COLUMNS, run_grid
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, find_config, load, serialize, validate
from .data import IngestError, RingDataset
from .runner import (BALANCE_COLUMNS, METRICS_COLUMNS, SCHEDULE_COLUMNS, Run, csv_text, ensure_dir,
                     first_divergence, read_csv, write_csv)

log = logging.getLogger("mspg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="mspg", description="Multi-scale GAN trainer with adaptive feedback.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp, config_required=False):
        sp.add_argument("--config", required=config_required,
                        help="key = value config file, or the name of a packaged config (ring)")
        sp.add_argument("--seed", type=_u64)
        sp.add_argument("--rounds", type=_positive)
        sp.add_argument("--dataset", help="ring, shapes or dir:PATH")
        sp.add_argument("--no-balance", action="store_true")
        sp.add_argument("--no-apfl", action="store_true")
        sp.add_argument("--no-afe", action="store_true")

    t = sub.add_parser("train", help="train one configuration")
    run_flags(t)
    t.add_argument("--out", default="out", help="output directory")
    t.add_argument("--stop-after", type=_positive, help="stop (and checkpoint) after this round")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("sample", help="draw samples from a checkpoint's EMA generator")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=_positive, default=256)
    s.add_argument("--out", default="samples.csv", help=".csv for ring points, .npy for any")
    s.add_argument("--live", action="store_true", help="use live instead of EMA weights")

    e = sub.add_parser("eval", help="coverage / quality of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n", type=_positive, default=None)
    e.add_argument("--live", action="store_true")

    a = sub.add_parser("ablate", help="run the APFL x BALANCE x AFE grid")
    run_flags(a)
    a.add_argument("--seeds", type=_positive, default=3, help="seeds per cell (seed, seed+1, ...)")
    a.add_argument("--out", default="ablation")
    a.add_argument("--jobs", type=_positive, default=1)

    r = sub.add_parser("replay", help="re-run a schedule deterministically and log it")
    r.add_argument("--config")
    r.add_argument("--checkpoint")
    r.add_argument("--seed", type=_u64)
    r.add_argument("--rounds", type=_positive)
    r.add_argument("--out", default="schedule.csv")
    r.add_argument("--against", help="metrics CSV to compare the schedule columns with")
    return p


def config_from_args(args):
    cfg = load(find_config(args.config)) if args.config else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "rounds", None) is not None:
        over["rounds"] = args.rounds
    if getattr(args, "dataset", None):
        over["dataset"] = args.dataset
    if getattr(args, "no_balance", False):
        over["balance"] = False
    if getattr(args, "no_apfl", False):
        over["apfl"] = False
    if getattr(args, "no_afe", False):
        over["afe"] = False
    return validate(cfg.with_overrides(**over)) if over else cfg


def _figures(run, out):
    fig_dir = ensure_dir(os.path.join(out, "figures"))
    plots.training_curves(run.rows, os.path.join(fig_dir, "training_curves.png"))
    x = run.generate(use_ema=True)
    if isinstance(run.dataset, RingDataset):
        plots.ring_scatter(x, run.dataset, os.path.join(fig_dir, "ring_samples_ema.png"), "EMA generator")
        plots.ring_scatter(run.generate(), run.dataset, os.path.join(fig_dir, "ring_samples_live.png"),
                           "live generator")
    else:
        plots.image_grid(x[:32], os.path.join(fig_dir, "samples_ema.png"))


def _write_run_outputs(run, out, figures=True):
    write_csv(os.path.join(out, "metrics.csv"), METRICS_COLUMNS, run.rows)
    write_csv(os.path.join(out, "balance.csv"), BALANCE_COLUMNS, run.balance_rows)
    write_csv(os.path.join(out, "schedule.csv"), SCHEDULE_COLUMNS, run.schedule_rows)
    if figures and run.rows:
        _figures(run, out)


def cmd_train(args):
    if args.resume:
        if args.config or args.seed is not None or args.dataset:
            raise UsageError("--resume takes its configuration from the checkpoint")
        run = Run.from_checkpoint(args.resume)
        if args.rounds is not None and args.rounds != run.cfg.rounds:
            raise UsageError("--rounds must match the checkpointed run")
    else:
        run = Run(config_from_args(args))
    out = ensure_dir(args.out)
    with open(os.path.join(out, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(serialize(run.cfg))
    try:
        run.run(stop_after=args.stop_after)
    except RoundAborted:
        _write_run_outputs(run, out, figures=False)
        raise
    run.save_checkpoint(os.path.join(out, "checkpoint.mspc"))
    _write_run_outputs(run, out, figures=not args.no_figures)
    q, cov = run.last_quality
    print(f"round {run.state.round}/{run.cfg.rounds} quality {q:.4f} coverage {cov} -> {out}")
    return EXIT_OK


def cmd_sample(args):
    run = Run.from_checkpoint(args.checkpoint)
    z = np.random.default_rng(run.cfg.seed).standard_normal((args.n, run.cfg.latent_dim))
    x = run.generate(z=z, use_ema=not args.live)
    if args.out.endswith(".npy"):
        np.save(args.out, x)
    elif x.ndim == 2:
        np.savetxt(args.out, x, delimiter=",", header="x,y", comments="", fmt="%.9g")
    else:
        raise UsageError("image samples can only be written as .npy")
    print(f"wrote {len(x)} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    run = Run.from_checkpoint(args.checkpoint)
    res = run.final_evaluation(use_ema=not args.live, n=args.n)
    print(f"round {run.state.round}")
    for k in ("coverage", "hq_fraction", "quality"):
        print(f"{k} {res[k]:.6g}" if isinstance(res[k], float) else f"{k} {res[k]}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = config_from_args(args)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    summary, per_seed = run_grid(cfg, seeds, jobs=args.jobs)
    out = ensure_dir(args.out)
    write_csv(os.path.join(out, "ablation.csv"), ABLATION_COLUMNS, summary)
    write_csv(os.path.join(out, "ablation_seeds.csv"), PER_SEED_COLUMNS, per_seed)
    plots.ablation_bars(summary, os.path.join(ensure_dir(os.path.join(out, "figures")), "ablation.png"))
    sys.stdout.write(csv_text(ABLATION_COLUMNS, summary))
    return EXIT_OK


def cmd_replay(args):
    if bool(args.config) == bool(args.checkpoint):
        raise UsageError("replay needs exactly one of --config or --checkpoint")
    if args.checkpoint:
        cfg = Run.from_checkpoint(args.checkpoint).cfg
        if args.seed is not None and args.seed != cfg.seed:
            raise ConfigError(f"seed {args.seed} does not match the checkpoint's seed {cfg.seed}")
    else:
        cfg = load(find_config(args.config))
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
    if args.rounds is not None:
        cfg = cfg.with_overrides(rounds=args.rounds)
    run = Run(cfg)
    try:
        run.run()
    except RoundAborted as exc:
        log.warning("replay stopped: %s", exc)
    write_csv(args.out, SCHEDULE_COLUMNS, run.schedule_rows)
    print(f"wrote {len(run.schedule_rows)} schedule rows to {args.out}")
    if args.against:
        ref = read_csv(args.against)
        div = first_divergence(ref, run.schedule_rows)
        print("schedule identical" if div is None else f"first divergence at round {div}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "ablate": cmd_ablate,
            "replay": cmd_replay}


def _thread_cap():
    raw = os.environ.get("MSPG_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MSPG_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("MSPG_THREADS must be >= 0")
    return max(n, 1)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_thread_cap()):
            return COMMANDS[args.command](args)
    except (ConfigError, UsageError, IngestError) as exc:
        print(f"mspg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RoundAborted, CheckpointError, OSError, KeyError, ValueError) as exc:
        print(f"mspg {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
