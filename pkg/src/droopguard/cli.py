"""Command-line entry point.

Subcommands: train, eval, plotdata, validate-feeder, show-config.
Exit codes: 0 success, 1 usage error, 2 config/data error, 3 numerical
failure. Every run directory receives a manifest recording the command, the
resolved inputs and their hashes, and the seed, so deterministic runs can be
reproduced byte for byte.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .env import EpisodeAborted, GridEnv
from .feeder import FeederError, PowerFlowError, load_feeder
from .scenario import ConfigError, config_to_text, load_config, preset_path, resolve_feeder_path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, config_source, config, seed, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feeder = resolve_feeder_path(config)
    try:
        cfg_path = Path(config_source)
        if not cfg_path.exists():
            cfg_path = preset_path(str(config_source))
    except ConfigError:
        cfg_path = None
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": str(config_source),
        "seed": seed,
        "artifacts": {
            "feeder": {"path": str(feeder), "sha256": _sha256(feeder)},
        },
        "out_dir": str(out_dir),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if cfg_path is not None:
        manifest["artifacts"]["config"] = {"path": str(cfg_path), "sha256": _sha256(cfg_path)}
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def _finish_manifest(out_dir):
    p = Path(out_dir) / "manifest.json"
    manifest = json.loads(p.read_text())
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    p.write_text(json.dumps(manifest, indent=2) + "\n")


def _default_out(kind):
    base = os.environ.get("DROOPGUARD_OUT_DIR", "runs")
    return str(Path(base) / f"{kind}-{time.strftime('%Y%m%d-%H%M%S')}")


def _threads(args_threads):
    if args_threads is not None:
        return args_threads
    return int(os.environ.get("DROOPGUARD_THREADS", "1"))


# ---------------------------------------------------------------- subcommands
def cmd_train(args):
    from .agent.train import Trainer

    overrides = {}
    if args.seed is not None:
        overrides["rng_seed"] = str(args.seed)
    config = load_config(args.config, overrides)
    out_dir = Path(args.out or _default_out("train"))
    threads = 1 if args.deterministic else _threads(args.threads)
    _write_manifest(out_dir, "train", args.config, config, config.rng_seed,
                    {"deterministic": bool(args.deterministic), "threads": threads})

    if args.resume and (out_dir / "checkpoint.npz").exists():
        trainer = Trainer.from_checkpoint(out_dir / "checkpoint.npz", config)
        trainer.threads = threads
        print(f"resuming from iteration {trainer.iteration}")
    else:
        trainer = Trainer(config, threads=threads)

    def progress(rec):
        print(
            "iter %4d  return %8.2f  surrogate %+.4f  vloss %.4f  clip %.3f  ent %.3f"
            % (rec["iteration"], rec["mean_return"], rec["surrogate"],
               rec["value_loss"], rec["clip_fraction"], rec["entropy"]),
            flush=True,
        )

    trainer.train(out_dir, iterations=args.iterations, progress=progress)
    _finish_manifest(out_dir)
    print(f"checkpoint and training curve written to {out_dir}")
    return EXIT_OK


def cmd_eval(args):
    from .agent.train import Trainer
    from .runner import (
        greedy_policy,
        null_policy,
        run_episode,
        sampling_policy,
        write_bus_log_csv,
        write_episode_csv,
    )
    from .scenario import STREAM_SAMPLING, rng_for

    overrides = {}
    if args.seed is not None:
        overrides["rng_seed"] = str(args.seed)
    config = load_config(args.preset, overrides)
    out_dir = Path(args.out or _default_out("eval"))
    env = GridEnv(config)

    if args.null_policy:
        policy = null_policy(env.space)
        ckpt_info = {"policy": "null"}
    else:
        if not args.checkpoint:
            print("error: --checkpoint required unless --null-policy", file=sys.stderr)
            return EXIT_USAGE
        trainer = Trainer.from_checkpoint(args.checkpoint, config)
        if args.stochastic:
            policy = sampling_policy(trainer, env.space,
                                     rng_for(config.rng_seed, STREAM_SAMPLING, 999))
        else:
            policy = greedy_policy(trainer, env.space)
        ckpt_info = {"policy": "checkpoint", "checkpoint": str(args.checkpoint),
                     "checkpoint_sha256": _sha256(args.checkpoint)}

    _write_manifest(out_dir, "eval", args.preset, config, config.rng_seed, ckpt_info)
    env, summary = run_episode(
        config, policy, config.rng_seed, per_unit=not args.aggregated, env=env
    )
    bus_idx = None
    if args.bus is not None:
        if args.bus not in env.model.index_of:
            print(f"error: bus {args.bus!r} not in feeder", file=sys.stderr)
            return EXIT_CONFIG
        bus_idx = env.model.index_of[args.bus]
    write_episode_csv(out_dir / "episode.csv", env, bus_idx)
    write_bus_log_csv(out_dir / "log_buses.csv", env)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _finish_manifest(out_dir)
    print(json.dumps(summary, indent=2))
    print(f"episode data written to {out_dir}")
    return EXIT_OK


PLOT_FILES = {
    "voltage.csv": ("step", "v"),
    "oscillation.csv": ("step", "y"),
    "action.csv": ("step", "translation", "slope", "translation_adv", "slope_adv"),
    "reward.csv": ("step", "component_y", "component_oa", "component_init",
                   "component_pset_pmax", "total_reward"),
}


def cmd_plotdata(args):
    src = Path(args.episode)
    if not src.exists():
        print(f"error: {src} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    lines = src.read_text().strip().splitlines()
    if len(lines) < 2:
        print(f"error: {src} has no data rows", file=sys.stderr)
        return EXIT_CONFIG
    header = lines[0].split(",")
    required = {c for cols in PLOT_FILES.values() for c in cols}
    missing = required - set(header)
    if missing:
        print(f"error: episode CSV missing columns: {sorted(missing)}", file=sys.stderr)
        return EXIT_CONFIG
    idx = {c: header.index(c) for c in header}
    rows = [ln.split(",") for ln in lines[1:]]
    rows = rows[:: max(1, args.stride)]

    out_dir = Path(args.out or src.parent / "plotdata")
    out_dir.mkdir(parents=True, exist_ok=True)
    for fname, cols in PLOT_FILES.items():
        out_lines = [",".join(cols)]
        for row in rows:
            out_lines.append(",".join(row[idx[c]] for c in cols))
        (out_dir / fname).write_text("\n".join(out_lines) + "\n")
    print(f"wrote {len(PLOT_FILES)} plot files ({len(rows)} rows each) to {out_dir}")
    return EXIT_OK


def cmd_validate_feeder(args):
    model = load_feeder(args.path)
    total_p = model.p_load.sum()
    total_q = model.q_load.sum()
    total_s = model.inverter_s.sum() if len(model.inverters) else 0.0
    print(f"{args.path}: OK")
    print(f"  buses: {model.n_bus}  lines: {len(model.lines)}  "
          f"inverters: {len(model.inverters)}")
    print(f"  slack: {model.slack_bus} at {model.source_voltage} pu")
    print(f"  total load: {total_p:.4f} + j{total_q:.4f} pu")
    print(f"  installed inverter capacity: {total_s:.4f} pu")
    print(f"  max depth: {int(model.depth.max())}")
    return EXIT_OK


def cmd_show_config(args):
    config = load_config(args.config)
    print(config_to_text(config))
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="droopguard",
                     description="Feeder simulation and droop-curve attack mitigation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a mitigation policy")
    p.add_argument("--config", required=True, help="preset name or config path")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--iterations", type=int, help="override the iteration budget")
    p.add_argument("--threads", type=int, help="rollout worker threads")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded, bit-reproducible training")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run one evaluation episode")
    p.add_argument("--preset", required=True, help="preset name or config path")
    p.add_argument("--checkpoint", help="trained checkpoint (.npz)")
    p.add_argument("--null-policy", action="store_true",
                   help="hold default curves (no-defense baseline)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--bus", help="bus id for the episode CSV columns")
    p.add_argument("--aggregated", action="store_true",
                   help="fleet-wide shared action instead of per-inverter deployment")
    p.add_argument("--stochastic", action="store_true",
                   help="sample the policy instead of acting greedily")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plotdata", help="split an episode CSV into plot-ready files")
    p.add_argument("--episode", required=True, help="episode.csv from eval")
    p.add_argument("--out", help="output directory")
    p.add_argument("--stride", type=int, default=1, help="downsample factor")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("validate-feeder", help="parse and validate a feeder file")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate_feeder)

    p = sub.add_parser("show-config", help="print the resolved configuration")
    p.add_argument("config", help="preset name or config path")
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FeederError, FileNotFoundError) as exc:
        if isinstance(exc, (PowerFlowError, EpisodeAborted)):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EpisodeAborted, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
