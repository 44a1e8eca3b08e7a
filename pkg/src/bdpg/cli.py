"""Command-line entry point: ``bdpg {train,eval,oracle,gradcheck,export-plots}``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 acceptance failure (oracle or gradient check out of tolerance).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import ndmath as nd
from .bellman import run_oracle
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .curiosity import RunningStats
from .gradcheck import run_suite
from .return_model import ReturnModelConfig
from .trainer import METRIC_COLUMNS, NumericalError, Trainer, evaluate

log = logging.getLogger("bdpg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 1, 2, 3


def version_stamp() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def build_trainer(cfg: ExperimentConfig, store=None) -> Trainer:
    model = ReturnModelConfig(state_dim=0, latent_dim=cfg.model.latent_dim,
                              hidden=tuple(cfg.model.hidden))
    return Trainer(cfg.make_env, cfg.algo, model, policy_hidden=tuple(cfg.model.hidden),
                   store=store)


def _format_row(row: dict, wall: bool) -> list[str]:
    out = []
    for c in METRIC_COLUMNS:
        v = row[c]
        if c == "wall_ms" and not wall:
            v = 0.0
        if c in ("update_idx", "env_steps"):
            out.append(str(int(v)))
        else:
            out.append("nan" if math.isnan(v) else repr(float(v)))
    return out


def run_training(cfg: ExperimentConfig, run_dir: Path) -> int:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(cfg.to_text())
    (run_dir / "run.json").write_text(json.dumps({
        "version": version_stamp(), "seed": cfg.algo.seed, "env": cfg.env_name,
        "algorithm": cfg.algo.algorithm}, indent=2) + "\n")
    trainer = build_trainer(cfg)
    meta = {"config": cfg.to_text()}
    every = cfg.io.checkpoint_every

    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)

        def on_row(row):
            writer.writerow(_format_row(row, cfg.io.record_wall_time))
            fh.flush()
            if every and row["update_idx"] % every == 0:
                nd.save_checkpoint(run_dir / f"ckpt_{int(row['update_idx']):06d}.bin",
                                   trainer.store, {**meta, **trainer.checkpoint_meta()})

        try:
            rows = trainer.train(callback=on_row)
        except (NumericalError, FloatingPointError) as exc:
            nd.save_checkpoint(run_dir / "crash.bin", trainer.store,
                               {**meta, **trainer.checkpoint_meta()})
            log.error("numerical failure: %s (state dumped to %s)", exc, run_dir / "crash.bin")
            return EXIT_NUMERIC

    nd.save_checkpoint(run_dir / "final.bin", trainer.store, {**meta, **trainer.checkpoint_meta()})
    scores = [e.score for e in trainer.episodes[-100:]]
    summary = {
        "updates": trainer.version,
        "env_steps": trainer.env_steps,
        "episodes": len(trainer.episodes),
        "final100_score_mean": float(np.mean(scores)) if scores else None,
        "final100_terminal_rate": float(np.mean([e.terminal for e in trainer.episodes[-100:]]))
        if scores else None,
        "last_row": {k: (None if isinstance(v, float) and math.isnan(v) else v)
                     for k, v in (rows[-1].items() if rows else [])},
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("finished %s: %d updates, %d env steps", run_dir, trainer.version,
             trainer.env_steps)
    return EXIT_OK


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"override {p!r}: expected section.key=value")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(args) -> int:
    seeds = [args.seed] if args.seed is not None else [None]
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    code = EXIT_OK
    for seed in seeds:
        over = _overrides(args.set)
        if seed is not None:
            over["algo.seed"] = str(seed)
        if args.total_steps is not None:
            over["algo.total_steps"] = str(args.total_steps)
        cfg = load_config(args.config, over)
        outdir = Path(args.outdir or cfg.io.outdir)
        run_dir = outdir / f"{Path(args.config).stem}_s{cfg.algo.seed}"
        code = max(code, run_training(cfg, run_dir))
        print(run_dir)
    return code


def _load_run(checkpoint: Path):
    if not checkpoint.exists():
        raise ConfigError(f"{checkpoint}: no such checkpoint")
    store, meta = nd.load_checkpoint(checkpoint)
    cfg = parse_config(meta["config"], str(checkpoint))
    trainer = build_trainer(cfg, store=store)
    trainer.stats = RunningStats.from_state(meta["stats"])
    return cfg, trainer


def cmd_eval(args) -> int:
    cfg, trainer = _load_run(Path(args.checkpoint))
    env = cfg.make_env()
    scores = evaluate(trainer.policy, env, args.episodes, seed=args.seed, greedy=args.greedy)
    print(f"episodes = {args.episodes}")
    print(f"score_mean = {scores.mean():.6f}")
    print(f"score_std = {scores.std():.6f}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.trials == 0:
        log.warning("zero trials requested: contraction check is vacuous")
    report = run_oracle(trials=args.trials, gammas=tuple(args.gamma), p_orders=tuple(args.p),
                        m=args.support, states=(args.states_min, args.states_max),
                        tolerance=args.tolerance, seed=args.seed)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_ACCEPT


def cmd_gradcheck(args) -> int:
    results = run_suite(args.instances, args.seed)
    for r in results:
        print(f"{r.name}: instances = {r.instances}, max_rel_error = {r.max_rel_error:.3e}, "
              f"{'pass' if r.passed else 'fail'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPT


def cmd_export_plots(args) -> int:
    run = Path(args.run_dir)
    src = run / "metrics.csv"
    if not src.exists():
        raise ConfigError(f"{src}: no metrics file")
    with open(src, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = Path(args.out or run / "plots")
    out.mkdir(parents=True, exist_ok=True)
    for col in METRIC_COLUMNS:
        if col in ("update_idx", "env_steps"):
            continue
        with open(out / f"{col}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["env_steps", col])
            for r in rows:
                w.writerow([r["env_steps"], r[col]])
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdpg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", help="comma-separated seed sweep, one run directory each")
    t.add_argument("--outdir")
    t.add_argument("--total-steps", type=int)
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll a frozen policy from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--greedy", action="store_true")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="tabular contraction certificate trials")
    o.add_argument("--gamma", type=float, nargs="+", default=[0.9])
    o.add_argument("--trials", type=int, default=100)
    o.add_argument("--support", type=int, default=256)
    o.add_argument("--p", type=int, nargs="+", default=[1, 2], choices=[1, 2])
    o.add_argument("--states-min", type=int, default=3)
    o.add_argument("--states-max", type=int, default=8)
    o.add_argument("--tolerance", type=float, default=0.02)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every loss")
    g.add_argument("--instances", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-plots", help="split metrics.csv into per-metric CSV files")
    x.add_argument("run_dir")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_plots)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
