"""Quantile-regression baseline on a ten-state chain.

Trains PPO with a quantile critic and prints the learned return quantiles
at the start state next to the success rate of recent episodes.

    python demos/qr_baseline.py --steps 20000
"""

import argparse
from pathlib import Path

import numpy as np

from bdpg.cli import build_trainer
from bdpg.config import load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = load_config(CONFIGS / "chain10_qr.cfg", {"algo.seed": str(args.seed)})
    tr = build_trainer(cfg)
    for r in range(4):
        tr.train((r + 1) * args.steps // 4)
        recent = tr.episodes[-100:]
        rate = np.mean([e.terminal for e in recent]) if recent else 0.0
        env = cfg.make_env()
        q = tr.quantiles(env.reset(0).observation[None])[0]
        print(f"step {tr.env_steps:6d}: goal rate (last {len(recent)}) {rate:.2f}, "
              f"start-state quantiles min {q.min():.3f} median {np.median(q):.3f} "
              f"max {q.max():.3f}")


if __name__ == "__main__":
    main()
