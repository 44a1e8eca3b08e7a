"""Curiosity-driven exploration on a long chain with a distractor.

Trains the curiosity agent and the plain PPO baseline from the same config
and reports the environment step at which each first collects the goal.

    python demos/chain_exploration.py --seeds 0 1 --budget 40000
"""

import argparse
from pathlib import Path

from bdpg.cli import build_trainer
from bdpg.config import load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def first_goal(cfg_name, seed, budget):
    cfg = load_config(CONFIGS / cfg_name, {"algo.seed": str(seed)})
    tr = build_trainer(cfg)
    goal = cfg.make_env().goal_reward
    rows = tr.train(budget, stop=lambda t: t.first_success(goal) is not None)
    return tr.first_success(goal), rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--budget", type=int, default=40_000)
    args = ap.parse_args()
    for seed in args.seeds:
        for name in ("chain40_bdpg.cfg", "chain40_naive.cfg"):
            hit, rows = first_goal(name, seed, args.budget)
            last = rows[-1] if rows else {}
            where = f"step {hit}" if hit is not None else f"not within {args.budget} steps"
            print(f"seed {seed} {name:18s} first goal: {where:24s} "
                  f"mean curiosity reward in last round {last.get('rc_mean', 0.0):.4f}")


if __name__ == "__main__":
    main()
