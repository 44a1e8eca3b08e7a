"""Fitting the adversarial return model on a coin-flip bandit.

The policy is frozen so only the prior, encoder, generator and
discriminator learn. Prints the distance between sampled returns and the
exact two-point law as training proceeds.

    python demos/return_fitting.py --steps 50000
"""

import argparse

import numpy as np

from bdpg.bellman import wasserstein_1d
from bdpg.envs import BimodalBandit
from bdpg.trainer import AlgoConfig, Trainer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=50_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    tr = Trainer(BimodalBandit, AlgoConfig(algorithm="bdpg", lr_policy=0.0, seed=args.seed))
    exact = (np.array([-1.0, 1.0]), np.array([0.5, 0.5]))
    s = np.repeat(tr._obs[:1], 10_000, axis=0)
    rng = np.random.default_rng(args.seed)
    checkpoints = np.linspace(0, args.steps, 6)[1:].astype(int)
    for target in checkpoints:
        rows = tr.train(int(target))
        if not rows:
            continue
        _, g = tr.model.sample_return(s, rng)
        print(f"step {tr.env_steps:6d}: W1 to exact law {wasserstein_1d(g, exact, 1):.3f}, "
              f"sample mean {g.mean():+.3f} std {g.std():.3f}, "
              f"D loss {rows[-1]['d_loss']:.3f}")


if __name__ == "__main__":
    main()
