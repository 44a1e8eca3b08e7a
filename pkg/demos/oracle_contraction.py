"""Tabular distributional backups on a small noisy chain.

Iterates the projected operator to its fixpoint, compares the result with a
Monte Carlo estimate of the return law, then runs a batch of random
contraction trials.

    python demos/oracle_contraction.py
"""

import numpy as np

from bdpg.bellman import (contraction_certificate, fixpoint,
                          make_grid, random_distributions, run_oracle, wasserstein_1d)
from bdpg.envs import NoisyChain


def monte_carlo_returns(env, gamma, episodes, rng):
    out = np.empty(episodes)
    for i in range(episodes):
        env.reset(int(rng.integers(2**31)))
        g, disc, done = 0.0, 1.0, False
        while not done:
            _, r, done = env.step(0)
            g += disc * r
            disc *= gamma
        out[i] = g
    return out


def main():
    gamma = 0.9
    env = NoisyChain(n=4, mean_reward=0.5, noise=1.0)
    mdp = env.tabular_mdp([1.0], gamma)
    support = make_grid(*mdp.reward_range(), gamma=gamma, m=1024)
    omega = fixpoint(mdp, support)
    mc = monte_carlo_returns(env, gamma, 20_000, np.random.default_rng(0))
    law = omega[0]
    print(f"start state: fixpoint mean {law.mean:.4f}, Monte Carlo mean {mc.mean():.4f}")
    print(f"W1(fixpoint, Monte Carlo) = {wasserstein_1d(mc, (law.support, law.probs), 1):.4f}")

    rng = np.random.default_rng(1)
    a = random_distributions(rng, support, mdp.n_states)
    b = random_distributions(rng, support, mdp.n_states)
    for p in (1, 2):
        cert = contraction_certificate(mdp, a, b, p)
        print(f"p={p}: sup-W before {cert.before:.4f}, after {cert.after:.4f}, "
              f"ratio {cert.ratio:.4f} (gamma {gamma})")

    print()
    print("\n".join(run_oracle(trials=60, gammas=(0.5, 0.9, 0.99)).lines()))


if __name__ == "__main__":
    main()
