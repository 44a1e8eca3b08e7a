import numpy as np
import pytest

from bdpg.bellman import fixpoint, make_grid, wasserstein_1d
from bdpg.envs import (ENVS, BimodalBandit, ChainWorld, NoisyChain, PointMass1D, SparseGrid,
                       StepAfterDone, make_env)


def rollout(env, actions, seed=0):
    st = env.reset(seed)
    obs, rewards = [st.observation], []
    for a in actions:
        st, r, done = env.step(a)
        obs.append(st.observation)
        rewards.append(r)
        if done:
            break
    return np.array(obs), np.array(rewards), done


def test_chain_left_forever_collects_distractor():
    env = ChainWorld(20)
    _, rewards, done = rollout(env, [0] * 80)
    assert len(rewards) == 80 and done
    assert np.all(rewards == 0.001)
    with pytest.raises(StepAfterDone):
        env.step(0)


def test_chain_right_run_reaches_goal():
    env = ChainWorld(20)
    obs, rewards, done = rollout(env, [1] * 19)
    assert done and rewards[-1] == 1.0 and rewards[:-1].sum() == 0.0
    assert obs.shape == (20, 20) and obs[-1].argmax() == 19


def test_chain_one_short_does_not_terminate():
    _, rewards, done = rollout(ChainWorld(20), [1] * 18)
    assert not done and rewards.sum() == 0.0


def test_grid_goal_and_cap():
    _, r, done = rollout(SparseGrid(3, 3), [2, 2, 0, 0])
    assert done and r[-1] == 1.0
    _, r, done = rollout(SparseGrid(3, 3), [1] * 36)
    assert done and len(r) == 36 and r.sum() == 0.0


@pytest.mark.parametrize("name", sorted(ENVS))
def test_seed_determinism(name):
    env_a, env_b = make_env(name), make_env(name)
    acts = np.random.default_rng(0).integers(0, 2, 50)
    if not env_a.discrete:
        acts = np.random.default_rng(0).uniform(-1, 1, (50, 1))
    elif env_a.n_actions == 1:
        acts = np.zeros(50, int)
    oa, ra, _ = rollout(env_a, acts, seed=7)
    ob, rb, _ = rollout(env_b, acts, seed=7)
    assert oa.tobytes() == ob.tobytes() and ra.tobytes() == rb.tobytes()
    assert oa.shape[1] == env_a.obs_dim


def test_unknown_env():
    with pytest.raises(ValueError, match="unknown env"):
        make_env("atari")


def test_bandit_rewards_balanced():
    env = BimodalBandit()
    rs = []
    for i in range(4000):
        env.reset(i)
        _, r, done = env.step(0)
        assert done
        rs.append(r)
    rs = np.array(rs)
    assert set(np.unique(rs)) == {-1.0, 1.0}
    assert abs(rs.mean()) < 3 * 1 / np.sqrt(4000)


def test_bandit_fixpoint_is_exact_two_point_law():
    env = BimodalBandit()
    mdp = env.tabular_mdp([1.0], gamma=0.99)
    grid = np.linspace(-2.0, 2.0, 401)
    law = fixpoint(mdp, grid)[0]
    assert wasserstein_1d(law, ([-1.0, 1.0], [0.5, 0.5]), 1) < 1e-6


def _mc_returns(env, policy, gamma, episodes, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(episodes):
        st = env.reset(int(rng.integers(2**31)))
        g, disc = 0.0, 1.0
        while True:
            st, r, done = env.step(policy(rng))
            g += disc * r
            disc *= gamma
            if done:
                break
        out.append(g)
    return np.array(out)


def test_noisy_chain_fixpoint_matches_monte_carlo():
    env, gamma = NoisyChain(4, 0.2, 1.0), 0.9
    mdp = env.tabular_mdp([1.0], gamma)
    grid = make_grid(*mdp.reward_range(), gamma=gamma, m=2048)
    law = fixpoint(mdp, grid)[0]
    mc = _mc_returns(env, lambda rng: 0, gamma, 20_000, 0)
    assert law.mean == pytest.approx(mc.mean(), abs=0.05)
    assert wasserstein_1d(law, mc, 1) < 0.05


def test_chain_value_under_random_policy_matches_monte_carlo():
    env, gamma = ChainWorld(4, distractor=0.1, max_steps=10_000), 0.8
    mdp = env.tabular_mdp([0.5, 0.5], gamma)
    mc = _mc_returns(env, lambda rng: int(rng.integers(2)), gamma, 5000, 1)
    assert mdp.values()[0] == pytest.approx(mc.mean(), abs=4 * mc.std() / np.sqrt(5000))


def test_random_policy_score_matches_simulation():
    env = ChainWorld(6)
    rng = np.random.default_rng(2)
    scores = []
    for i in range(4000):
        env.reset(i)
        total, done = 0.0, False
        while not done:
            _, r, done = env.step(int(rng.integers(2)))
            total += r
        scores.append(total)
    scores = np.array(scores)
    assert env.random_policy_score() == pytest.approx(scores.mean(),
                                                      abs=4 * scores.std() / np.sqrt(4000))


def test_point_mass_costs_and_bounds():
    env = PointMass1D()
    env.reset(0)
    for _ in range(200):
        if env.done:
            env.reset()
        st, r, _ = env.step(np.array([5.0]))
        assert r <= 0.0
        assert -1.0 <= st.observation[0] <= 1.0
