import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from bdpg.bellman import (TabularMDP, TabularReturnDistribution, TrajectorySegment,
                          bellman_target, bellman_targets, contraction_certificate, fixpoint,
                          gae, make_grid, push_distribution, random_distributions, random_mdp,
                          run_oracle, sup_wasserstein, td_errors, wasserstein_1d)


def seg(r, g, d=None, gamma=0.99, lam=0.95):
    d = [False] * len(r) if d is None else d
    return TrajectorySegment(np.array(r, float), np.array(g, float), np.array(d), gamma, lam)


def brute_gae(s: TrajectorySegment, k=None):
    """Direct double sum over TD errors with explicit episode cut-offs."""
    n = len(s)
    delta = td_errors(s)
    k = n if k is None else k
    out = np.zeros(n)
    for t in range(n):
        for i in range(t, min(t + k, n)):
            w = (s.gamma * s.lam) ** (i - t)
            if any(s.dones[t:i]):
                break
            out[t] += w * delta[i]
    return out


# -- bellman_target -------------------------------------------------------

def test_one_step_target():
    assert bellman_target(seg([1.0], [0.0, 10.0]), 0, k=1) == pytest.approx(10.9)


def test_two_step_target():
    s = seg([1.0, 2.0], [0.0, 0.0, 5.0], gamma=0.9)
    assert bellman_target(s, 0, k=2) == pytest.approx(6.85)


def test_terminal_drops_bootstrap():
    s = seg([0.7, 3.0], [1.0, 50.0, 80.0], d=[True, False])
    assert bellman_target(s, 0, k=2) == 0.7


def test_target_index_checked():
    with pytest.raises(IndexError):
        bellman_target(seg([1.0], [0.0, 0.0]), 1)


def test_vectorized_targets_match_scalar():
    rng = np.random.default_rng(1)
    s = seg(rng.normal(size=9), rng.normal(size=10), rng.random(9) < 0.2)
    for k in (None, 1, 3):
        np.testing.assert_allclose(bellman_targets(s, k),
                                   [bellman_target(s, t, k) for t in range(9)], rtol=1e-12)


def test_segment_validation():
    with pytest.raises(ValueError):
        seg([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        seg([1.0], [0.0, np.inf])
    with pytest.raises(ValueError):
        seg([1.0], [0.0, 0.0], lam=1.5)


# -- gae ------------------------------------------------------------------

def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(2)
    s = seg(rng.normal(size=6), rng.normal(size=7), rng.random(6) < 0.3, lam=0.0)
    np.testing.assert_array_equal(gae(s), td_errors(s))


def test_gae_lambda_one_gamma_one_telescopes():
    rng = np.random.default_rng(3)
    r, g = rng.normal(size=5), rng.normal(size=6)
    s = seg(r, g, gamma=1.0, lam=1.0)
    assert gae(s)[0] == pytest.approx(r.sum() - g[0] + g[5], rel=1e-12)


@pytest.mark.parametrize("k", [None, 1, 2, 4])
def test_gae_matches_brute_force_double_sum(k):
    rng = np.random.default_rng(4)
    for _ in range(20):
        s = seg(rng.normal(size=5), rng.normal(size=6), rng.random(5) < 0.3,
                gamma=rng.uniform(0.5, 1.0), lam=rng.uniform(0.0, 1.0))
        np.testing.assert_allclose(gae(s, k), brute_gae(s, k), rtol=1e-10, atol=1e-12)


def test_gae_lambda_one_equals_target_minus_value():
    rng = np.random.default_rng(5)
    s = seg(rng.normal(size=7), rng.normal(size=8), rng.random(7) < 0.2, lam=1.0)
    np.testing.assert_allclose(gae(s), bellman_targets(s) - s.values[:-1], atol=1e-12)


# -- wasserstein ----------------------------------------------------------

def test_identical_distributions_zero():
    x = np.array([0.3, -1.0, 2.0])
    assert wasserstein_1d(x, x, 1) == 0.0
    assert wasserstein_1d(x, x, 2) == 0.0


@pytest.mark.parametrize("p", [1, 2])
def test_point_masses(p):
    assert wasserstein_1d(([0.0], [1.0]), ([1.0], [1.0]), p) == pytest.approx(1.0)


def test_sorted_matching_example():
    assert wasserstein_1d(np.array([0.0, 2.0]), np.array([3.0, 1.0]), 1) == 1.0


def test_empty_rejected():
    with pytest.raises(ValueError):
        wasserstein_1d(np.array([]), np.array([1.0]))


def test_w1_agrees_with_scipy_on_weighted_laws():
    rng = np.random.default_rng(6)
    for _ in range(30):
        av, bv = rng.normal(size=7), rng.normal(1.0, 2.0, size=4)
        aw, bw = rng.random(7), rng.random(4)
        ours = wasserstein_1d((av, aw), (bv, bw), 1)
        ref = scipy.stats.wasserstein_distance(av, bv, aw, bw)
        assert ours == pytest.approx(ref, rel=1e-10, abs=1e-12)


def test_w2_sample_path_matches_weighted_path():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=50), rng.normal(size=50)
    w = np.full(50, 1 / 50)
    assert wasserstein_1d(a, b, 2) == pytest.approx(wasserstein_1d((a, w), (b, w), 2), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), p=st.sampled_from([1, 2]))
def test_wasserstein_is_a_metric_on_the_grid(seed, p):
    rng = np.random.default_rng(seed)
    grid = np.linspace(-3, 3, 32)
    a, b, c = random_distributions(rng, grid, 3)
    ab, ba = wasserstein_1d(a, b, p), wasserstein_1d(b, a, p)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert wasserstein_1d(a, a, p) <= 1e-9
    assert ab <= wasserstein_1d(a, c, p) + wasserstein_1d(c, b, p) + 1e-9
    if not np.allclose(a.probs, b.probs):
        assert ab > 1e-9


# -- tabular oracle -------------------------------------------------------

def test_distribution_validation():
    with pytest.raises(ValueError):
        TabularReturnDistribution([0.0, 1.0], [0.5, 0.6])
    with pytest.raises(ValueError):
        TabularReturnDistribution([1.0, 0.0], [0.5, 0.5])


def test_gamma_zero_gives_reward_point_mass():
    mdp = TabularMDP.from_tables([[0.25]] * 3, [[1.0]] * 3,
                                 np.full((3, 3), 1 / 3), gamma=0.0)
    grid = np.linspace(-1, 1, 9)
    omega = random_distributions(np.random.default_rng(0), grid, 3)
    for d in push_distribution(mdp, omega).dists:
        assert d.probs[np.searchsorted(grid, 0.25)] == pytest.approx(1.0)


def test_single_state_fixpoint_is_geometric_series():
    mdp = TabularMDP([[(1.0, 1.0, 0)]], gamma=0.5)
    grid = np.linspace(0.0, 4.0, 81)
    (d,) = fixpoint(mdp, grid)
    assert d.probs[np.argmin(np.abs(grid - 2.0))] == pytest.approx(1.0, abs=1e-6)
    assert d.mean == pytest.approx(2.0, abs=1e-6)


def test_push_mean_matches_scalar_backup():
    rng = np.random.default_rng(8)
    for _ in range(10):
        mdp = random_mdp(rng, 3, 0.9)
        grid = make_grid(*mdp.reward_range(), gamma=0.9, m=256)
        omega = random_distributions(rng, grid, 3)
        pushed = push_distribution(mdp, omega)
        assert not pushed.projected_outside
        means = np.array([d.mean for d in omega])
        backup = mdp.expected_rewards + mdp.gamma * mdp.transition_matrix @ means
        # linear interpolation preserves the mean exactly for atoms inside the grid
        np.testing.assert_allclose([d.mean for d in pushed.dists], backup, atol=1e-9)


def test_push_preserves_mass():
    rng = np.random.default_rng(9)
    mdp = random_mdp(rng, 5, 0.99)
    grid = make_grid(*mdp.reward_range(), gamma=0.99)
    for d in push_distribution(mdp, random_distributions(rng, grid, 5)).dists:
        assert abs(d.probs.sum() - 1.0) < 1e-9


def test_projection_flag_when_grid_too_narrow():
    mdp = TabularMDP([[(1.0, 5.0, 0)]], gamma=0.5)
    grid = np.linspace(-1, 1, 11)
    res = push_distribution(mdp, random_distributions(np.random.default_rng(0), grid, 1))
    assert res.projected_outside
    assert res.dists[0].probs[-1] == pytest.approx(1.0)


def test_fixpoint_mean_matches_linear_solve():
    rng = np.random.default_rng(10)
    mdp = random_mdp(rng, 4, 0.8)
    grid = make_grid(*mdp.reward_range(), gamma=0.8, m=256)
    omega = fixpoint(mdp, grid)
    np.testing.assert_allclose([d.mean for d in omega], mdp.values(), atol=1e-6)


def test_certificate_identical_inputs():
    rng = np.random.default_rng(11)
    mdp = random_mdp(rng, 3, 0.9)
    grid = make_grid(*mdp.reward_range(), gamma=0.9)
    omega = random_distributions(rng, grid, 3)
    cert = contraction_certificate(mdp, omega, omega)
    assert cert.before == 0.0 and cert.after == 0.0
    assert cert.exact_match and cert.ratio is None and cert.passed


def test_certificate_gamma_zero_collapses():
    rng = np.random.default_rng(12)
    mdp = random_mdp(rng, 4, 0.0)
    grid = np.linspace(-1.2, 1.2, 64)
    w1, w2 = random_distributions(rng, grid, 4), random_distributions(rng, grid, 4)
    cert = contraction_certificate(mdp, w1, w2, 1)
    assert cert.before > 0
    assert cert.after == pytest.approx(0.0, abs=1e-12)


def test_hundred_random_trials_at_gamma_09():
    report = run_oracle(trials=100, gammas=(0.9,), p_orders=(1, 2), m=256, seed=3)
    assert report.passed
    assert all(row["ratio"] <= 0.92 for row in report.worst)


def test_iterated_backups_decay_geometrically():
    rng = np.random.default_rng(13)
    gamma = 0.7
    mdp = random_mdp(rng, 5, gamma)
    grid = make_grid(*mdp.reward_range(), gamma=gamma, m=256)
    w1, w2 = random_distributions(rng, grid, 5), random_distributions(rng, grid, 5)
    cell = grid[1] - grid[0]
    d = sup_wasserstein(w1, w2, 1)
    for _ in range(15):
        w1 = push_distribution(mdp, w1).dists
        w2 = push_distribution(mdp, w2).dists
        nxt = sup_wasserstein(w1, w2, 1)
        assert nxt <= gamma * d + 2 * cell
        d = nxt
    assert d < 0.01 * (grid[-1] - grid[0])
