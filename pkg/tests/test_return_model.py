import math

import numpy as np
import pytest

from bdpg import ndmath as nd
from bdpg.ndmath import ParamStore, Tape
from bdpg.return_model import ReturnModel, ReturnModelConfig
from bdpg.trainer import AlgoConfig, Trainer
from bdpg.envs import BimodalBandit

from conftest import coincident_model, train_discriminator


def model(seed=0, zero_last=False, dtype=np.float64, state_dim=3, latent=2):
    store = ParamStore(seed=seed, dtype=dtype)
    return ReturnModel(ReturnModelConfig(state_dim=state_dim, latent_dim=latent, hidden=(16, 16)),
                       store, zero_last=zero_last)


S = np.array([[0.1, -0.4, 1.0], [1.0, 0.0, 0.0]])


def test_prior_deterministic_and_shape_checked():
    m = model()
    a, b = m.prior_params(S), m.prior_params(S)
    assert a.mean.tobytes() == b.mean.tobytes() and a.log_std.tobytes() == b.log_std.tobytes()
    assert a.mean.shape == (2, 2)
    with pytest.raises(nd.ShapeError):
        m.prior_params(np.zeros((2, 4)))


def test_zero_last_layer_gives_unit_gaussian_and_half_scores():
    m = model(zero_last=True)
    p = m.prior_params(S)
    assert np.all(p.mean == 0) and np.all(p.log_std == 0)
    assert np.all(m.discriminator_score(np.array([0.3, 9.0]), np.ones((2, 2)), S) == 0.5)


def test_sample_return_seeded_and_reparameterized():
    m = model()
    (za, ga), (zb, gb) = m.sample_return(S, np.random.default_rng(4)), \
        m.sample_return(S, np.random.default_rng(4))
    assert za.z.tobytes() == zb.z.tobytes() and ga.tobytes() == gb.tobytes()
    src = za.source_params
    assert np.array_equal(za.z, src.mean + np.exp(src.log_std) * za.noise)
    lat, params = m.encode(np.array([1.0, -2.0]), S, np.random.default_rng(5))
    assert np.array_equal(lat.z, params.mean + np.exp(params.log_std) * lat.noise)


def test_min_std_clamp_makes_samples_coincide():
    m = model(zero_last=True)
    m.store.values["prior.b2"][2:] = -1e3   # log_std far below the floor
    (z1, g1), (z2, g2) = (m.sample_return(S, np.random.default_rng(i)) for i in (0, 1))
    assert np.all(np.abs(z1.z - z2.z) < 1e-5)
    assert np.all(np.exp(z1.source_params.log_std) == pytest.approx(1e-6))


def test_sample_mean_matches_large_monte_carlo():
    m = model(seed=2)
    s1 = S[:1]
    small = m.sample_return(np.repeat(s1, 10_000, 0), np.random.default_rng(0))[1]
    big = np.concatenate([m.sample_return(np.repeat(s1, 100_000, 0),
                                          np.random.default_rng(1 + i))[1] for i in range(10)])
    se = small.std(ddof=1) / math.sqrt(small.size)
    assert abs(small.mean() - big.mean()) < 3 * se + 3 * big.std() / math.sqrt(big.size)


def test_score_is_batch_order_invariant():
    m = model(seed=3)
    rng = np.random.default_rng(0)
    x, z = rng.normal(size=5), rng.normal(size=(5, 2))
    s = rng.normal(size=(5, 3))
    perm = rng.permutation(5)
    np.testing.assert_array_equal(m.discriminator_score(x, z, s)[perm],
                                  m.discriminator_score(x[perm], z[perm], s[perm]))


def _noise(n, l, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, l)), rng.standard_normal((n, l))


def test_objectives_at_constant_half():
    m = model(zero_last=True)
    e1, e2 = _noise(2, 2)
    x = np.array([0.5, -1.0])
    assert float(m.discriminator_loss(x, S, e1, e2).data) == pytest.approx(2 * math.log(0.5))
    assert float(m.encoder_prior_loss(x, S, e1, e2).data) == pytest.approx(2 * math.log(0.5))


def test_perfect_discrimination_limit():
    m = model(zero_last=True)
    v = m.store.values
    v["gen.b2"][:] = 50.0                  # prior path decodes to x~ = 50
    v["disc.W0"][0, 0] = 1.0               # one hidden chain reading the x input
    v["disc.W1"][0, 0] = 1.0
    v["disc.W2"][0, 0] = 100.0
    v["disc.b2"][:] = -50.0
    e1, e2 = _noise(2, 2)
    # encoder path sits at x = -50: scores saturate at the clamp on both paths
    val = float(m.discriminator_loss(np.array([-50.0, -60.0]), S, e1, e2).data)
    assert -1e-6 < val < 0.0


def test_reconstruction_examples():
    m = model(zero_last=True)
    e1, _ = _noise(2, 2)
    assert float(m.reconstruction_loss(np.array([2.0, 2.0]), S, e1).data) == 4.0
    assert float(m.reconstruction_loss(np.zeros(2), S, e1).data) == 0.0


def test_empty_batch_rejected():
    m = model()
    with pytest.raises(ValueError):
        m.discriminator_loss(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 2)))


def _grads(m, loss_name):
    rng = np.random.default_rng(9)
    x = rng.normal(size=4)
    s = rng.normal(size=(4, 3))
    e1, e2 = _noise(4, 2, 1)
    tape = Tape()
    with tape:
        if loss_name == "recon":
            loss = getattr(m, "reconstruction_loss")(x, s, e1, tape)
        else:
            loss = getattr(m, loss_name)(x, s, e1, e2, tape)
    return nd.backward(tape, loss)


def test_freeze_contracts():
    m = model(seed=4)
    eg = _grads(m, "encoder_prior_loss")
    assert all(n.startswith(("enc.", "prior.")) for n in eg)
    assert np.linalg.norm(np.concatenate([eg[n].ravel() for n in m.groups["enc"]])) > 0
    assert np.linalg.norm(np.concatenate([eg[n].ravel() for n in m.groups["prior"]])) > 0
    d = _grads(m, "discriminator_loss")
    assert set(d) == set(m.groups["disc"])
    rec = _grads(m, "recon")
    assert set(rec) == set(m.groups["gen"])


def test_round_touches_groups_only_through_their_losses():
    algo = AlgoConfig(workers=2, unroll=8, minibatch=16, epochs=1, seed=1)
    tr = Trainer(BimodalBandit, algo, ReturnModelConfig(state_dim=1, latent_dim=2, hidden=(8,)))
    m = tr.model
    x = np.random.default_rng(0).normal(size=8)
    s = np.ones((8, 1), dtype=np.float32)
    e1, e2 = (a.astype(np.float32) for a in _noise(8, 2))
    snap = {n: v.copy() for n, v in tr.store.values.items()}

    def changed():
        out = {n for n, v in tr.store.values.items() if not np.array_equal(v, snap[n])}
        snap.update({n: tr.store.values[n].copy() for n in out})
        return out

    tr._step("disc", m.groups["disc"], 1e-2,
             lambda tp: m.discriminator_loss(x, s, e1, e2, tp), -1.0)
    assert changed() <= set(m.groups["disc"])
    tr._step("enc_prior", m.groups["enc"] + m.groups["prior"], 1e-2,
             lambda tp: m.encoder_prior_loss(x, s, e1, e2, tp), -1.0)
    assert changed() <= set(m.groups["enc"] + m.groups["prior"])
    tr._step("gen", m.groups["gen"], 1e-2, lambda tp: m.reconstruction_loss(x, s, e1, tp), 1.0)
    assert changed() <= set(m.groups["gen"])


def test_equilibrium_indicator():
    m = coincident_model(seed=0)
    assert abs(train_discriminator(m, steps=300) - 0.5) <= 0.05


def test_discriminator_separates_mismatched_joints():
    m = coincident_model(seed=0)
    shifted = np.random.default_rng(1)
    train_discriminator(m, steps=300, data=lambda n: 2.0 + shifted.standard_normal(n))
    rng = np.random.default_rng(2)
    s = np.ones((5000, 1))
    x = 2.0 + rng.standard_normal(5000)
    z_enc, _ = m.encode(x, s, rng)
    z_pri, g = m.sample_return(s, rng)
    gap = m.discriminator_score(g, z_pri.z, s).mean() - m.discriminator_score(x, z_enc.z, s).mean()
    assert gap > 0.3
