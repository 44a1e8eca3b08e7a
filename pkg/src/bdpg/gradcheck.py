"""Central finite-difference checks for every trainable loss.

Each check builds a small random instance in float64, differentiates the
loss on a tape and compares against central differences (step 1e-3) over
every parameter entry of the group being trained. Instances that land
within a step of a piecewise kink (PPO clip boundary, Huber threshold)
are redrawn, since central differences are meaningless there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndmath as nd
from .ndmath import ParamStore, Tape
from .policy import Policy, ppo_surrogate
from .return_model import ReturnModel, ReturnModelConfig
from .trainer import quantile_huber_loss, quantile_midpoints

STEP = 1e-3
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOL


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_group(store: ParamStore, names: list[str], loss_fn: Callable[[Tape | None], nd.Tensor],
                h: float = STEP) -> float:
    """Max relative error between tape and finite-difference gradients."""
    tape = Tape()
    with tape:
        loss = loss_fn(tape)
    grads = nd.backward(tape, loss)

    def value() -> float:
        with nd.no_grad():
            return float(loss_fn(None).data)

    analytic = np.concatenate([grads.get(n, np.zeros_like(store.values[n])).ravel()
                               for n in names])
    numeric = np.concatenate([nd.numeric_grad(value, store.values[n], h).ravel()
                              for n in names])
    return rel_error(analytic, numeric)


def _model(rng: np.random.Generator, sd=3, l=2, hidden=(6, 6)) -> ReturnModel:
    store = ParamStore(seed=int(rng.integers(2**31)), dtype=np.float64)
    model = ReturnModel(ReturnModelConfig(sd, l, hidden), store)
    for n in store:
        store.values[n] += 0.1 * rng.standard_normal(store.values[n].shape)
    return model


def _model_batch(rng, model: ReturnModel, n=5):
    l, sd = model.cfg.latent_dim, model.cfg.state_dim
    x = rng.normal(0.0, 1.0, n)
    s = rng.normal(0.0, 1.0, (n, sd))
    return x, s, rng.standard_normal((n, l)), rng.standard_normal((n, l))


def check_discriminator(rng) -> float:
    m = _model(rng)
    x, s, e1, e2 = _model_batch(rng, m)
    return check_group(m.store, m.groups["disc"],
                       lambda tp: m.discriminator_loss(x, s, e1, e2, tp))


def check_encoder_prior(rng) -> float:
    m = _model(rng)
    x, s, e1, e2 = _model_batch(rng, m)
    return check_group(m.store, m.groups["enc"] + m.groups["prior"],
                       lambda tp: m.encoder_prior_loss(x, s, e1, e2, tp))


def check_reconstruction(rng) -> float:
    m = _model(rng)
    x, s, e1, _ = _model_batch(rng, m)
    return check_group(m.store, m.groups["gen"],
                       lambda tp: m.reconstruction_loss(x, s, e1, tp))


def check_ppo(rng, clip_eps: float = 0.2, discrete: bool | None = None) -> float:
    discrete = bool(rng.integers(2)) if discrete is None else discrete
    store = ParamStore(seed=int(rng.integers(2**31)), dtype=np.float64)
    pol = Policy(store, 3, 3 if discrete else 2, discrete, hidden=(6,))
    for n in store:
        store.values[n] += 0.3 * rng.standard_normal(store.values[n].shape)
    n = 6
    s = rng.normal(size=(n, 3))
    if discrete:
        acts = rng.integers(0, 3, n)
    else:
        acts = rng.normal(size=(n, 2))
    with nd.no_grad():
        cur = pol.log_prob_graph(s, acts, Tape())[0].data
    # old log-probs put ratios on both sides of the clip range, away from its edges
    while True:
        log_ratio = rng.uniform(-0.5, 0.5, n)
        ratio = np.exp(log_ratio)
        if np.all(np.abs(ratio - (1 - clip_eps)) > 0.02) and \
                np.all(np.abs(ratio - (1 + clip_eps)) > 0.02):
            break
    logp_old = cur - log_ratio
    adv = rng.normal(size=n)

    def loss(tp):
        logp, ent = pol.log_prob_graph(s, acts, tp or Tape())
        return nd.add(ppo_surrogate(logp, logp_old, adv, clip_eps), nd.mul(nd.mean(ent), 0.01))

    return check_group(store, pol.names, loss)


def check_quantile_huber(rng, kappa: float = 1.0) -> float:
    from .ndmath import MLPSpec
    m = int(rng.integers(1, 6))
    store = ParamStore(seed=int(rng.integers(2**31)), dtype=np.float64)
    spec = MLPSpec([3, 6, m])
    nd.init_mlp(store, "qr", spec.sizes)
    s = rng.normal(size=(6, 3))
    with nd.no_grad():
        pred = nd.forward_mlp(store.view("qr."), s, spec).data
    # keep every residual clear of the Huber threshold
    while True:
        x = rng.normal(0.0, 1.5, 6)
        u = x[:, None] - pred
        if np.all(np.abs(np.abs(u) - kappa) > 0.02):
            break
    taus = quantile_midpoints(m)

    def loss(tp):
        out = nd.forward_mlp(store.view("qr.", tp), s, spec)
        return quantile_huber_loss(out, x, taus, kappa)

    return check_group(store, store.names("qr."), loss)


CHECKS = {
    "discriminator": check_discriminator,
    "encoder_prior": check_encoder_prior,
    "reconstruction": check_reconstruction,
    "ppo": check_ppo,
    "quantile_huber": check_quantile_huber,
}


def run_suite(instances: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, fn in CHECKS.items():
        worst = max(fn(rng) for _ in range(instances))
        out.append(CheckResult(name, instances, worst))
    return out
