"""Stochastic policies and the PPO clipped surrogate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndmath as nd
from .ndmath import MLPSpec, ParamStore, Tape, Tensor

LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class PolicyDistribution:
    """Either categorical ``logits`` or Gaussian ``mean``/``log_std``."""

    logits: np.ndarray | None = None
    mean: np.ndarray | None = None
    log_std: np.ndarray | None = None

    @property
    def discrete(self) -> bool:
        return self.logits is not None

    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def log_prob(self, a) -> np.ndarray:
        if self.discrete:
            z = self.logits - self.logits.max(axis=-1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=-1))
            return z[np.arange(len(z)), np.asarray(a)] - lse
        a = np.asarray(a, dtype=np.float64)
        ls = np.broadcast_to(self.log_std, self.mean.shape)
        zz = (a - self.mean) / np.exp(ls)
        return np.sum(-0.5 * zz * zz - ls - 0.5 * LOG_2PI, axis=-1)

    def entropy(self) -> np.ndarray:
        if self.discrete:
            p = self.probs()
            logp = np.log(np.clip(p, 1e-300, None))
            return -np.sum(p * logp, axis=-1)
        ls = np.broadcast_to(self.log_std, self.mean.shape)
        return np.sum(ls + 0.5 * (LOG_2PI + 1.0), axis=-1)


class Policy:
    """MLP policy. Discrete: logits head. Continuous: mean head plus a
    state-independent log-std vector ``pi.log_std``."""

    def __init__(self, store: ParamStore, obs_dim: int, action_dim: int, discrete: bool,
                 hidden=(64, 64), activation: str = "tanh", init_log_std: float = 0.0):
        self.store = store
        self.discrete = discrete
        self.action_dim = action_dim
        self.spec = MLPSpec([obs_dim, *hidden, action_dim], activation)
        if "pi.W0" not in store:
            nd.init_mlp(store, "pi", self.spec.sizes, zero_last=True)
            if not discrete:
                store.add("pi.log_std", np.full((1, action_dim), init_log_std))

    @property
    def names(self) -> list[str]:
        return self.store.names("pi.")

    def _head(self, obs, tape=None):
        params = self.store.view("pi.", tape)
        out = nd.forward_mlp(params, np.asarray(obs, dtype=self.store.dtype), self.spec)
        return out, params.get("log_std")

    def distribution(self, obs) -> PolicyDistribution:
        with nd.no_grad():
            out, ls = self._head(obs)
        if self.discrete:
            return PolicyDistribution(logits=out.data.astype(np.float64))
        return PolicyDistribution(mean=out.data.astype(np.float64),
                                  log_std=ls.data.astype(np.float64))

    def sample_action(self, obs, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        dist = self.distribution(obs)
        if self.discrete:
            p = dist.probs()
            u = rng.random(len(p))
            a = np.minimum((p.cumsum(axis=1) < u[:, None]).sum(axis=1), p.shape[1] - 1)
        else:
            a = dist.mean + np.exp(dist.log_std) * rng.standard_normal(dist.mean.shape)
        return a, dist.log_prob(a)

    def log_prob_graph(self, obs, actions, tape: Tape) -> tuple[Tensor, Tensor]:
        """(log pi(a|s), entropy) as taped tensors of shape (n,)."""
        out, ls = self._head(obs, tape)
        if self.discrete:
            logp_all = nd.log_softmax(out)
            logp = nd.take_rows(logp_all, np.asarray(actions))
            ent = nd.neg(nd.sum_(nd.mul(nd.exp(logp_all), logp_all), axis=1))
            return logp, ent
        a = np.asarray(actions, dtype=self.store.dtype)
        std = nd.exp(ls)
        zz = nd.div(nd.sub(a, out), std)
        per = nd.sub(nd.add(nd.mul(nd.square(zz), -0.5), nd.neg(ls)), 0.5 * LOG_2PI)
        logp = nd.sum_(per, axis=1)
        ent = nd.add(nd.mul(nd.sum_(ls, axis=1), np.ones(len(a), dtype=self.store.dtype)),
                     0.5 * (LOG_2PI + 1.0) * self.action_dim)
        return logp, ent


def ppo_surrogate(logp_new, logp_old, adv, clip_eps: float = 0.2) -> Tensor:
    """mean min(rho A, clip(rho, 1-eps, 1+eps) A) with rho = exp(new - old)."""
    logp_new = nd.const(logp_new)
    ratio = nd.exp(nd.sub(logp_new, np.asarray(logp_old, dtype=logp_new.data.dtype)))
    adv = np.asarray(adv, dtype=logp_new.data.dtype)
    unclipped = nd.mul(ratio, adv)
    clipped = nd.mul(nd.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv)
    return nd.mean(nd.minimum(unclipped, clipped))


def ppo_loss(logp_new, logp_old, adv, clip_eps: float = 0.2) -> float:
    """Numeric value of the clipped surrogate (to be ascended)."""
    with nd.no_grad():
        return float(ppo_surrogate(np.asarray(logp_new, dtype=np.float64), logp_old, adv,
                                   clip_eps).data)


def entropy_bonus(dist: PolicyDistribution) -> float:
    return float(np.mean(dist.entropy()))


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        return adv - adv.mean() if adv.size else adv
    return (adv - adv.mean()) / (adv.std() + eps)
