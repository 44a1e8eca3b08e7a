"""Information-gain curiosity reward.

The information gain at a state is the KL divergence between the encoder
posterior conditioned on the Bellman target and the one conditioned on the
predicted return. Rewards are clipped, standardized against running
statistics of past gains, floored at zero, capped and scaled by a
coefficient decaying like sqrt(log t / t).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bellman import TrajectorySegment, gae
from .return_model import DiagGaussianParams

T0 = 2


class RunningStats:
    """Welford mean/variance; ``update`` merges a whole batch at once.

    ``forget`` in [0, 1) discounts the accumulated count and second moment
    before each merge, so old batches fade geometrically. 0 is exact Welford.
    """

    def __init__(self, forget: float = 0.0):
        if not 0.0 <= forget < 1.0:
            raise ValueError(f"forget={forget} must lie in [0, 1)")
        self.forget = forget
        self.count = 0.0
        self.mean = 0.0
        self.m2 = 0.0

    @property
    def var(self) -> float:
        return self.m2 / self.count if self.count > 0 else 0.0

    @property
    def std(self) -> float:
        return float(np.sqrt(self.var))

    def update(self, values) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        n = values.size
        if n == 0:
            return
        bmean = float(values.mean())
        bm2 = float(np.sum((values - bmean) ** 2))
        if self.forget:
            self.count *= 1.0 - self.forget
            self.m2 *= 1.0 - self.forget
        total = self.count + n
        delta = bmean - self.mean
        self.mean += delta * n / total
        self.m2 += bm2 + delta * delta * self.count * n / total
        self.count = total

    def snapshot(self) -> "RunningStats":
        out = RunningStats(self.forget)
        out.count, out.mean, out.m2 = self.count, self.mean, self.m2
        return out

    def state_dict(self) -> dict:
        return {"forget": self.forget, "count": self.count, "mean": self.mean, "m2": self.m2}

    @classmethod
    def from_state(cls, state: dict) -> "RunningStats":
        out = cls(state.get("forget", 0.0))
        out.count, out.mean, out.m2 = state["count"], state["mean"], state["m2"]
        return out


@dataclass
class CuriosityConfig:
    eta: float = 1.0
    u_cap: float = 2.0
    t: int = T0
    eps: float = 1e-8

    def __post_init__(self):
        if self.eta < 0 or self.u_cap <= 0:
            raise ValueError(f"need eta >= 0 and u_cap > 0, got {self.eta}, {self.u_cap}")
        if self.t < T0:
            raise ValueError(f"step counter t={self.t} must start at {T0}")


def information_gain(post_x: DiagGaussianParams, post_g: DiagGaussianParams) -> np.ndarray:
    """KL(N(mx, sx^2) || N(mg, sg^2)) summed over the last axis."""
    for p in (post_x, post_g):
        if not (np.all(np.isfinite(p.mean)) and np.all(np.isfinite(p.log_std))):
            raise ValueError("non-finite posterior parameters")
    lx = np.asarray(post_x.log_std, dtype=np.float64)
    lg = np.asarray(post_g.log_std, dtype=np.float64)
    dm = np.asarray(post_x.mean, dtype=np.float64) - np.asarray(post_g.mean, dtype=np.float64)
    kl = lg - lx + 0.5 * (np.exp(2 * (lx - lg)) + dm * dm * np.exp(-2 * lg)) - 0.5
    return np.maximum(kl.sum(axis=-1), 0.0)


def decay_coefficient(cfg: CuriosityConfig) -> float:
    t = float(cfg.t)
    return cfg.eta * float(np.sqrt(np.log(t) / t))


def curiosity_reward(u, cfg: CuriosityConfig, stats: RunningStats,
                     update: bool = True) -> np.ndarray:
    """Map gains to rewards in [0, eta_t * u_cap].

    Statistics are read before the batch and updated with the clipped gains
    afterwards. With no history yet, the batch itself seeds the statistics.
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0):
        raise ValueError("information gain must be nonnegative")
    ref = stats
    if stats.count == 0:
        ref = RunningStats()
        ref.update(u)
    mu, sigma = ref.mean, ref.std
    clipped = np.minimum(u, mu + cfg.u_cap * sigma)
    scaled = np.maximum(0.0, (clipped - mu) / max(sigma, cfg.eps))
    rc = decay_coefficient(cfg) * np.minimum(scaled, cfg.u_cap)
    if update:
        stats.update(clipped)
    return rc


def augment_advantage(seg: TrajectorySegment, rc, k: int | None = None) -> np.ndarray:
    """GAE recomputed with rewards r + r^c; the segment is left untouched."""
    rc = np.asarray(rc, dtype=np.float64)
    if rc.shape != seg.rewards.shape:
        raise ValueError(f"{rc.shape[0] if rc.ndim else 0} curiosity rewards for "
                         f"{len(seg)} steps")
    aug = TrajectorySegment(seg.rewards + rc, seg.values, seg.dones, seg.gamma, seg.lam)
    return gae(aug, k)
