"""Bellman targets, GAE, 1-D Wasserstein distances and a tabular
distributional dynamic-programming oracle.

The oracle represents each state's return law as masses on a fixed uniform
grid and applies the state-return operator ``R(s) + gamma * G(S')`` exactly
over reward/next-state outcomes, re-gridding with two-point linear mass
interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# ----------------------------------------------------------------------
# trajectory targets

@dataclass
class TrajectorySegment:
    """One worker's rollout.

    ``values`` has one more entry than ``rewards``: the last one is the
    bootstrap sample taken at the state following the final step.
    """

    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    gamma: float
    lam: float = 1.0

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        n = len(self.rewards)
        if len(self.values) != n + 1 or len(self.dones) != n:
            raise ValueError(f"segment lengths: rewards {n}, values {len(self.values)}, "
                             f"dones {len(self.dones)}")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"gamma={self.gamma}, lambda={self.lam} out of range")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite return samples in segment")

    def __len__(self) -> int:
        return len(self.rewards)


def bellman_target(seg: TrajectorySegment, t: int, k: int | None = None) -> float:
    """k-step target sum_{i<j} gamma^i r_{t+i} + gamma^j g_{t+j}.

    ``j`` stops at k, at the end of the segment, or after a terminal step
    (in which case the bootstrap term is dropped).
    """
    n = len(seg)
    if not 0 <= t < n:
        raise IndexError(f"step {t} outside segment of length {n}")
    k = n if k is None else k
    x, disc = 0.0, 1.0
    for i in range(t, min(t + k, n)):
        x += disc * seg.rewards[i]
        disc *= seg.gamma
        if seg.dones[i]:
            return x
    return x + disc * seg.values[min(t + k, n)]


def bellman_targets(seg: TrajectorySegment, k: int | None = None) -> np.ndarray:
    """All k-step targets of a segment (vectorized over the k = n case)."""
    n = len(seg)
    if k is None or k >= n:
        out = np.empty(n)
        nxt = seg.values[n]
        for t in range(n - 1, -1, -1):
            nxt = seg.rewards[t] + seg.gamma * nxt * (not seg.dones[t])
            out[t] = nxt
        return out
    return np.array([bellman_target(seg, t, k) for t in range(n)])


def td_errors(seg: TrajectorySegment) -> np.ndarray:
    notdone = ~seg.dones
    return seg.rewards + seg.gamma * seg.values[1:] * notdone - seg.values[:-1]


def gae(seg: TrajectorySegment, k: int | None = None) -> np.ndarray:
    """Generalized advantage estimates, optionally truncated to k TD terms."""
    n = len(seg)
    delta = td_errors(seg)
    decay = seg.gamma * seg.lam * (~seg.dones)
    if k is None or k >= n:
        adv = np.empty(n)
        acc = 0.0
        for t in range(n - 1, -1, -1):
            acc = delta[t] + decay[t] * acc
            adv[t] = acc
        return adv
    adv = np.zeros(n)
    for t in range(n):
        w = 1.0
        for i in range(t, min(t + k, n)):
            adv[t] += w * delta[i]
            w *= decay[i]
            if w == 0.0:
                break
    return adv


# ----------------------------------------------------------------------
# 1-D Wasserstein distances

def _as_weighted(a) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, TabularReturnDistribution):
        return a.support, a.probs
    if isinstance(a, tuple):
        v, w = a
        return np.asarray(v, dtype=np.float64), np.asarray(w, dtype=np.float64)
    v = np.asarray(a, dtype=np.float64).ravel()
    return v, np.full(v.size, 1.0 / max(v.size, 1))


def wasserstein_1d(a, b, p: int = 1) -> float:
    """Exact W_p between two 1-D laws via their quantile functions.

    ``a`` and ``b`` are each a TabularReturnDistribution, a ``(values,
    weights)`` pair, or a plain sample array (uniform weights).
    """
    av, aw = _as_weighted(a)
    bv, bw = _as_weighted(b)
    if av.size == 0 or bv.size == 0:
        raise ValueError("empty distribution")
    if p < 1:
        raise ValueError(f"order p={p} must be >= 1")
    if av.size == bv.size and not isinstance(a, (tuple, TabularReturnDistribution)) \
            and not isinstance(b, (tuple, TabularReturnDistribution)):
        d = np.abs(np.sort(av) - np.sort(bv))
        return float(np.mean(d ** p) ** (1.0 / p))
    ia, ib = np.argsort(av, kind="stable"), np.argsort(bv, kind="stable")
    av, aw = av[ia], aw[ia] / aw.sum()
    bv, bw = bv[ib], bw[ib] / bw.sum()
    ca, cb = np.cumsum(aw), np.cumsum(bw)
    ca[-1] = cb[-1] = 1.0
    levels = np.union1d(ca, cb)
    lo = np.concatenate([[0.0], levels[:-1]])
    width = levels - lo
    keep = width > 0
    mid = (lo + levels)[keep] / 2
    qa = av[np.minimum(np.searchsorted(ca, mid), av.size - 1)]
    qb = bv[np.minimum(np.searchsorted(cb, mid), bv.size - 1)]
    return float(np.sum(width[keep] * np.abs(qa - qb) ** p) ** (1.0 / p))


# ----------------------------------------------------------------------
# tabular oracle

@dataclass
class TabularReturnDistribution:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.support.shape != self.probs.shape or self.support.ndim != 1:
            raise ValueError("support and probs must be matching 1-D arrays")
        if np.any(np.diff(self.support) <= 0):
            raise ValueError("support must be strictly increasing")
        if np.any(self.probs < -1e-12) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probs must be a distribution (sum={self.probs.sum()!r})")

    @property
    def mean(self) -> float:
        return float(self.support @ self.probs)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.support, size=n, p=self.probs / self.probs.sum())


def make_grid(r_min: float, r_max: float, gamma: float, m: int = 256,
              margin: float = 0.05) -> np.ndarray:
    """Uniform grid covering every reachable discounted return, padded by
    ``margin`` of the span on each side."""
    if gamma >= 1.0:
        raise ValueError("grid construction needs gamma < 1")
    lo = min(r_min, 0.0) / (1.0 - gamma)
    hi = max(r_max, 0.0) / (1.0 - gamma)
    span = max(hi - lo, 1e-6)
    return np.linspace(lo - margin * span, hi + margin * span, m)


@dataclass
class TabularMDP:
    """A finite Markov reward process induced by a fixed policy.

    ``outcomes[s]`` is a list of ``(prob, reward, next_state)`` triples;
    rewards may be correlated with the next state.
    """

    outcomes: list[list[tuple[float, float, int]]]
    gamma: float
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        for s, outs in enumerate(self.outcomes):
            total = sum(p for p, _, _ in outs)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"state {s}: outcome probabilities sum to {total}")
            for p, r, s2 in outs:
                if p < 0 or not 0 <= s2 < self.n_states or not np.isfinite(r):
                    raise ValueError(f"state {s}: bad outcome {(p, r, s2)}")

    @classmethod
    def from_tables(cls, reward_atoms, reward_probs, transitions, gamma: float) -> "TabularMDP":
        """Independent reward R(s) (finite atoms) and next state P(s'|s)."""
        P = np.asarray(transitions, dtype=np.float64)
        if not np.allclose(P.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")
        outcomes = []
        for s in range(P.shape[0]):
            outs = []
            for r, pr in zip(reward_atoms[s], reward_probs[s]):
                for s2 in np.flatnonzero(P[s]):
                    outs.append((float(pr * P[s, s2]), float(r), int(s2)))
            outcomes.append(outs)
        return cls(outcomes, gamma)

    @property
    def n_states(self) -> int:
        return len(self.outcomes)

    @property
    def transition_matrix(self) -> np.ndarray:
        P = np.zeros((self.n_states, self.n_states))
        for s, outs in enumerate(self.outcomes):
            for p, _, s2 in outs:
                P[s, s2] += p
        return P

    @property
    def expected_rewards(self) -> np.ndarray:
        return np.array([sum(p * r for p, r, _ in outs) for outs in self.outcomes])

    def reward_range(self) -> tuple[float, float]:
        rs = [r for outs in self.outcomes for _, r, _ in outs]
        return min(rs), max(rs)

    def values(self) -> np.ndarray:
        """Expected returns by solving the linear Bellman system."""
        P = self.transition_matrix
        return np.linalg.solve(np.eye(self.n_states) - self.gamma * P, self.expected_rewards)


def project_onto_grid(values: np.ndarray, weights: np.ndarray,
                      support: np.ndarray) -> tuple[np.ndarray, bool]:
    """Split each atom's mass between its two neighbouring grid points in
    proportion to proximity. Atoms outside the grid go to the nearest end;
    the flag reports whether that happened."""
    m = support.size
    lo, hi = support[0], support[-1]
    tol = 1e-9 * (hi - lo)
    clipped = bool(np.any(values < lo - tol) | np.any(values > hi + tol))
    pos = (np.clip(values, lo, hi) - lo) / (hi - lo) * (m - 1)
    left = np.clip(np.floor(pos).astype(np.int64), 0, m - 1)
    right = np.minimum(left + 1, m - 1)
    frac = pos - left
    out = np.zeros(m)
    np.add.at(out, left, weights * (1.0 - frac))
    np.add.at(out, right, weights * frac)
    return out, clipped


@dataclass
class PushResult:
    dists: list[TabularReturnDistribution]
    projected_outside: bool


def push_distribution(mdp: TabularMDP, omega: list[TabularReturnDistribution]) -> PushResult:
    """One application of the state-return distributional Bellman operator."""
    if len(omega) != mdp.n_states:
        raise ValueError(f"{len(omega)} distributions for {mdp.n_states} states")
    support = omega[0].support
    flag = False
    out = []
    for outs in mdp.outcomes:
        vals = []
        wts = []
        for p, r, s2 in outs:
            if p == 0.0:
                continue
            vals.append(r + mdp.gamma * support)
            wts.append(p * omega[s2].probs)
        probs, clipped = project_onto_grid(np.concatenate(vals), np.concatenate(wts), support)
        flag |= clipped
        probs /= probs.sum()
        out.append(TabularReturnDistribution(support, probs))
    return PushResult(out, flag)


def fixpoint(mdp: TabularMDP, support: np.ndarray, tol: float = 1e-10,
             max_iter: int = 100_000) -> list[TabularReturnDistribution]:
    """Iterate the operator from point masses at zero until the sup-W1
    change drops below ``tol``."""
    zero = np.zeros(support.size)
    zero[np.argmin(np.abs(support))] = 1.0
    omega = [TabularReturnDistribution(support, zero.copy()) for _ in range(mdp.n_states)]
    for _ in range(max_iter):
        new = push_distribution(mdp, omega).dists
        change = sup_wasserstein(omega, new, 1)
        omega = new
        if change < tol:
            break
    return omega


def sup_wasserstein(w1, w2, p: int = 1) -> float:
    return max(wasserstein_1d(a, b, p) for a, b in zip(w1, w2))


@dataclass
class ContractionCertificate:
    before: float
    after: float
    ratio: float | None
    gamma: float
    tolerance: float
    exact_match: bool = False

    @property
    def passed(self) -> bool:
        if self.exact_match:
            return self.after <= self.tolerance
        return self.ratio <= self.gamma + self.tolerance


def contraction_certificate(mdp: TabularMDP, omega1, omega2, p: int = 1,
                            tolerance: float = 0.02) -> ContractionCertificate:
    """sup-W_p between two distribution tables before and after one backup."""
    before = sup_wasserstein(omega1, omega2, p)
    after = sup_wasserstein(push_distribution(mdp, omega1).dists,
                            push_distribution(mdp, omega2).dists, p)
    if before == 0.0:
        return ContractionCertificate(before, after, None, mdp.gamma, tolerance, True)
    return ContractionCertificate(before, after, after / before, mdp.gamma, tolerance)


def random_mdp(rng: np.random.Generator, n_states: int, gamma: float,
               max_atoms: int = 3) -> TabularMDP:
    """Dirichlet transitions with 1..max_atoms reward atoms in [-1, 1] per state."""
    P = rng.dirichlet(np.full(n_states, 0.5), size=n_states)
    atoms, probs = [], []
    for _ in range(n_states):
        k = int(rng.integers(1, max_atoms + 1))
        atoms.append(rng.uniform(-1.0, 1.0, size=k))
        probs.append(rng.dirichlet(np.ones(k)))
    return TabularMDP.from_tables(atoms, probs, P, gamma)


def random_distributions(rng: np.random.Generator, support: np.ndarray,
                         n: int) -> list[TabularReturnDistribution]:
    """Each law puts Dirichlet masses on a random subset of grid cells."""
    out = []
    for _ in range(n):
        k = int(rng.integers(1, min(12, support.size + 1)))
        cells = rng.choice(support.size, size=k, replace=False)
        probs = np.zeros(support.size)
        probs[cells] = rng.dirichlet(np.ones(k))
        out.append(TabularReturnDistribution(support, probs))
    return out


@dataclass
class OracleReport:
    trials: int
    gammas: list[float]
    p_orders: list[int]
    max_ratio_excess: float
    worst: list[dict]
    passed: bool
    tolerance: float

    def lines(self) -> list[str]:
        out = [f"trials = {self.trials}",
               f"gamma = {', '.join(str(g) for g in self.gammas)}",
               f"p = {', '.join(str(p) for p in self.p_orders)}",
               f"tolerance = {self.tolerance}"]
        for row in self.worst:
            out.append("max_ratio[gamma={gamma},p={p}] = {ratio:.6f}".format(**row))
        out.append(f"result = {'pass' if self.passed else 'fail'}")
        return out


def run_oracle(trials: int = 100, gammas=(0.5, 0.9, 0.99), p_orders=(1, 2),
               m: int = 256, states=(3, 8), tolerance: float = 0.02,
               seed: int = 0) -> OracleReport:
    """Random contraction trials; trial i uses gamma ``gammas[i % len]``."""
    rng = np.random.default_rng(seed)
    worst = {(g, p): 0.0 for g in gammas for p in p_orders}
    ok = True
    for i in range(trials):
        gamma = gammas[i % len(gammas)]
        n = int(rng.integers(states[0], states[1] + 1))
        mdp = random_mdp(rng, n, gamma)
        support = make_grid(*mdp.reward_range(), gamma=gamma, m=m)
        w1 = random_distributions(rng, support, n)
        w2 = random_distributions(rng, support, n)
        for p in p_orders:
            cert = contraction_certificate(mdp, w1, w2, p, tolerance)
            ok &= cert.passed
            if cert.ratio is not None:
                worst[(gamma, p)] = max(worst[(gamma, p)], cert.ratio)
    rows = [{"gamma": g, "p": p, "ratio": r} for (g, p), r in worst.items()]
    excess = max((r["ratio"] - r["gamma"] for r in rows), default=0.0)
    return OracleReport(trials, list(gammas), list(p_orders), excess, rows, bool(ok), tolerance)
