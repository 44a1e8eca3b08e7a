"""Small environments with known structure.

All environments follow ``reset(seed) -> EnvState`` and
``step(action) -> (EnvState, reward, done)``. Tabular ones also expose
``tabular_mdp(policy_probs, gamma)`` producing the Markov reward process
induced by a fixed policy, for exact return distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bellman import TabularMDP


@dataclass
class EnvState:
    observation: np.ndarray
    done: bool = False
    info: dict = field(default_factory=dict)


class StepAfterDone(RuntimeError):
    pass


class Env:
    obs_dim: int
    n_actions: int | None = None  # None for continuous
    action_dim: int = 1
    max_steps: int

    def __init__(self):
        self.rng = np.random.default_rng(0)
        self.t = 0
        self.done = True

    @property
    def discrete(self) -> bool:
        return self.n_actions is not None

    def reset(self, seed: int | None = None) -> EnvState:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        self._reset()
        return EnvState(self.observe(), False, {"t": 0})

    def step(self, action) -> tuple[EnvState, float, bool]:
        if self.done:
            raise StepAfterDone(f"{type(self).__name__}.step called on a finished episode")
        reward, terminal = self._step(action)
        self.t += 1
        self.done = terminal or self.t >= self.max_steps
        info = {"t": self.t, "terminal": terminal}
        return EnvState(self.observe(), self.done, info), float(reward), self.done

    def _reset(self): raise NotImplementedError
    def _step(self, action): raise NotImplementedError
    def observe(self) -> np.ndarray: raise NotImplementedError


def _one_hot(i: int, n: int) -> np.ndarray:
    v = np.zeros(n, dtype=np.float32)
    v[i] = 1.0
    return v


class ChainWorld(Env):
    """States 0..N-1, start at 0. Action 0 moves left, 1 moves right.

    Bumping into the left wall pays ``distractor``; entering N-1 pays
    ``goal_reward`` and ends the episode. Episodes are capped at 4N steps.
    """

    def __init__(self, n: int = 20, distractor: float = 0.001, goal_reward: float = 1.0,
                 max_steps: int | None = None):
        super().__init__()
        if n < 2:
            raise ValueError("ChainWorld needs at least 2 states")
        self.n = n
        self.distractor = distractor
        self.goal_reward = goal_reward
        self.obs_dim = n
        self.n_actions = 2
        self.max_steps = 4 * n if max_steps is None else max_steps
        self.pos = 0

    def _reset(self):
        self.pos = 0

    def _step(self, action):
        if int(action) == 1:
            self.pos += 1
            if self.pos == self.n - 1:
                return self.goal_reward, True
            return 0.0, False
        if self.pos == 0:
            return self.distractor, False
        self.pos -= 1
        return 0.0, False

    def observe(self):
        return _one_hot(self.pos, self.n)

    def tabular_mdp(self, policy_probs, gamma: float) -> TabularMDP:
        """Ignores the step cap; the goal state is absorbing with zero reward."""
        pr = np.broadcast_to(np.asarray(policy_probs, dtype=np.float64), (self.n, 2))
        goal = self.n - 1
        outcomes = []
        for s in range(self.n - 1):
            left = (pr[s, 0], self.distractor if s == 0 else 0.0, max(s - 1, 0))
            nxt = s + 1
            right = (pr[s, 1], self.goal_reward if nxt == goal else 0.0, nxt)
            outcomes.append([left, right])
        outcomes.append([(1.0, 0.0, goal)])
        return TabularMDP(outcomes, gamma)

    def random_policy_score(self, p_right: float = 0.5) -> float:
        """Expected undiscounted episode score under an i.i.d. policy,
        including the step cap, by dynamic programming over (position, time)."""
        v = np.zeros(self.n)
        for _ in range(self.max_steps):
            new = np.zeros(self.n)
            for s in range(self.n - 1):
                right = self.goal_reward if s + 1 == self.n - 1 else v[s + 1]
                left = self.distractor + v[0] if s == 0 else v[s - 1]
                new[s] = p_right * right + (1 - p_right) * left
            v = new
        return float(v[0])


class SparseGrid(Env):
    """W x H grid, start at (0, 0), single rewarding goal at (W-1, H-1)."""

    MOVES = np.array([(0, 1), (0, -1), (1, 0), (-1, 0)])

    def __init__(self, width: int = 5, height: int = 5, goal_reward: float = 1.0,
                 max_steps: int | None = None):
        super().__init__()
        self.w, self.h = width, height
        self.goal_reward = goal_reward
        self.obs_dim = width * height
        self.n_actions = 4
        self.max_steps = 4 * width * height if max_steps is None else max_steps
        self.pos = np.zeros(2, dtype=np.int64)

    def _reset(self):
        self.pos = np.zeros(2, dtype=np.int64)

    def _step(self, action):
        self.pos = np.clip(self.pos + self.MOVES[int(action)], 0, [self.w - 1, self.h - 1])
        if self.pos[0] == self.w - 1 and self.pos[1] == self.h - 1:
            return self.goal_reward, True
        return 0.0, False

    def observe(self):
        return _one_hot(int(self.pos[0] * self.h + self.pos[1]), self.obs_dim)


class BimodalBandit(Env):
    """One-step episodes from a single state.

    Action 0 pays +1 or -1 with equal probability. With ``safe_arm`` a
    second action pays ``safe_reward`` deterministically.
    """

    def __init__(self, safe_arm: bool = False, safe_reward: float = 0.0, win: float = 1.0,
                 lose: float = -1.0, p_win: float = 0.5):
        super().__init__()
        self.safe_arm = safe_arm
        self.safe_reward = safe_reward
        self.win, self.lose, self.p_win = win, lose, p_win
        self.obs_dim = 1
        self.n_actions = 2 if safe_arm else 1
        self.max_steps = 1

    def _reset(self):
        pass

    def _step(self, action):
        if int(action) == 1:
            return self.safe_reward, True
        return (self.win if self.rng.random() < self.p_win else self.lose), True

    def observe(self):
        return np.ones(1, dtype=np.float32)

    def tabular_mdp(self, policy_probs, gamma: float) -> TabularMDP:
        pr = np.broadcast_to(np.asarray(policy_probs, dtype=np.float64), (self.n_actions,))
        outs = [(pr[0] * self.p_win, self.win, 1), (pr[0] * (1 - self.p_win), self.lose, 1)]
        if self.safe_arm:
            outs.append((pr[1], self.safe_reward, 1))
        return TabularMDP([outs, [(1.0, 0.0, 1)]], gamma)


class NoisyChain(Env):
    """Deterministic walk right through ``n`` states; each step pays
    ``mean_reward +/- noise`` with equal probability. Single dummy action."""

    def __init__(self, n: int = 5, mean_reward: float = 0.0, noise: float = 1.0):
        super().__init__()
        self.n = n
        self.mean_reward, self.noise = mean_reward, noise
        self.obs_dim = n
        self.n_actions = 1
        self.max_steps = n
        self.pos = 0

    def _reset(self):
        self.pos = 0

    def _step(self, action):
        sign = 1.0 if self.rng.random() < 0.5 else -1.0
        self.pos += 1
        return self.mean_reward + sign * self.noise, self.pos == self.n

    def observe(self):
        return _one_hot(min(self.pos, self.n - 1), self.n)

    def tabular_mdp(self, policy_probs, gamma: float) -> TabularMDP:
        hi, lo = self.mean_reward + self.noise, self.mean_reward - self.noise
        outcomes = [[(0.5, hi, s + 1), (0.5, lo, s + 1)] for s in range(self.n)]
        outcomes.append([(1.0, 0.0, self.n)])
        return TabularMDP(outcomes, gamma)


class PointMass1D(Env):
    """x' = clip(x + 0.1 a, -2, 2) with a clipped to [-1, 1];
    reward -(x'^2 + 0.01 a^2); start x ~ U(-1, 1)."""

    def __init__(self, max_steps: int = 100, dt: float = 0.1):
        super().__init__()
        self.obs_dim = 1
        self.n_actions = None
        self.action_dim = 1
        self.max_steps = max_steps
        self.dt = dt
        self.x = 0.0

    def _reset(self):
        self.x = float(self.rng.uniform(-1.0, 1.0))

    def _step(self, action):
        a = float(np.clip(np.asarray(action, dtype=np.float64).ravel()[0], -1.0, 1.0))
        self.x = float(np.clip(self.x + self.dt * a, -2.0, 2.0))
        return -(self.x ** 2 + 0.01 * a * a), False

    def observe(self):
        return np.array([self.x / 2.0], dtype=np.float32)


ENVS = {
    "chain": ChainWorld,
    "grid": SparseGrid,
    "bandit": BimodalBandit,
    "noisychain": NoisyChain,
    "pointmass": PointMass1D,
}


def make_env(name: str, **params) -> Env:
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**params)
