"""Rollout, target computation and minibatch updates.

Workers step in lock-step: at every unroll step all W environments are
advanced in worker-index order and the frozen models are evaluated once on
the stacked observations. This is the fork-join schedule with the join
inlined, and keeps runs bit-reproducible.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import ndmath as nd
from .bellman import TrajectorySegment, bellman_targets, gae
from .curiosity import (CuriosityConfig, RunningStats, T0, augment_advantage,
                        curiosity_reward, decay_coefficient, information_gain)
from .envs import Env
from .ndmath import MLPSpec, ParamStore, Tape, Tensor
from .policy import Policy, normalize_advantages, ppo_surrogate
from .return_model import ReturnModel, ReturnModelConfig

ALGORITHMS = ("bdpg", "bdpg_naive", "ppo_qr")
TARGETS = ("k_step", "gae_plus_g")
METRIC_COLUMNS = ("update_idx", "env_steps", "score_mean", "score_std", "policy_loss",
                  "d_loss", "eg_loss", "recon_loss", "ig_mean", "ig_max", "rc_mean",
                  "entropy", "eta_t", "wall_ms")


class NumericalError(FloatingPointError):
    pass


@dataclass
class AlgoConfig:
    algorithm: str = "bdpg"
    gamma: float = 0.99
    lam: float = 0.95
    k: int = 0  # bootstrap length; 0 means the unroll length
    unroll: int = 128
    workers: int = 16
    clip_eps: float = 0.2
    eta: float = 1.0
    u_cap: float = 2.0
    ig_forget: float = 0.5
    lr_policy: float = 3e-4
    lr_disc: float = 1e-4
    lr_enc: float = 1e-4
    lr_gen: float = 1e-3
    lr_qr: float = 1e-3
    minibatch: int = 256
    epochs: int = 4
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    n_quantiles: int = 32
    huber_kappa: float = 1.0
    target: str = "k_step"
    total_steps: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma={self.gamma} must lie in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda={self.lam} must lie in [0, 1]")
        if self.eta < 0 or self.u_cap <= 0 or self.clip_eps <= 0:
            raise ValueError("eta >= 0, u_cap > 0 and clip_eps > 0 required")
        if not 0.0 <= self.ig_forget < 1.0:
            raise ValueError(f"ig_forget={self.ig_forget} must lie in [0, 1)")
        for name in ("unroll", "workers", "minibatch", "epochs", "n_quantiles"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.k < 0 or self.total_steps < 0:
            raise ValueError("k and total_steps must be nonnegative")

    @property
    def bootstrap(self) -> int:
        return self.k or self.unroll

    @property
    def curiosity(self) -> bool:
        return self.algorithm == "bdpg" and self.eta > 0


@dataclass
class TransitionRecord:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    logp: float
    z: np.ndarray | None
    g: float


@dataclass
class Batch:
    """Stacked rollout of W workers over k steps; arrays are (W, k, ...)."""

    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    logp: np.ndarray
    z: np.ndarray | None
    g: np.ndarray  # (W, k + 1), last column is the bootstrap sample
    version: int

    @property
    def workers(self) -> int:
        return self.rewards.shape[0]

    @property
    def steps(self) -> int:
        return self.rewards.shape[1]

    def __len__(self) -> int:
        return self.rewards.size

    def record(self, w: int, t: int) -> TransitionRecord:
        return TransitionRecord(self.obs[w, t], self.actions[w, t], float(self.rewards[w, t]),
                                self.next_obs[w, t], bool(self.dones[w, t]),
                                float(self.logp[w, t]),
                                None if self.z is None else self.z[w, t], float(self.g[w, t]))

    def segment(self, w: int, gamma: float, lam: float, rewards=None) -> TrajectorySegment:
        r = self.rewards[w] if rewards is None else rewards
        return TrajectorySegment(r, self.g[w], self.dones[w], gamma, lam)


@dataclass
class AdvantageBatch:
    adv: np.ndarray
    x: np.ndarray
    u: np.ndarray
    rc: np.ndarray
    adv_c: np.ndarray
    bootstrap: np.ndarray
    eta_t: float
    # instrumentation: which reward stream fed each quantity
    x_rewards: str = "original"
    adv_c_rewards: str = "augmented"


@dataclass
class Episode:
    end_step: int
    score: float
    terminal: bool
    worker: int


def quantile_midpoints(m: int) -> np.ndarray:
    return (2 * np.arange(1, m + 1) - 1) / (2.0 * m)


def quantile_huber_loss(pred: Tensor, target, taus, kappa: float = 1.0) -> Tensor:
    """mean over samples and quantiles of |tau - 1{u<0}| * Huber_kappa(u) / kappa,
    u = target - pred."""
    dtype = pred.data.dtype
    target = np.asarray(target, dtype=dtype).reshape(-1, 1)
    u = nd.sub(target, pred)
    absu = nd.abs_(u)
    quad = nd.mul(nd.square(u), 0.5)
    lin = nd.mul(nd.sub(absu, 0.5 * kappa), kappa)
    hub = nd.where(np.abs(u.data) <= kappa, quad, lin)
    w = np.abs(np.asarray(taus, dtype=dtype)[None, :] - (u.data < 0))
    return nd.mean(nd.mul(hub, (w / kappa).astype(dtype)))


class Trainer:
    """Owns parameters, environments and the update counter."""

    def __init__(self, env_factory, algo: AlgoConfig, model: ReturnModelConfig | None = None,
                 policy_hidden=(64, 64), store: ParamStore | None = None):
        self.algo = algo
        self.envs: list[Env] = [env_factory() for _ in range(algo.workers)]
        env = self.envs[0]
        ss = np.random.SeedSequence(algo.seed)
        init_seq, noise_seq, *env_seqs = ss.spawn(2 + algo.workers)
        self.store = store or ParamStore(seed=int(init_seq.generate_state(1)[0]))
        self.rng = np.random.default_rng(noise_seq)
        self.env_seeds = [int(s.generate_state(1)[0]) for s in env_seqs]
        self.policy = Policy(self.store, env.obs_dim,
                             env.n_actions if env.discrete else env.action_dim,
                             env.discrete, hidden=policy_hidden)
        self.model = None
        self.qr_spec = None
        if algo.algorithm == "ppo_qr":
            self.qr_spec = MLPSpec([env.obs_dim, *(model.hidden if model else (64, 64)),
                                    algo.n_quantiles])
            if "qr.W0" not in self.store:
                nd.init_mlp(self.store, "qr", self.qr_spec.sizes, zero_last=True)
            self.taus = quantile_midpoints(algo.n_quantiles)
        else:
            mcfg = model or ReturnModelConfig(state_dim=env.obs_dim)
            mcfg.state_dim = env.obs_dim
            self.model = ReturnModel(mcfg, self.store)
        self.stats = RunningStats(algo.ig_forget)
        self.t = T0
        self.version = 0
        self.env_steps = 0
        self.group_steps: dict[str, int] = {}
        self.episodes: list[Episode] = []
        self._obs = np.stack([e.reset(seed).observation for e, seed in zip(self.envs, self.env_seeds)])
        self._scores = np.zeros(algo.workers)

    # ------------------------------------------------------------------
    # return estimates

    def sample_returns(self, obs: np.ndarray) -> tuple[np.ndarray | None, np.ndarray]:
        if self.model is not None:
            latent, g = self.model.sample_return(obs, self.rng)
            return latent.z, g.astype(np.float64)
        return None, self.quantiles(obs).mean(axis=1)

    def quantiles(self, obs) -> np.ndarray:
        with nd.no_grad():
            out = nd.forward_mlp(self.store.view("qr."), np.asarray(obs, dtype=np.float32),
                                 self.qr_spec)
        return out.data.astype(np.float64)

    # ------------------------------------------------------------------
    # rollout

    def collect(self, steps: int | None = None) -> Batch:
        k = steps or max(self.algo.unroll, self.algo.k)
        W = self.algo.workers
        obs_dim = self._obs.shape[1]
        obs = np.zeros((W, k, obs_dim), dtype=np.float32)
        next_obs = np.zeros_like(obs)
        adim = () if self.policy.discrete else (self.policy.action_dim,)
        actions = np.zeros((W, k) + adim, dtype=np.int64 if self.policy.discrete else np.float64)
        rewards = np.zeros((W, k))
        dones = np.zeros((W, k), dtype=bool)
        logp = np.zeros((W, k))
        zs = None
        g = np.zeros((W, k + 1))
        for t in range(k):
            cur = self._obs
            a, lp = self.policy.sample_action(cur, self.rng)
            z, gt = self.sample_returns(cur)
            if z is not None:
                if zs is None:
                    zs = np.zeros((W, k, z.shape[1]), dtype=np.float32)
                zs[:, t] = z
            obs[:, t], actions[:, t], logp[:, t], g[:, t] = cur, a, lp, gt
            new_obs = np.empty_like(cur)
            for w, env in enumerate(self.envs):
                state, r, done = env.step(a[w])
                rewards[w, t], dones[w, t] = r, done
                next_obs[w, t] = state.observation
                self._scores[w] += r
                if done:
                    self.episodes.append(Episode(self.env_steps + t * W + w + 1,
                                                 float(self._scores[w]),
                                                 bool(state.info.get("terminal")), w))
                    self._scores[w] = 0.0
                    state = env.reset()
                new_obs[w] = state.observation
            self._obs = new_obs
        _, g[:, k] = self.sample_returns(self._obs)
        self.env_steps += W * k
        return Batch(obs, next_obs, actions, rewards, dones, logp, zs, g, self.version)

    # ------------------------------------------------------------------
    # targets

    def compute_targets(self, batch: Batch) -> AdvantageBatch:
        a = self.algo
        W, k = batch.workers, batch.steps
        adv = np.zeros((W, k))
        x = np.zeros((W, k))
        kb = a.bootstrap
        for w in range(W):
            seg = batch.segment(w, a.gamma, a.lam)
            adv[w] = gae(seg, kb)
            if a.target == "gae_plus_g":
                x[w] = adv[w] + batch.g[w, :k]
            else:
                x[w] = bellman_targets(TrajectorySegment(seg.rewards, seg.values, seg.dones,
                                                         a.gamma, 1.0), kb)
        u = np.zeros(W * k)
        rc = np.zeros((W, k))
        cfg = CuriosityConfig(eta=a.eta, u_cap=a.u_cap, t=self.t)
        eta_t = decay_coefficient(cfg) if a.curiosity else 0.0
        if self.model is not None:
            s = batch.obs.reshape(W * k, -1)
            u = information_gain(self.model.encoder_params(x.ravel(), s),
                                 self.model.encoder_params(batch.g[:, :k].ravel(), s))
            if a.curiosity:
                rc = curiosity_reward(u, cfg, self.stats).reshape(W, k)
        adv_c = np.zeros_like(adv)
        for w in range(W):
            adv_c[w] = augment_advantage(batch.segment(w, a.gamma, a.lam), rc[w], kb)
        return AdvantageBatch(adv, x, u.reshape(W, k), rc, adv_c, batch.g[:, k].copy(), eta_t)

    # ------------------------------------------------------------------
    # updates

    def _adam(self, group: str, names: list[str], lr: float) -> None:
        self.group_steps[group] = self.group_steps.get(group, 0) + 1
        nd.adam_step(self.store, names, lr, max_grad_norm=self.algo.max_grad_norm,
                     step=self.group_steps[group])

    def _step(self, group: str, names: list[str], lr: float, loss_fn, sign: float) -> float:
        """Build the loss on a fresh tape, backprop ``sign * loss`` and step."""
        tape = Tape()
        with tape:
            obj = loss_fn(tape)
            loss = nd.mul(obj, sign)
        value = float(obj.data)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite {group} loss")
        grads = nd.backward(tape, loss)
        for n in names:
            self.store.grads[n][...] = grads.get(n, 0.0)
        self._adam(group, names, lr)
        return value

    def update_return_model(self, x, s, enc_noise, prior_noise, lrs=None) -> dict[str, float]:
        """One discriminator, one encoder/prior and one generator step."""
        a = self.algo
        m = self.model
        lrs = lrs or {"disc": a.lr_disc, "enc": a.lr_enc, "gen": a.lr_gen}
        groups = m.groups
        d = self._step("disc", groups["disc"], lrs["disc"],
                       lambda tp: m.discriminator_loss(x, s, enc_noise, prior_noise, tp), -1.0)
        eg = self._step("enc_prior", groups["enc"] + groups["prior"], lrs["enc"],
                        lambda tp: m.encoder_prior_loss(x, s, enc_noise, prior_noise, tp), -1.0)
        rec = self._step("gen", groups["gen"], lrs["gen"],
                         lambda tp: m.reconstruction_loss(x, s, enc_noise, tp), 1.0)
        return {"d_loss": d, "eg_loss": eg, "recon_loss": rec}

    def update_quantiles(self, x, s) -> float:
        a = self.algo

        def loss(tp):
            pred = nd.forward_mlp(self.store.view("qr.", tp), s, self.qr_spec)
            return quantile_huber_loss(pred, x, self.taus, a.huber_kappa)

        return self._step("qr", self.store.names("qr."), a.lr_qr, loss, 1.0)

    def update_policy(self, s, actions, logp_old, adv) -> tuple[float, float]:
        a = self.algo
        ent_val = [0.0]

        def loss(tp):
            logp, ent = self.policy.log_prob_graph(s, actions, tp)
            ent_mean = nd.mean(ent)
            ent_val[0] = float(ent_mean.data)
            surr = ppo_surrogate(logp, logp_old, adv, a.clip_eps)
            return nd.add(surr, nd.mul(ent_mean, a.entropy_coef))

        obj = self._step("pi", self.policy.names, a.lr_policy, loss, -1.0)
        return obj - a.entropy_coef * ent_val[0], ent_val[0]

    def update(self, batch: Batch, targets: AdvantageBatch) -> dict[str, float]:
        if batch.version != self.version:
            raise RuntimeError(f"batch collected with parameters v{batch.version}, "
                               f"trainer is at v{self.version}")
        a = self.algo
        n = len(batch)
        s = batch.obs.reshape(n, -1)
        acts = batch.actions.reshape((n,) + batch.actions.shape[2:])
        logp_old = batch.logp.ravel()
        x = targets.x.ravel()
        adv = normalize_advantages(targets.adv_c.ravel())
        sums: dict[str, list[float]] = {}
        B = min(a.minibatch, n)
        for _ in range(a.epochs):
            perm = self.rng.permutation(n)
            for lo in range(0, n, B):
                idx = perm[lo:lo + B]
                if self.model is not None:
                    l = self.model.cfg.latent_dim
                    e1 = self.rng.standard_normal((len(idx), l)).astype(np.float32)
                    e2 = self.rng.standard_normal((len(idx), l)).astype(np.float32)
                    for key, val in self.update_return_model(x[idx], s[idx], e1, e2).items():
                        sums.setdefault(key, []).append(val)
                else:
                    sums.setdefault("recon_loss", []).append(self.update_quantiles(x[idx], s[idx]))
                pl, ent = self.update_policy(s[idx], acts[idx], logp_old[idx], adv[idx])
                sums.setdefault("policy_loss", []).append(pl)
                sums.setdefault("entropy", []).append(ent)
        self.version += 1
        self.t += 1
        return {k: float(np.mean(v)) for k, v in sums.items()}

    # ------------------------------------------------------------------
    # loop

    def train_round(self) -> dict[str, float]:
        start = time.perf_counter()
        n_episodes = len(self.episodes)
        batch = self.collect()
        targets = self.compute_targets(batch)
        losses = self.update(batch, targets)
        scores = [e.score for e in self.episodes[n_episodes:]]
        row = {c: float("nan") for c in METRIC_COLUMNS}
        row.update(losses)
        row.update({
            "update_idx": self.version,
            "env_steps": self.env_steps,
            "score_mean": float(np.mean(scores)) if scores else float("nan"),
            "score_std": float(np.std(scores)) if scores else float("nan"),
            "ig_mean": float(targets.u.mean()),
            "ig_max": float(targets.u.max()),
            "rc_mean": float(targets.rc.mean()),
            "eta_t": targets.eta_t,
            "wall_ms": (time.perf_counter() - start) * 1000.0,
        })
        return row

    def train(self, total_steps: int | None = None, callback=None, stop=None) -> list[dict]:
        total = self.algo.total_steps if total_steps is None else total_steps
        rows = []
        while self.env_steps < total:
            row = self.train_round()
            rows.append(row)
            if callback is not None:
                callback(row)
            if stop is not None and stop(self):
                break
        return rows

    def first_success(self, threshold: float) -> int | None:
        for ep in self.episodes:
            if ep.score >= threshold:
                return ep.end_step
        return None

    def checkpoint_meta(self) -> dict:
        return {"algo": asdict(self.algo), "t": self.t, "version": self.version,
                "env_steps": self.env_steps, "group_steps": self.group_steps,
                "stats": self.stats.state_dict(),
                "latent_dim": self.model.cfg.latent_dim if self.model else None}


def evaluate(policy: Policy, env: Env, episodes: int, seed: int = 0,
             greedy: bool = False) -> np.ndarray:
    """Undiscounted episode scores of a frozen policy."""
    rng = np.random.default_rng(seed)
    scores = np.zeros(episodes)
    for i in range(episodes):
        state = env.reset(seed + i)
        done = False
        while not done:
            obs = state.observation[None]
            if greedy and policy.discrete:
                a = np.argmax(policy.distribution(obs).logits, axis=1)
            else:
                a, _ = policy.sample_action(obs, rng)
            state, r, done = env.step(a[0])
            scores[i] += r
    return scores
