"""Conditional generative model of state-return distributions.

Four networks share one ParamStore under separate prefixes:

* ``prior``  s -> (mean, log_std) of p(Z|s)
* ``enc``    (x, s) -> (mean, log_std) of q(Z|x, s)
* ``gen``    (z, s) -> g, deterministic decoder
* ``disc``   (x, z, s) -> logit of D(x, z, s)

The discriminator is trained to score prior/generator joints high and
encoder joints low; the encoder and prior are trained against it with the
generator frozen, and the generator alone minimizes squared reconstruction
error on encoder latents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndmath as nd
from .ndmath import MLPSpec, ParamStore, Tape, Tensor

LOG_STD_MIN = float(np.log(1e-6))
LOG_STD_MAX = float(np.log(1e3))
D_EPS = 1e-7


@dataclass
class DiagGaussianParams:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise nd.ShapeError(f"mean {self.mean.shape} vs log_std {self.log_std.shape}")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


@dataclass
class LatentSample:
    z: np.ndarray
    source_params: DiagGaussianParams
    noise: np.ndarray


@dataclass
class ReturnModelConfig:
    state_dim: int
    latent_dim: int = 8
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"


def _clamped_log_std(raw: Tensor) -> Tensor:
    return nd.clip(raw, LOG_STD_MIN, LOG_STD_MAX)


def _reparam(mean: Tensor, log_std: Tensor, noise: np.ndarray) -> Tensor:
    return nd.add(mean, nd.mul(nd.exp(log_std), noise.astype(mean.data.dtype)))


class ReturnModel:
    """Networks and losses; parameters live in ``store``."""

    def __init__(self, cfg: ReturnModelConfig, store: ParamStore, zero_last: bool = False):
        self.cfg = cfg
        self.store = store
        l, sd, h = cfg.latent_dim, cfg.state_dim, list(cfg.hidden)
        self.specs = {
            "prior": MLPSpec([sd, *h, 2 * l], cfg.activation),
            "enc": MLPSpec([1 + sd, *h, 2 * l], cfg.activation),
            "gen": MLPSpec([l + sd, *h, 1], cfg.activation),
            "disc": MLPSpec([1 + l + sd, *h, 1], cfg.activation),
        }
        for name, spec in self.specs.items():
            if f"{name}.W0" not in store:
                nd.init_mlp(store, name, spec.sizes, zero_last=zero_last)

    # -- parameter groups --------------------------------------------------
    @property
    def groups(self) -> dict[str, list[str]]:
        return {k: self.store.names(k + ".") for k in self.specs}

    def _net(self, name: str, tape: Tape | None, trainable: bool, inp) -> Tensor:
        params = self.store.view(name + ".", tape, trainable)
        return nd.forward_mlp(params, inp, self.specs[name])

    def _check_states(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=self.store.dtype))
        if s.shape[1] != self.cfg.state_dim:
            raise nd.ShapeError(f"state features {s.shape[1]} != configured {self.cfg.state_dim}")
        return s

    def _col(self, x) -> np.ndarray:
        return np.asarray(x, dtype=self.store.dtype).reshape(-1, 1)

    # -- graph builders (used by losses and by the pure helpers below) ------
    def prior_graph(self, s, tape=None, trainable=True) -> tuple[Tensor, Tensor]:
        out = self._net("prior", tape, trainable, self._check_states(s))
        l = self.cfg.latent_dim
        return nd.columns(out, 0, l), _clamped_log_std(nd.columns(out, l, 2 * l))

    def encoder_graph(self, x, s, tape=None, trainable=True) -> tuple[Tensor, Tensor]:
        s = self._check_states(s)
        inp = np.concatenate([self._col(x), s], axis=1)
        out = self._net("enc", tape, trainable, inp)
        l = self.cfg.latent_dim
        return nd.columns(out, 0, l), _clamped_log_std(nd.columns(out, l, 2 * l))

    def generator_graph(self, z, s, tape=None, trainable=True) -> Tensor:
        s = self._check_states(s)
        inp = nd.concat([nd.const(z), nd.const(s)], axis=1)
        out = self._net("gen", tape, trainable, inp)
        return nd.columns(out, 0, 1)

    def discriminator_graph(self, x, z, s, tape=None, trainable=True) -> Tensor:
        s = self._check_states(s)
        x = x if isinstance(x, Tensor) else nd.const(self._col(x))
        inp = nd.concat([x, nd.const(z), nd.const(s)], axis=1)
        logit = self._net("disc", tape, trainable, inp)
        return nd.clip(nd.sigmoid(logit), D_EPS, 1.0 - D_EPS)

    # -- pure evaluation ------------------------------------------------------
    def prior_params(self, s) -> DiagGaussianParams:
        with nd.no_grad():
            m, ls = self.prior_graph(s)
        return DiagGaussianParams(m.data, ls.data)

    def encoder_params(self, x, s) -> DiagGaussianParams:
        with nd.no_grad():
            m, ls = self.encoder_graph(x, s)
        return DiagGaussianParams(m.data, ls.data)

    def generate(self, z, s) -> np.ndarray:
        with nd.no_grad():
            return self.generator_graph(z, s).data[:, 0]

    def sample_return(self, s, rng: np.random.Generator) -> tuple[LatentSample, np.ndarray]:
        """Draw z ~ p(Z|s) by reparameterization and decode g = G(z, s)."""
        params = self.prior_params(s)
        noise = rng.standard_normal(params.mean.shape).astype(self.store.dtype)
        z = params.mean + params.std * noise
        return LatentSample(z, params, noise), self.generate(z, s)

    def encode(self, x, s, rng: np.random.Generator) -> tuple[LatentSample, DiagGaussianParams]:
        params = self.encoder_params(x, s)
        noise = rng.standard_normal(params.mean.shape).astype(self.store.dtype)
        z = params.mean + params.std * noise
        return LatentSample(z, params, noise), params

    def discriminator_score(self, x, z, s) -> np.ndarray:
        with nd.no_grad():
            return self.discriminator_graph(x, z, s).data[:, 0]

    # -- losses ---------------------------------------------------------------
    def discriminator_loss(self, x, s, enc_noise, prior_noise, tape=None) -> Tensor:
        """Ascent objective for D: mean log D(x~, z, s) + log(1 - D(x, z~, s)).

        Latents and the decoded x~ are constants here; only ``disc`` leaves
        are registered on ``tape``.
        """
        _nonempty(x)
        s = self._check_states(s)
        with nd.no_grad():
            em, els = self.encoder_graph(x, s)
            z_enc = _reparam(em, els, enc_noise).data
            pm, pls = self.prior_graph(s)
            z_pri = _reparam(pm, pls, prior_noise).data
            x_gen = self.generator_graph(z_pri, s).data
        d_pri = self.discriminator_graph(x_gen, z_pri, s, tape)
        d_enc = self.discriminator_graph(x, z_enc, s, tape)
        return nd.mean(nd.add(nd.log(d_pri), nd.log(nd.sub(1.0, d_enc))))

    def encoder_prior_loss(self, x, s, enc_noise, prior_noise, tape=None) -> Tensor:
        """Ascent objective for encoder and prior:
        mean log(1 - D(x~, z, s)) + log D(x, z~, s).

        The discriminator and generator parameters are constants, but the
        generator is still evaluated on the tape so the gradient reaches the
        prior through x~ = G(z, s).
        """
        _nonempty(x)
        s = self._check_states(s)
        em, els = self.encoder_graph(x, s, tape)
        z_enc = _reparam(em, els, enc_noise)
        pm, pls = self.prior_graph(s, tape)
        z_pri = _reparam(pm, pls, prior_noise)
        x_gen = nd.columns(self._net("gen", tape, False, nd.concat([z_pri, nd.const(s)])), 0, 1)
        d_pri = self._disc_frozen(x_gen, z_pri, s, tape)
        d_enc = self._disc_frozen(nd.const(self._col(x)), z_enc, s, tape)
        return nd.mean(nd.add(nd.log(nd.sub(1.0, d_pri)), nd.log(d_enc)))

    def _disc_frozen(self, x: Tensor, z: Tensor, s: np.ndarray, tape) -> Tensor:
        inp = nd.concat([x, z, nd.const(s)], axis=1)
        logit = self._net("disc", tape, False, inp)
        return nd.clip(nd.sigmoid(logit), D_EPS, 1.0 - D_EPS)

    def reconstruction_loss(self, x, s, enc_noise, tape=None) -> Tensor:
        """mean (x - G(z~, s))^2 with z~ from the frozen encoder."""
        _nonempty(x)
        s = self._check_states(s)
        with nd.no_grad():
            em, els = self.encoder_graph(x, s)
            z_enc = _reparam(em, els, enc_noise).data
        g = self.generator_graph(z_enc, s, tape)
        return nd.mean(nd.square(nd.sub(self._col(x), g)))


def _nonempty(x) -> None:
    if np.size(x) == 0:
        raise ValueError("empty batch")
