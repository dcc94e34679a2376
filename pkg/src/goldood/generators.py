"""Latent generators fit on hidden GCN embeddings.

Two variants share one surface (``kind``, ``dim``, ``store``):

* :class:`VaeModel` -- Gaussian encoder/decoder trained on the ELBO; samples
  decode ``z ~ N(0, I)``.
* :class:`LdmModel` -- a DDPM over embedding vectors with an MLP noise
  predictor; samples run the full ancestral reverse chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ContractError
from .models import glorot
from .numerics import ParamStore, Tape

TIME_EMBED_DIM = 16


def linear_betas(T, beta1=1e-4, betaT=0.02):
    if T < 1:
        raise ContractError("T must be >= 1")
    if not 0.0 < beta1 < betaT < 1.0:
        raise ContractError(f"need 0 < beta1 < betaT < 1, got {beta1}, {betaT}")
    return np.linspace(beta1, betaT, T)


def _affine(tape, x, p, w, b):
    return tape.add(tape.matmul(x, p[w]), p[b])


def _as_node(tape, x):
    return x if isinstance(x, (int, np.integer)) else tape.const(x)


@dataclass
class VaeModel:
    dim: int
    latent: int
    enc_hidden: int = 512
    dec_hidden: int = 256
    kl_weight: float = 1.0
    store: ParamStore = field(default_factory=ParamStore)
    kind = "vae"

    @classmethod
    def init(cls, dim, latent=None, enc_hidden=512, dec_hidden=256, kl_weight=1.0, rng=None):
        rng = np.random.default_rng(rng)
        latent = latent or max(1, dim // 2)
        vae = cls(dim, latent, enc_hidden, dec_hidden, kl_weight)
        s = vae.store
        s.add("vae.enc.W1", glorot(rng, dim, enc_hidden))
        s.add("vae.enc.b1", np.zeros((1, enc_hidden)))
        s.add("vae.mu.W", glorot(rng, enc_hidden, latent))
        s.add("vae.mu.b", np.zeros((1, latent)))
        s.add("vae.logvar.W", glorot(rng, enc_hidden, latent))
        s.add("vae.logvar.b", np.zeros((1, latent)))
        s.add("vae.dec.W1", glorot(rng, latent, dec_hidden))
        s.add("vae.dec.b1", np.zeros((1, dec_hidden)))
        s.add("vae.dec.W2", glorot(rng, dec_hidden, dim))
        s.add("vae.dec.b2", np.zeros((1, dim)))
        return vae

    def encode(self, tape, h):
        p = tape.params(self.store)
        hidden = tape.relu(_affine(tape, _as_node(tape, h), p, "vae.enc.W1", "vae.enc.b1"))
        mu = _affine(tape, hidden, p, "vae.mu.W", "vae.mu.b")
        logvar = _affine(tape, hidden, p, "vae.logvar.W", "vae.logvar.b")
        return mu, logvar

    def decode(self, tape, z):
        p = tape.params(self.store)
        hidden = tape.relu(_affine(tape, _as_node(tape, z), p, "vae.dec.W1", "vae.dec.b1"))
        return _affine(tape, hidden, p, "vae.dec.W2", "vae.dec.b2")


def vae_kl(tape, mu, logvar):
    """Per-row ``KL(N(mu, exp(logvar)) || N(0, I))`` as an ``(m, 1)`` column."""
    inner = tape.sub(tape.add(tape.square(mu), tape.exp(logvar)), tape.add(logvar, tape.const(1.0)))
    return tape.scale(tape.sum(inner, axis=1), 0.5)


def vae_loss(H, vae, tape, rng):
    """Mean over rows of squared reconstruction error plus weighted KL."""
    H = np.asarray(H, dtype=np.float64)
    m = H.shape[0]
    if m == 0:
        raise ContractError("vae_loss needs at least one embedding")
    mu, logvar = vae.encode(tape, H)
    eps = rng.standard_normal((m, vae.latent))
    z = tape.add(mu, tape.mul(tape.exp(tape.scale(logvar, 0.5)), tape.const(eps)))
    recon = vae.decode(tape, z)
    rec = tape.sum(tape.square(tape.sub(tape.const(H), recon)), axis=1)
    per_row = tape.add(rec, tape.scale(vae_kl(tape, mu, logvar), vae.kl_weight))
    return tape.scale(tape.sum(per_row), 1.0 / m)


@dataclass
class LdmModel:
    dim: int
    T: int = 600
    beta1: float = 1e-4
    betaT: float = 0.02
    hidden: int = 128
    layers: int = 2
    time_embedding: str = "scalar"
    store: ParamStore = field(default_factory=ParamStore)
    kind = "ldm"

    def __post_init__(self):
        self.betas = linear_betas(self.T, self.beta1, self.betaT)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)
        if self.time_embedding not in ("scalar", "sinusoidal"):
            raise ContractError(f"unknown time embedding {self.time_embedding!r}")

    @classmethod
    def init(cls, dim, T=600, beta1=1e-4, betaT=0.02, hidden=128, layers=2, time_embedding="scalar", rng=None):
        if layers < 2:
            raise ContractError("denoiser needs at least 2 affine layers")
        rng = np.random.default_rng(rng)
        ldm = cls(dim, T, beta1, betaT, hidden, layers, time_embedding)
        tdim = 1 if time_embedding == "scalar" else TIME_EMBED_DIM
        s = ldm.store
        s.add("ldm.Wx1", glorot(rng, dim, hidden))
        s.add("ldm.Wt1", glorot(rng, tdim, hidden))
        s.add("ldm.b1", np.zeros((1, hidden)))
        for l in range(2, layers + 1):
            out = dim if l == layers else hidden
            s.add(f"ldm.W{l}", glorot(rng, hidden, out))
            s.add(f"ldm.b{l}", np.zeros((1, out)))
        return ldm

    def abar(self, t):
        """``alpha_bar_t`` for integer ``t`` in ``0..T`` (``alpha_bar_0 = 1``)."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.clip(t, 1, self.T) - 1])

    def time_features(self, t):
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        if self.time_embedding == "scalar":
            return t / self.T
        half = TIME_EMBED_DIM // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
        angles = t * freqs[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    def denoise(self, tape, h_t, t):
        """Predicted noise for rows ``h_t`` at integer timesteps ``t``."""
        p = tape.params(self.store)
        x = tape.add(
            tape.add(tape.matmul(_as_node(tape, h_t), p["ldm.Wx1"]), tape.matmul(tape.const(self.time_features(t)), p["ldm.Wt1"])),
            p["ldm.b1"],
        )
        for l in range(2, self.layers + 1):
            x = _affine(tape, tape.relu(x), p, f"ldm.W{l}", f"ldm.b{l}")
        return x

    def predict_noise(self, h_t, t):
        tape = Tape()
        return tape.value(self.denoise(tape, h_t, t))


LatentGenerator = Union[VaeModel, LdmModel]


def forward_noise(h0, t, eps, ldm):
    """Closed-form noising ``sqrt(abar_t) h0 + sqrt(1 - abar_t) eps``."""
    t_arr = np.asarray(t)
    if (t_arr < 1).any() or (t_arr > ldm.T).any():
        raise ContractError(f"timestep must lie in [1, {ldm.T}]")
    ab = ldm.abar(t_arr)
    if t_arr.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(h0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def ldm_training_loss(H, ldm, tape, rng):
    """Noise-prediction MSE at uniformly drawn timesteps, mean over rows."""
    H = np.asarray(H, dtype=np.float64)
    m = H.shape[0]
    if m == 0:
        raise ContractError("ldm_training_loss needs at least one embedding")
    t = rng.integers(1, ldm.T + 1, size=m)
    eps = rng.standard_normal(H.shape)
    h_t = forward_noise(H, t, eps, ldm)
    pred = ldm.denoise(tape, h_t, t)
    err = tape.sum(tape.square(tape.sub(tape.const(eps), pred)))
    return tape.scale(err, 1.0 / m)


def generator_loss(H, gen, tape, rng):
    if gen.kind == "vae":
        return vae_loss(H, gen, tape, rng)
    return ldm_training_loss(H, gen, tape, rng)


def sample_pseudo_ood(gen, m, rng):
    """Draw ``m`` synthetic embeddings from Gaussian noise."""
    if m == 0:
        return np.zeros((0, gen.dim))
    if gen.kind == "vae":
        z = rng.standard_normal((m, gen.latent))
        tape = Tape()
        return tape.value(gen.decode(tape, z)).copy()
    x = rng.standard_normal((m, gen.dim))
    for t in range(gen.T, 0, -1):
        beta = gen.betas[t - 1]
        eps_hat = gen.predict_noise(x, np.full(m, t))
        x = (x - beta / np.sqrt(1.0 - gen.alpha_bar[t - 1]) * eps_hat) / np.sqrt(gen.alphas[t - 1])
        if t > 1:
            x = x + np.sqrt(beta) * rng.standard_normal(x.shape)
    return x


def make_generator(kind, dim, rng=None, **kw):
    if kind == "vae":
        return VaeModel.init(dim, rng=rng, **kw)
    if kind == "ldm":
        return LdmModel.init(dim, rng=rng, **kw)
    raise ContractError(f"generator kind must be 'vae' or 'ldm', got {kind!r}")
