"""Skill-conditioned modules: SMM, DIAYN, APS."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..nets import mlp
from .base import (IntrinsicModule, cat, l2_normalize, l2_normalize_backward, log_softmax,
                   particle_entropy_reward, ridge_solve)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SMMConfig:
    skill_dim: int = 4
    rep_dim: int = 512
    hidden_dim: int = 1024
    vae_latent: int = 32
    vae_lr: float = 1e-2
    discrim_lr: float = 1e-3
    skill_every: int = 50


@dataclass
class DIAYNConfig:
    skill_dim: int = 16
    rep_dim: int = 512
    hidden_dim: int = 1024
    lr: float = 1e-4
    skill_every: int = 50


@dataclass
class APSConfig:
    sf_dim: int = 10
    hidden_dim: int = 1024
    lr: float = 1e-4
    k: int = 12
    avg_top_k: bool = True
    lstsq_batch: int = 4096
    ridge: float = 1e-6
    skill_every: int = 50


def _skill_index(skill: np.ndarray) -> np.ndarray:
    return np.argmax(skill, axis=-1)


def _cross_entropy(logits: np.ndarray, idx: np.ndarray):
    """Mean CE loss, its logits gradient, and per-row log q(idx)."""
    logp = log_softmax(logits)
    rows = np.arange(len(idx))
    picked = logp[rows, idx]
    grad = np.exp(logp)
    grad[rows, idx] -= 1.0
    return float(-np.mean(picked)), grad / len(idx), picked


class DIAYN(IntrinsicModule):
    """Reward log q(w|z) - log p(w) from a skill discriminator on a learned trunk."""

    kind, category, skill_kind = "diayn", "competence", "onehot"

    def __init__(self, obs_dim: int, action_dim: int, config: DIAYNConfig, rng: np.random.Generator):
        super().__init__()
        c = self.config = config
        self.skill_dim, self.skill_every = c.skill_dim, c.skill_every
        self.nets["trunk"] = mlp([obs_dim, c.rep_dim], rng, c.lr, output="tanh")
        self.nets["discriminator"] = mlp([c.rep_dim, c.hidden_dim, c.hidden_dim, c.skill_dim], rng, c.lr)

    def logits(self, obs) -> np.ndarray:
        return self.nets["discriminator"](self.nets["trunk"](obs))

    def log_q(self, obs, skill) -> np.ndarray:
        logp = log_softmax(self.logits(obs))
        return logp[np.arange(len(logp)), _skill_index(skill)]

    def rewards(self, batch) -> np.ndarray:
        return self.log_q(batch.next_obs, batch.skill) + math.log(self.skill_dim)

    def accuracy(self, obs, skill) -> float:
        return float(np.mean(np.argmax(self.logits(obs), axis=-1) == _skill_index(skill)))

    def update(self, batch) -> dict:
        trunk, disc = self.nets["trunk"], self.nets["discriminator"]
        z, tt = trunk.forward(batch.next_obs)
        logits, td = disc.forward(z)
        idx = _skill_index(batch.skill)
        loss, g, _ = _cross_entropy(logits, idx)
        g_disc, dz = disc.backward(td, g, input_grad=True)
        disc.step(g_disc)
        trunk.step(trunk.backward(tt, dz))
        return {"discriminator_loss": loss, "discriminator_acc": float(np.mean(np.argmax(logits, -1) == idx))}


def smm_reward(log_p_star, log_q, log_p_w, log_d):
    """log p*(z) - log q_w(z) - log p(w) + log d(w|z)."""
    return log_p_star - log_q - log_p_w + log_d


class SMM(IntrinsicModule):
    """State marginal matching with a skill-conditioned VAE density and a skill discriminator.

    The VAE models the trunk representation with gradients stopped, so the
    trunk is shaped by the discriminator alone.
    """

    kind, category, skill_kind = "smm", "competence", "onehot"

    def __init__(self, obs_dim: int, action_dim: int, config: SMMConfig, rng: np.random.Generator,
                 obs_volume: float = 1.0):
        super().__init__()
        c = self.config = config
        self.skill_dim, self.skill_every = c.skill_dim, c.skill_every
        self.log_p_star = -math.log(obs_volume)
        self.nets["trunk"] = mlp([obs_dim, c.rep_dim], rng, c.discrim_lr, output="tanh")
        self.nets["discriminator"] = mlp([c.rep_dim, c.hidden_dim, c.skill_dim], rng, c.discrim_lr)
        self.nets["vae_encoder"] = mlp([c.rep_dim + c.skill_dim, c.hidden_dim, 2 * c.vae_latent], rng, c.vae_lr)
        self.nets["vae_decoder"] = mlp([c.vae_latent + c.skill_dim, c.hidden_dim, c.rep_dim], rng, c.vae_lr)
        self.noise_rng = rng

    def _vae_stats(self, z, skill):
        h, tape = self.nets["vae_encoder"].forward(cat(z, skill))
        L = self.config.vae_latent
        return h[:, :L], np.clip(h[:, L:], -10.0, 10.0), tape

    def log_density(self, z, skill) -> np.ndarray:
        """ELBO at the posterior mean: log N(z; dec(mu), I) - KL(q(l|z) || N(0, I))."""
        mu, logvar, _ = self._vae_stats(z, skill)
        recon = self.nets["vae_decoder"](cat(mu, skill))
        D = z.shape[1]
        log_lik = -0.5 * np.sum((z - recon) ** 2, axis=-1) - 0.5 * D * _LOG_2PI
        kl = 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)
        return log_lik - kl

    def reward_terms(self, batch) -> dict:
        z = self.nets["trunk"](batch.next_obs)
        logp = log_softmax(self.nets["discriminator"](z))
        idx = _skill_index(batch.skill)
        n = len(z)
        return {"log_p_star": np.full(n, self.log_p_star),
                "log_q": self.log_density(z, batch.skill),
                "log_p_w": np.full(n, -math.log(self.skill_dim)),
                "log_d": logp[np.arange(n), idx]}

    def rewards(self, batch) -> np.ndarray:
        t = self.reward_terms(batch)
        return smm_reward(t["log_p_star"], t["log_q"], t["log_p_w"], t["log_d"])

    def update(self, batch) -> dict:
        c = self.config
        trunk, disc = self.nets["trunk"], self.nets["discriminator"]
        venc, vdec = self.nets["vae_encoder"], self.nets["vae_decoder"]
        B = len(batch.obs)
        w = batch.skill
        z, tt = trunk.forward(batch.next_obs)
        logits, td = disc.forward(z)
        d_loss, g, _ = _cross_entropy(logits, _skill_index(w))
        g_disc, dz = disc.backward(td, g, input_grad=True)
        disc.step(g_disc)
        trunk.step(trunk.backward(tt, dz))

        # VAE on the (detached) representation
        h, te = venc.forward(cat(z, w))
        L = c.vae_latent
        mu, raw_logvar = h[:, :L], h[:, L:]
        logvar = np.clip(raw_logvar, -10.0, 10.0)
        std = np.exp(0.5 * logvar)
        eps = self.noise_rng.standard_normal(mu.shape)
        lat = mu + std * eps
        recon, tdec = vdec.forward(cat(lat, w))
        err = recon - z
        kl = 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)
        vae_loss = float(np.mean(0.5 * np.sum(err * err, axis=-1) + kl))
        g_dec, d_in = vdec.backward(tdec, err / B, input_grad=True)
        d_lat = d_in[:, :L]
        d_mu = d_lat + mu / B
        d_logvar = (d_lat * eps * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / B)
        d_logvar *= (raw_logvar > -10.0) & (raw_logvar < 10.0)
        vdec.step(g_dec)
        venc.step(venc.backward(te, np.concatenate([d_mu, d_logvar], axis=1)))
        return {"discriminator_loss": d_loss, "vae_loss": vae_loss}


class APS(IntrinsicModule):
    """Particle entropy plus the successor-feature alignment w . phi(s)/|phi(s)|."""

    kind, category, skill_kind = "aps", "competence", "sphere"

    def __init__(self, obs_dim: int, action_dim: int, config: APSConfig, rng: np.random.Generator):
        super().__init__()
        c = self.config = config
        self.skill_dim, self.skill_every = c.sf_dim, c.skill_every
        self.nets["features"] = mlp([obs_dim, c.hidden_dim, c.hidden_dim, c.sf_dim], rng, c.lr)

    def features(self, obs) -> np.ndarray:
        return l2_normalize(self.nets["features"](obs))[0]

    def entropy_term(self, phi: np.ndarray) -> np.ndarray:
        return particle_entropy_reward(phi, self.config.k, self.config.avg_top_k)

    @staticmethod
    def alignment_term(phi: np.ndarray, skill: np.ndarray) -> np.ndarray:
        return np.sum(phi * skill, axis=-1)

    def rewards(self, batch) -> np.ndarray:
        phi = self.features(batch.next_obs)
        return self.entropy_term(phi) + self.alignment_term(phi, batch.skill)

    def update(self, batch) -> dict:
        net = self.nets["features"]
        u, tape = net.forward(batch.next_obs)
        phi, norm = l2_normalize(u)
        loss = float(-np.mean(np.sum(phi * batch.skill, axis=-1)))
        d_phi = -batch.skill / len(u)
        net.step(net.backward(tape, l2_normalize_backward(phi, norm, d_phi)))
        return {"sf_loss": loss}

    def infer_task(self, next_obs, rewards, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return infer_task_vector(self.features(next_obs), rewards, self.config.ridge, rng)


def infer_task_vector(features, rewards, ridge: float = 1e-6,
                      rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Ridge regression of rewards on features, projected to the unit sphere.

    A zero solution has no direction; a uniform random unit vector is
    returned in that case.
    """
    w = ridge_solve(features, rewards, ridge)
    n = np.linalg.norm(w)
    if n > 0 and np.isfinite(n):
        return w / n
    rng = rng or np.random.default_rng(0)
    w = rng.standard_normal(len(w))
    return w / np.linalg.norm(w)
