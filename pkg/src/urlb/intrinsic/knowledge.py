"""Prediction-error modules: ICM, Disagreement, RND."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nets import add_grads, mlp
from .base import IntrinsicModule, RunningNormalizer, cat


@dataclass
class ICMConfig:
    rep_dim: int = 512  # 0 -> identity encoder (z = obs)
    hidden_dim: int = 1024
    lr: float = 1e-4


@dataclass
class DisagreementConfig:
    ensemble_size: int = 5
    hidden_dim: int = 1024
    lr: float = 1e-4


@dataclass
class RNDConfig:
    rep_dim: int = 512
    hidden_dim: int = 1024
    lr: float = 1e-4
    obs_clip: float = 5.0


class ICM(IntrinsicModule):
    """Forward-model surprise, log(1 + |g(z, a) - z'|^2).

    The encoder is shaped by the inverse model only; the forward model sees
    detached representations.
    """

    kind, category = "icm", "knowledge"

    def __init__(self, obs_dim: int, action_dim: int, config: ICMConfig, rng: np.random.Generator):
        super().__init__()
        c = self.config = config
        rep = c.rep_dim or obs_dim
        if c.rep_dim:
            self.nets["encoder"] = mlp([obs_dim, rep], rng, c.lr, output="tanh")
        self.nets["forward"] = mlp([rep + action_dim, c.hidden_dim, c.hidden_dim, rep], rng, c.lr)
        self.nets["inverse"] = mlp([2 * rep, c.hidden_dim, c.hidden_dim, action_dim], rng, c.lr, output="tanh")
        self.rep = rep

    def encode(self, obs):
        enc = self.nets.get("encoder")
        return np.asarray(obs, dtype=np.float64) if enc is None else enc(obs)

    def prediction_error(self, batch) -> np.ndarray:
        z, z_next = self.encode(batch.obs), self.encode(batch.next_obs)
        pred = self.nets["forward"](cat(z, batch.action))
        return np.sum((pred - z_next) ** 2, axis=-1)

    def rewards(self, batch) -> np.ndarray:
        return np.log1p(self.prediction_error(batch))

    def update(self, batch) -> dict:
        fwd, inv = self.nets["forward"], self.nets["inverse"]
        enc = self.nets.get("encoder")
        B = len(batch.obs)
        if enc is None:
            z, z_next = batch.obs, batch.next_obs
        else:
            (z, tz), (z_next, tzn) = enc.forward(batch.obs), enc.forward(batch.next_obs)
        pred, tf = fwd.forward(cat(z, batch.action))
        diff = pred - z_next
        fwd_loss = float(np.mean(np.sum(diff * diff, axis=-1)))
        a_hat, ti = inv.forward(cat(z, z_next))
        adiff = a_hat - batch.action
        inv_loss = float(np.mean(np.sum(adiff * adiff, axis=-1)))
        fwd.step(fwd.backward(tf, (2.0 / B) * diff))
        g_inv, dx = inv.backward(ti, (2.0 / B) * adiff, input_grad=True)
        inv.step(g_inv)
        if enc is not None:
            r = self.rep
            enc.step(add_grads(enc.backward(tz, dx[:, :r]), enc.backward(tzn, dx[:, r:])))
        return {"forward_loss": fwd_loss, "inverse_loss": inv_loss}


class Disagreement(IntrinsicModule):
    """Variance across an ensemble of forward models (population variance, mean over dims)."""

    kind, category = "disagreement", "knowledge"

    def __init__(self, obs_dim: int, action_dim: int, config: DisagreementConfig, rng: np.random.Generator):
        super().__init__()
        c = self.config = config
        if c.ensemble_size < 2:
            raise ValueError("ensemble needs at least two members")
        for i in range(c.ensemble_size):
            self.nets[f"member{i}"] = mlp([obs_dim + action_dim, c.hidden_dim, c.hidden_dim, obs_dim], rng, c.lr)

    def predictions(self, batch) -> np.ndarray:
        x = cat(batch.obs, batch.action)
        return np.stack([net(x) for net in self.nets.values()])

    def rewards(self, batch) -> np.ndarray:
        return ensemble_variance(self.predictions(batch))

    def update(self, batch) -> dict:
        x = cat(batch.obs, batch.action)
        B = len(x)
        losses = []
        for net in self.nets.values():
            pred, tape = net.forward(x)
            diff = pred - batch.next_obs
            losses.append(float(np.mean(np.sum(diff * diff, axis=-1))))
            net.step(net.backward(tape, (2.0 / B) * diff))
        return {"forward_loss": float(np.mean(losses))}


def ensemble_variance(preds: np.ndarray) -> np.ndarray:
    """preds: members x batch x dim -> batch of mean-over-dim population variances.

    Deviations are taken from the first member before the usual two-pass
    formula, so identical members give exactly zero.
    """
    d = preds - preds[:1]
    return np.mean(np.var(d, axis=0), axis=-1)


class RND(IntrinsicModule):
    """Distillation error against a frozen random network on normalised observations."""

    kind, category = "rnd", "knowledge"

    def __init__(self, obs_dim: int, action_dim: int, config: RNDConfig, rng: np.random.Generator):
        super().__init__()
        c = self.config = config
        widths = [obs_dim, c.hidden_dim, c.hidden_dim, c.rep_dim]
        self.nets["predictor"] = mlp(widths, rng, c.lr)
        self.target = mlp(widths, rng)
        self.frozen["target"] = self.target.params
        self.normalizer = RunningNormalizer(obs_dim, c.obs_clip)

    def _error(self, x) -> np.ndarray:
        return np.sum((self.nets["predictor"](x) - self.target(x)) ** 2, axis=-1)

    def rewards(self, batch) -> np.ndarray:
        return self._error(self.normalizer.normalize(batch.obs))

    def update(self, batch) -> dict:
        self.normalizer.update(batch.obs)
        x = self.normalizer.normalize(batch.obs)
        pred_net = self.nets["predictor"]
        pred, tape = pred_net.forward(x)
        diff = pred - self.target(x)
        loss = float(np.mean(np.sum(diff * diff, axis=-1)))
        pred_net.step(pred_net.backward(tape, (2.0 / len(x)) * diff))
        return {"predictor_loss": loss}

    def extra_state(self) -> dict:
        return self.normalizer.state_arrays("obs_norm")

    def load_extra_state(self, arrays: dict):
        self.normalizer.load_state_arrays(arrays, "obs_norm")
