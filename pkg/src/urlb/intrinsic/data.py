"""State-entropy modules: APT and ProtoRL."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from ..nets import AdamState, ParamSet, adam_step, add_grads, ema_update, forward, mlp
from .base import (IntrinsicModule, cat, knn_reward, l2_normalize, l2_normalize_backward, log_softmax,
                   particle_entropy_reward, sinkhorn_knopp)


@dataclass
class APTConfig:
    rep_dim: int = 512  # 0 -> identity encoder
    hidden_dim: int = 1024
    lr: float = 1e-4
    k: int = 12
    avg_top_k: bool = True


@dataclass
class ProtoConfig:
    rep_dim: int = 512  # 0 -> identity encoder
    pred_dim: int = 128
    proj_dim: int = 512
    num_protos: int = 512
    temperature: float = 0.1
    k: int = 3
    num_candidates: int = 4
    tau_enc: float = 0.05
    queue_size: int = 2048
    sinkhorn_iters: int = 3
    lr: float = 1e-4


class APT(IntrinsicModule):
    """Particle entropy over a representation trained by forward + inverse dynamics."""

    kind, category = "apt", "data"

    def __init__(self, obs_dim: int, action_dim: int, config: APTConfig, rng: np.random.Generator):
        super().__init__()
        c = self.config = config
        rep = self.rep = c.rep_dim or obs_dim
        if c.rep_dim:
            self.nets["encoder"] = mlp([obs_dim, rep], rng, c.lr, output="tanh")
        self.nets["forward"] = mlp([rep + action_dim, c.hidden_dim, rep], rng, c.lr)
        self.nets["inverse"] = mlp([2 * rep, c.hidden_dim, action_dim], rng, c.lr, output="tanh")

    def encode(self, obs):
        enc = self.nets.get("encoder")
        return np.asarray(obs, dtype=np.float64) if enc is None else enc(obs)

    def rewards(self, batch) -> np.ndarray:
        return particle_entropy_reward(self.encode(batch.next_obs), self.config.k, self.config.avg_top_k)

    def update(self, batch) -> dict:
        fwd, inv = self.nets["forward"], self.nets["inverse"]
        enc = self.nets.get("encoder")
        B, r = len(batch.obs), self.rep
        if enc is None:
            z, z_next = batch.obs, batch.next_obs
        else:
            (z, tz), (z_next, tzn) = enc.forward(batch.obs), enc.forward(batch.next_obs)
        pred, tf = fwd.forward(cat(z, batch.action))
        diff = pred - z_next
        a_hat, ti = inv.forward(cat(z, z_next))
        adiff = a_hat - batch.action
        g_fwd, dxf = fwd.backward(tf, (2.0 / B) * diff, input_grad=True)
        g_inv, dxi = inv.backward(ti, (2.0 / B) * adiff, input_grad=True)
        fwd.step(g_fwd)
        inv.step(g_inv)
        if enc is not None:
            dz = dxf[:, :r] + dxi[:, :r]
            dz_next = dxi[:, r:] - (2.0 / B) * diff
            enc.step(add_grads(enc.backward(tz, dz), enc.backward(tzn, dz_next)))
        return {"forward_loss": float(np.mean(np.sum(diff * diff, axis=-1))),
                "inverse_loss": float(np.mean(np.sum(adiff * adiff, axis=-1)))}


class Proto(IntrinsicModule):
    """SwAV-style prototypes; reward is kNN distance to per-prototype candidates."""

    kind, category = "proto", "data"

    def __init__(self, obs_dim: int, action_dim: int, config: ProtoConfig, rng: np.random.Generator):
        super().__init__()
        c = self.config = config
        rep = c.rep_dim or obs_dim
        if c.rep_dim:
            self.nets["encoder"] = mlp([obs_dim, rep], rng, c.lr, output="tanh")
        self.nets["predictor"] = mlp([rep, c.pred_dim], rng, c.lr)
        self.nets["projector"] = mlp([c.pred_dim, c.proj_dim, c.pred_dim], rng, c.lr)
        protos = rng.standard_normal((c.num_protos, c.pred_dim))
        self.protos = ParamSet(P=l2_normalize(protos)[0])
        self.protos_opt = AdamState.zeros_like(self.protos)
        self.frozen["protos"] = self.protos
        self.frozen["encoder_target"] = self.nets["encoder"].params.copy() if c.rep_dim else ParamSet()
        self.frozen["predictor_target"] = self.nets["predictor"].params.copy()
        self.memory = np.zeros((0, c.pred_dim))

    def _target_embed(self, obs) -> np.ndarray:
        x = np.asarray(obs, dtype=np.float64)
        if self.config.rep_dim:
            x = forward(self.nets["encoder"].spec, self.frozen["encoder_target"], x)[0]
        t = forward(self.nets["predictor"].spec, self.frozen["predictor_target"], x)[0]
        return l2_normalize(t)[0]

    def candidates(self) -> np.ndarray:
        """Union of the ``num_candidates`` nearest memory rows of each prototype."""
        c = self.config
        P = self.protos["P"]
        dist = cdist(P, self.memory)
        m = min(c.num_candidates, len(self.memory))
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :m]
        return self.memory[np.unique(nearest)]

    def rewards(self, batch) -> np.ndarray:
        z = self._target_embed(batch.next_obs)
        pts = self.candidates() if len(self.memory) else z
        return knn_reward(z, pts, self.config.k)

    def update(self, batch) -> dict:
        c = self.config
        enc = self.nets.get("encoder")
        pred_net, proj = self.nets["predictor"], self.nets["projector"]
        B = len(batch.obs)
        P = self.protos["P"]

        x, te = enc.forward(batch.obs) if enc is not None else (batch.obs, None)
        u, tp = pred_net.forward(x)
        v, tj = proj.forward(u)
        s, s_norm = l2_normalize(v)
        logits = (s @ P.T) / c.temperature
        log_p = log_softmax(logits)

        t = self._target_embed(batch.next_obs)
        q = sinkhorn_knopp(t @ P.T, c.temperature, c.sinkhorn_iters)
        loss = float(-np.mean(np.sum(q * log_p, axis=1)))

        d_logits = (np.exp(log_p) - q) / (B * c.temperature)
        d_s = d_logits @ P
        d_P = d_logits.T @ s
        g_proj, d_u = proj.backward(tj, l2_normalize_backward(s, s_norm, d_s), input_grad=True)
        g_pred, d_x = pred_net.backward(tp, d_u, input_grad=True)
        proj.step(g_proj)
        pred_net.step(g_pred)
        if enc is not None:
            enc.step(enc.backward(te, d_x))
        adam_step(self.protos, {"P": d_P}, self.protos_opt, c.lr)
        self.protos["P"] = l2_normalize(self.protos["P"])[0]

        if enc is not None:
            ema_update(self.frozen["encoder_target"], enc.params, c.tau_enc)
        ema_update(self.frozen["predictor_target"], pred_net.params, c.tau_enc)
        self.memory = np.concatenate([self.memory, t])[-c.queue_size:]
        return {"proto_loss": loss}

    def extra_state(self) -> dict:
        return {"memory": self.memory}

    def load_extra_state(self, arrays: dict):
        self.memory = arrays["memory"].copy()
