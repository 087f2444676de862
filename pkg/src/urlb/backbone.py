"""Deterministic actor-critic backbone shared by every algorithm.

DDPG with twin critics, n-step targets, a target critic tracked by EMA, and
clipped target-policy smoothing noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nets import MLPSpec, Net, NonFiniteError, ParamSet, ema_update, forward
from .replay import NStepBatch, ReplayBuffer


@dataclass
class BackboneConfig:
    gamma: float = 0.99
    lr: float = 1e-4
    tau_Q: float = 0.01
    batch: int = 1024
    nstep: int = 3
    update_every: int = 2
    seed_frames: int = 4000
    hidden_dim: int = 1024
    feature_dim: int = 1024  # width of a learned trunk; unused with the identity encoder
    stddev: float = 0.2
    stddev_clip: float = 0.3
    # "target": clip smoothing noise on the bootstrap action (TD3 style),
    # "explore": clip the acting noise instead and bootstrap without noise.
    clip_mode: str = "target"
    buffer_capacity: int = 1_000_000

    def __post_init__(self):
        if self.clip_mode not in ("target", "explore"):
            raise ValueError(f"clip_mode must be 'target' or 'explore', not {self.clip_mode!r}")
        if self.stddev_clip < 0:
            raise ValueError("stddev_clip must be >= 0")


def _cat(*parts):
    parts = [p for p in parts if p is not None and np.size(p)]
    return np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]


class Agent:
    """Actor, twin critics and their EMA targets.

    The encoder is the identity for state observations, so its parameter
    set is empty. Skills, when present, are appended to the observation.
    """

    def __init__(self, obs_dim: int, action_dim: int, config: BackboneConfig,
                 rng: np.random.Generator, skill_dim: int = 0):
        self.obs_dim, self.action_dim, self.skill_dim = obs_dim, action_dim, skill_dim
        self.config = c = config
        in_dim = obs_dim + skill_dim
        self.actor = Net(MLPSpec((in_dim, c.hidden_dim, c.hidden_dim, action_dim), "relu", "tanh"), rng, c.lr)
        critic_spec = MLPSpec((in_dim + action_dim, c.hidden_dim, c.hidden_dim, 1))
        self.critics = [Net(critic_spec, rng, c.lr) for _ in range(2)]
        self.critic_targets = [q.params.copy() for q in self.critics]
        self.encoder = ParamSet()

    # -- acting ------------------------------------------------------------
    def policy(self, obs, skill=None) -> np.ndarray:
        return self.actor(_cat(obs, skill))

    def act(self, obs, mode: str, rng: np.random.Generator, step: int = 10**18, skill=None) -> np.ndarray:
        """``eval`` is the deterministic policy; ``explore`` adds Gaussian noise.

        During the first ``seed_frames`` environment steps exploration is
        uniform on [-1, 1]^d.
        """
        c = self.config
        if mode == "eval":
            return self.policy(obs, skill)
        if mode != "explore":
            raise ValueError(f"unknown mode {mode!r}")
        if step < c.seed_frames:
            return rng.uniform(-1.0, 1.0, size=self.action_dim)
        noise = rng.normal(0.0, c.stddev, size=self.action_dim)
        if c.clip_mode == "explore":
            noise = np.clip(noise, -c.stddev_clip, c.stddev_clip)
        return np.clip(self.policy(obs, skill) + noise, -1.0, 1.0)

    # -- critic ------------------------------------------------------------
    def target_q(self, obs, action, skill=None) -> tuple[np.ndarray, np.ndarray]:
        x = _cat(obs, skill, action)
        spec = self.critics[0].spec
        return tuple(forward(spec, p, x)[0][:, 0] for p in self.critic_targets)

    def critic_target_value(self, batch: NStepBatch, rng: Optional[np.random.Generator] = None,
                            rewards: Optional[np.ndarray] = None) -> np.ndarray:
        """y = R + gamma^n_eff * min_i Qbar_i(o_{t+n}, a'). No gradient flows through y."""
        c = self.config
        R = batch.R if rewards is None else rewards
        a_next = self.policy(batch.obs_after_n, batch.skill)
        if c.clip_mode == "target" and rng is not None:
            noise = np.clip(rng.normal(0.0, c.stddev, size=a_next.shape), -c.stddev_clip, c.stddev_clip)
            a_next = np.clip(a_next + noise, -1.0, 1.0)
        q1, q2 = self.target_q(batch.obs_after_n, a_next, batch.skill)
        return R + batch.discount * np.minimum(q1, q2)

    def update_critic(self, batch: NStepBatch, y: np.ndarray) -> float:
        """One Adam step on the summed MSE of both critics against ``y``."""
        x = _cat(batch.obs, batch.skill, batch.action)
        B = len(x)
        outs = [q.forward(x) for q in self.critics]
        errs = [o[:, 0] - y for o, _ in outs]
        loss = float(sum(np.mean(e * e) for e in errs))
        if not np.isfinite(loss):
            raise NonFiniteError("critic loss is not finite")
        grads = [q.backward(tape, (2.0 / B) * e[:, None]) for q, (_, tape), e in zip(self.critics, outs, errs)]
        for q, g in zip(self.critics, grads):
            q.step(g)
        return loss

    # -- actor -------------------------------------------------------------
    def update_actor(self, batch: NStepBatch) -> float:
        """One Adam step ascending mean(min(Q1, Q2)(o, pi(o))). Returns -objective."""
        B = len(batch.obs)
        a, atape = self.actor.forward(_cat(batch.obs, batch.skill))
        x = _cat(batch.obs, batch.skill, a)
        (q1, t1), (q2, t2) = (q.forward(x) for q in self.critics)
        q1, q2 = q1[:, 0], q2[:, 0]
        use1 = q1 <= q2
        objective = float(np.mean(np.where(use1, q1, q2)))
        if not np.isfinite(objective):
            raise NonFiniteError("actor objective is not finite")
        # d(-objective)/dQ_i, routed through whichever critic attained the min
        g1 = np.where(use1, -1.0 / B, 0.0)[:, None]
        g2 = np.where(use1, 0.0, -1.0 / B)[:, None]
        _, dx1 = self.critics[0].backward(t1, g1, input_grad=True, param_grads=False)
        _, dx2 = self.critics[1].backward(t2, g2, input_grad=True, param_grads=False)
        da = (dx1 + dx2)[:, -self.action_dim:]
        self.actor.step(self.actor.backward(atape, da))
        return -objective

    def update_targets(self):
        for tgt, q in zip(self.critic_targets, self.critics):
            ema_update(tgt, q.params, self.config.tau_Q)

    def reset_optimizers(self):
        self.actor.reset_optimizer()
        for q in self.critics:
            q.reset_optimizer()

    # -- persistence -------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        sections = {"actor": self.actor.params, "critic1": self.critics[0].params,
                    "critic2": self.critics[1].params, "critic1_target": self.critic_targets[0],
                    "critic2_target": self.critic_targets[1], "encoder": self.encoder}
        for sec, ps in sections.items():
            for k, v in ps.items():
                out[f"agent/{sec}/{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        def pick(sec):
            prefix = f"agent/{sec}/"
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        self.actor.load(pick("actor"))
        for i, q in enumerate(self.critics):
            q.load(pick(f"critic{i + 1}"))
            tgt = pick(f"critic{i + 1}_target")
            for k in self.critic_targets[i]:
                self.critic_targets[i][k][...] = tgt[k]
            self.critic_targets[i].bump()


class ExtrinsicReward:
    """Reward source for fine-tuning: the stored n-step extrinsic return."""

    def rewards(self, batch: NStepBatch) -> np.ndarray:
        return batch.R

    def update(self, batch: NStepBatch) -> dict:
        return {}


def agent_update_tick(agent: Agent, buffer: ReplayBuffer, global_step: int, reward_source,
                      rng: np.random.Generator, pretraining: bool = False) -> Optional[dict]:
    """Run one update if the seed-frame and frequency gates allow it.

    Returns a dict of diagnostics, or None when gated. Intrinsic reward
    sources replace the n-step return with their per-transition reward.
    """
    c = agent.config
    if global_step < c.seed_frames or global_step % c.update_every != 0:
        return None
    batch = buffer.sample_nstep(c.batch, c.nstep, c.gamma, rng)
    rewards = reward_source.rewards(batch)
    y = agent.critic_target_value(batch, rng, rewards)
    metrics = {"reward_mean": float(np.mean(rewards))}
    metrics["critic_loss"] = agent.update_critic(batch, y)
    metrics["actor_loss"] = agent.update_actor(batch)
    agent.update_targets()
    if pretraining:
        for k, v in reward_source.update(batch).items():
            metrics[f"intr_{k}"] = v
    return metrics
