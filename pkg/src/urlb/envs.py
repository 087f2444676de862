"""Analytic continuous-control domains with four reward maps each.

Three domains, all integrated with semi-implicit Euler at fixed ``dt``:

* ``pointmass``: a damped point in the square [-1, 1]^2, obs (x, y, vx, vy).
  Tasks reach one of the four arena corners.
* ``planar_arm``: two damped revolute joints, obs (cos q1, sin q1, cos q2,
  sin q2, w1, w2). Tasks reach one of four fingertip targets.
* ``slider``: a cart on a ring track plus a spinning flywheel, obs
  (v, w). Tasks: stand, walk, run, flip.

Episodes always last ``episode_length`` steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

_SQRT_2LN10 = math.sqrt(2.0 * math.log(10.0))


@dataclass(frozen=True)
class DomainSpec:
    name: str
    obs_width: int
    action_width: int
    episode_length: int = 250
    dt: float = 0.02
    mass: float = 1.0
    friction: float = 2.0
    force_max: float = 4.0
    v_max: float = 2.0
    # planar arm / slider flywheel
    link_lengths: tuple = (0.5, 0.5)
    inertia: float = 1.0
    joint_damping: float = 2.0
    torque_max: float = 10.0
    w_max: float = 4.0

    @property
    def obs_low(self) -> np.ndarray:
        return -self.obs_high

    @property
    def obs_high(self) -> np.ndarray:
        if self.name == "pointmass":
            return np.array([1.0, 1.0, self.v_max, self.v_max])
        if self.name == "planar_arm":
            return np.array([1.0, 1.0, 1.0, 1.0, self.w_max, self.w_max])
        return np.array([self.v_max, self.w_max])

    @property
    def obs_volume(self) -> float:
        return float(np.prod(self.obs_high - self.obs_low))

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def make_domain(name: str, **overrides) -> DomainSpec:
    if name == "pointmass":
        spec = DomainSpec("pointmass", 4, 2)
    elif name == "planar_arm":
        spec = DomainSpec("planar_arm", 6, 2, w_max=2.0 * math.pi)
    elif name == "slider":
        spec = DomainSpec("slider", 2, 2, friction=1.0, force_max=3.0, v_max=2.0,
                          joint_damping=1.0, torque_max=6.0, w_max=4.0)
    else:
        raise KeyError(f"unknown domain {name!r}")
    return replace(spec, **overrides) if overrides else spec


DOMAIN_NAMES = ("pointmass", "planar_arm", "slider")


@dataclass(frozen=True)
class TaskSpec:
    domain: DomainSpec
    task_id: str
    target: tuple  # corner point for reach tasks, (speed,) for slider tasks
    target_size: float = 0.1
    margin: float = 1.0

    @property
    def full_id(self) -> str:
        return f"{self.domain.name}/{self.task_id}"


_CORNERS = {
    "reach_top_left": (-1.0, 1.0),
    "reach_top_right": (1.0, 1.0),
    "reach_bottom_left": (-1.0, -1.0),
    "reach_bottom_right": (1.0, -1.0),
}

TASK_NAMES = {
    "pointmass": tuple(_CORNERS),
    "planar_arm": tuple(_CORNERS),
    "slider": ("stand", "walk", "run", "flip"),
}


def make_task(task_id: str, domain: Optional[DomainSpec] = None) -> TaskSpec:
    """Look up ``"<domain>/<task>"``, e.g. ``"pointmass/reach_top_left"``."""
    dname, _, tname = task_id.partition("/")
    domain = domain or make_domain(dname)
    if domain.name != dname or tname not in TASK_NAMES.get(dname, ()):
        raise KeyError(f"unknown task {task_id!r}")
    if dname == "pointmass":
        return TaskSpec(domain, tname, _CORNERS[tname], 0.1, 1.0)
    if dname == "planar_arm":
        cx, cy = _CORNERS[tname]
        return TaskSpec(domain, tname, (0.5 * cx, 0.5 * cy), 0.1, 0.5)
    speed = {"stand": 0.0, "walk": 0.5 * domain.v_max, "run": domain.v_max,
             "flip": 0.5 * domain.w_max}[tname]
    return TaskSpec(domain, tname, (speed,), 0.1, 0.5 * domain.v_max)


def all_task_ids(domain: str) -> list[str]:
    return [f"{domain}/{t}" for t in TASK_NAMES[domain]]


def tolerance_reward(distance: float, target_size: float, margin: float):
    """1 inside the target, Gaussian falloff outside; 0.1 at ``target_size + margin``."""
    d = np.asarray(distance, dtype=np.float64)
    s = margin / _SQRT_2LN10
    gap = (d - target_size) / s
    out = np.where(d <= target_size, 1.0, np.exp(-0.5 * gap * gap))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class EnvState:
    x: np.ndarray  # pointmass (px, py, vx, vy); arm (q1, q2, w1, w2); slider (p, v, phase, w)
    t: int = 0


def fingertip(spec: DomainSpec, q1: float, q2: float) -> np.ndarray:
    l1, l2 = spec.link_lengths
    return np.array([l1 * math.cos(q1) + l2 * math.cos(q1 + q2),
                     l1 * math.sin(q1) + l2 * math.sin(q1 + q2)])


def observe(spec: DomainSpec, state: EnvState) -> np.ndarray:
    x = state.x
    if spec.name == "pointmass":
        return x.copy()
    if spec.name == "planar_arm":
        return np.array([math.cos(x[0]), math.sin(x[0]), math.cos(x[1]), math.sin(x[1]), x[2], x[3]])
    return np.array([x[1], x[3]])


def reset(spec: DomainSpec, rng: np.random.Generator) -> tuple[EnvState, np.ndarray]:
    if spec.name == "pointmass":
        x = np.concatenate([rng.uniform(-0.5, 0.5, size=2), np.zeros(2)])
    elif spec.name == "planar_arm":
        x = np.concatenate([rng.uniform(-math.pi, math.pi, size=2), np.zeros(2)])
    else:
        x = np.zeros(4)
    state = EnvState(x, 0)
    return state, observe(spec, state)


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def task_reward(task: TaskSpec, state: EnvState) -> float:
    spec, x = task.domain, state.x
    if spec.name == "pointmass":
        dist = math.hypot(x[0] - task.target[0], x[1] - task.target[1])
    elif spec.name == "planar_arm":
        tip = fingertip(spec, x[0], x[1])
        dist = math.hypot(tip[0] - task.target[0], tip[1] - task.target[1])
    elif task.task_id == "flip":
        dist = abs(x[3] - task.target[0])
    else:
        dist = abs(x[1] - task.target[0])
    return tolerance_reward(dist, task.target_size, task.margin)


def step(spec: DomainSpec, state: EnvState, action, tasks: Optional[list] = None):
    """Advance one ``dt``. Returns ``(state', obs', {task_id: reward})``."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    x = state.x
    dt = spec.dt
    if spec.name == "pointmass":
        v = np.clip(x[2:] + dt * (spec.force_max * a - spec.friction * x[2:]) / spec.mass,
                    -spec.v_max, spec.v_max)
        p = np.clip(x[:2] + dt * v, -1.0, 1.0)
        new = np.concatenate([p, v])
    elif spec.name == "planar_arm":
        w = np.clip(x[2:] + dt * (spec.torque_max * a - spec.joint_damping * x[2:]) / spec.inertia,
                    -spec.w_max, spec.w_max)
        q = x[:2] + dt * w
        new = np.array([_wrap_angle(q[0]), _wrap_angle(q[1]), w[0], w[1]])
    else:
        v = min(max(x[1] + dt * (spec.force_max * a[0] - spec.friction * x[1]) / spec.mass,
                    -spec.v_max), spec.v_max)
        w = min(max(x[3] + dt * (spec.torque_max * a[1] - spec.joint_damping * x[3]) / spec.inertia,
                    -spec.w_max), spec.w_max)
        p = (x[0] + dt * v + 1.0) % 2.0 - 1.0
        phase = _wrap_angle(x[2] + dt * w)
        new = np.array([p, v, phase, w])
    if not np.all(np.isfinite(new)):
        raise FloatingPointError(f"non-finite {spec.name} state {new}")
    nxt = EnvState(new, state.t + 1)
    if tasks is None:
        tasks = [make_task(tid, spec) for tid in all_task_ids(spec.name)]
    rewards = {t.task_id: task_reward(t, nxt) for t in tasks}
    return nxt, observe(spec, nxt), rewards


class Env:
    """Stateful episode driver around :func:`reset` / :func:`step`.

    Task rewards are only reachable through :meth:`reward`, which counts
    every read so that reward-free phases can be audited.
    """

    def __init__(self, spec: DomainSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.tasks = [make_task(tid, spec) for tid in all_task_ids(spec.name)]
        self.extrinsic_reads = 0
        self.state: Optional[EnvState] = None
        self._rewards: dict = {}

    @property
    def t(self) -> int:
        return self.state.t

    @property
    def done(self) -> bool:
        return self.state.t >= self.spec.episode_length

    def reset(self) -> np.ndarray:
        self.state, obs = reset(self.spec, self.rng)
        self._rewards = {}
        return obs

    def step(self, action) -> np.ndarray:
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        self.state, obs, self._rewards = step(self.spec, self.state, action, self.tasks)
        return obs

    def reward(self, task: str) -> float:
        self.extrinsic_reads += 1
        return self._rewards[task.rsplit("/", 1)[-1]]
