"""Fast oracle and arithmetic checks runnable from an installed package.

Each check returns ``(ok, detail)``. ``run_selftest`` prints one line per
check and returns True only if all pass.
"""
from __future__ import annotations

import math
import time

import numpy as np

from .nets import MLPSpec, backward, forward, init_params, rng_stream


def _fd_gradient_ok(spec: MLPSpec, rng: np.random.Generator, h: float = 1e-4, rtol: float = 1e-4) -> bool:
    params = init_params(spec, rng)
    for k in params:
        params[k] = params[k] + rng.normal(0, 0.1, params[k].shape)
    x = rng.standard_normal((3, spec.in_dim))
    g = rng.standard_normal((3, spec.out_dim))
    _, tape = forward(spec, params, x)
    grads = backward(spec, params, tape, g)

    def loss():
        return float(np.sum(forward(spec, params, x)[0] * g))

    for k, p in params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            vals = []
            for step in (2 * h, h, -h, -2 * h):  # fourth-order stencil
                p[idx] = old + step
                vals.append(loss())
            p[idx] = old
            fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            an = grads[k][idx]
            if abs(an - fd) > rtol * max(abs(an), abs(fd), 1e-6):
                return False
    return True


def check_gradients(n: int = 20, seed: int = 0):
    rng = rng_stream(seed, "selftest/grad")
    for _ in range(n):
        depth = int(rng.integers(1, 4))
        widths = tuple(int(w) for w in rng.integers(1, 9, size=depth + 1))
        hidden = str(rng.choice(["relu", "tanh"]))
        out = str(rng.choice(["identity", "tanh"]))
        if not _fd_gradient_ok(MLPSpec(widths, hidden, out), rng):
            return False, f"mismatch on {widths} {hidden}/{out}"
    return True, f"{n} random MLPs"


def brute_force_knn(z: np.ndarray, k: int) -> np.ndarray:
    rows = []
    for i in range(len(z)):
        d = sorted(math.sqrt(sum((a - b) ** 2 for a, b in zip(z[i], z[j]))) for j in range(len(z)) if j != i)
        rows.append(d[:k])
    return np.array(rows)


def check_particle(n: int = 20, seed: int = 0):
    from .intrinsic import knn_distances, particle_entropy_reward
    rng = rng_stream(seed, "selftest/particle")
    worst, bitwise = 0.0, True
    for _ in range(n):
        k = int(rng.choice([2, 3, 12]))
        z = rng.standard_normal((int(rng.integers(k + 1, 40)), int(rng.integers(1, 17))))
        nn = brute_force_knn(z, k)
        bitwise &= bool(np.array_equal(knn_distances(z, k), nn))
        oracle = np.array([math.log1p(sum(r) / k) for r in nn])
        worst = max(worst, float(np.max(np.abs(particle_entropy_reward(z, k) - oracle))))
    return bitwise and worst <= 1e-12, f"distances bitwise={bitwise}, reward max abs diff {worst:.3g}"


def _constant_output(params, value):
    for k in params:
        params[k][...] = 0.0
    params[f"b{max(int(k[1:]) for k in params if k.startswith('b'))}"][...] = value
    params.bump()


def check_arithmetic():
    from .backbone import Agent, BackboneConfig
    from .envs import tolerance_reward
    from .intrinsic import DIAYN, DIAYNConfig, Disagreement, DisagreementConfig, TransitionBatch
    from .nets import ParamSet, ema_update
    from .replay import ReplayBuffer, Transition
    rng = rng_stream(0, "selftest/arith")
    agent = Agent(1, 1, BackboneConfig(hidden_dim=4), rng)
    for p in agent.critic_targets:
        _constant_output(p, 2.0)
    buf = ReplayBuffer(8, 1, 1)
    for i in range(3):
        buf.push(Transition(np.zeros(1), np.zeros(1), 1.0, np.zeros(1), i))
    one = buf.sample_nstep(1, 1, 0.99, rng, starts=np.array([0]))
    dis = Disagreement(1, 1, DisagreementConfig(ensemble_size=3, hidden_dim=4), rng)
    for net, v in zip(dis.nets.values(), (1.0, 2.0, 3.0)):
        _constant_output(net.params, v)
    diayn = DIAYN(1, 1, DIAYNConfig(skill_dim=16, rep_dim=4, hidden_dim=4), rng)
    _constant_output(diayn.nets["discriminator"].params, 0.0)
    tb = TransitionBatch(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), skill=np.eye(16)[[3]])
    got = {
        "bellman": float(agent.critic_target_value(one)[0]),
        "nstep": float(buf.sample_nstep(1, 3, 0.99, rng, starts=np.array([0])).R[0]),
        "ema": float(ema_update(ParamSet(w=np.zeros(1)), {"w": np.ones(1)}, 0.01)["w"][0]),
        "variance": float(dis.rewards(tb)[0]),
        "diayn_chance": float(diayn.rewards(tb)[0]),
        "tolerance": float(tolerance_reward(1.1, 0.1, 1.0)),
    }
    want = {"bellman": 2.98, "nstep": 2.9701, "ema": 0.01, "variance": 2 / 3, "diayn_chance": 0.0,
            "tolerance": 0.1}
    bad = [k for k in want if abs(got[k] - want[k]) > 1e-12]
    return not bad, "all exact" if not bad else f"off: {bad}"


def check_least_squares(n: int = 10, seed: int = 0):
    from .intrinsic import ridge_solve
    rng = rng_stream(seed, "selftest/lstsq")
    worst = 0.0
    for _ in range(n):
        psi = rng.standard_normal((4096, 10))
        w = rng.standard_normal(10)
        worst = max(worst, float(np.max(np.abs(ridge_solve(psi, psi @ w, 1e-6) - w))))
    return worst <= 1e-6, f"max abs error {worst:.3g}"


def check_aggregation():
    from .protocol import EvalRecord, aggregate
    recs = [EvalRecord("apt", "data", "pointmass", "pointmass/t", 1, s, v, 1.0, v) for s, v in ((0, 0.4), (1, 0.6))]
    row = aggregate(recs)[0]
    ok = abs(row.mean - 0.5) < 1e-12 and abs(row.stderr - 0.1) < 1e-12 and row.n == 2
    return ok, row.label()


CHECKS = {"gradients": check_gradients, "particle": check_particle, "arithmetic": check_arithmetic,
          "least_squares": check_least_squares, "aggregation": check_aggregation}


def run_selftest(verbose: bool = True) -> bool:
    all_ok = True
    for name, fn in CHECKS.items():
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # noqa: BLE001
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t:.1f}s)")
    return all_ok
