"""Primitives shared by the intrinsic-reward modules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from ..nets import Net, ParamSet


@dataclass
class TransitionBatch:
    """The slice of a minibatch an intrinsic module reads.

    :class:`urlb.replay.NStepBatch` has the same attributes and can be passed
    anywhere this is accepted.
    """

    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    skill: Optional[np.ndarray] = None


# -- particle estimator ------------------------------------------------------

def _nearest(dist: np.ndarray, k: int) -> np.ndarray:
    """The k smallest entries of each row, ascending."""
    if k < dist.shape[1]:
        dist = np.partition(dist, k - 1, axis=1)[:, :k]
    return np.sort(dist, axis=1)


def _reduce(nn: np.ndarray, average: bool) -> np.ndarray:
    if average:
        return np.log1p(np.mean(nn, axis=1))
    return np.sum(np.log1p(nn), axis=1)


def knn_distances(z, k: int) -> np.ndarray:
    """Ascending Euclidean distances from each row to its k nearest other rows."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if len(z) <= k:
        raise ValueError(f"batch of {len(z)} rows cannot supply {k} neighbours")
    dist = cdist(z, z)
    np.fill_diagonal(dist, np.inf)
    return _nearest(dist, k)


def particle_entropy_reward(z, k: int, average: bool = True) -> np.ndarray:
    """kNN particle reward within a batch: log(1 + mean of the k nearest other rows).

    With ``average=False`` the per-neighbour form sum_j log(1 + d_j) is used.
    """
    return _reduce(knn_distances(z, k), average)


def knn_reward(query, points, k: int, average: bool = True) -> np.ndarray:
    """Like :func:`particle_entropy_reward` but against a separate point set."""
    query = np.asarray(query, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    k = min(k, len(points))
    return _reduce(_nearest(cdist(query, points), k), average)


# -- helpers -----------------------------------------------------------------

class RunningNormalizer:
    """Streaming per-dimension mean/variance with clipped standardisation."""

    def __init__(self, dim: int, clip: float = 5.0, eps: float = 1e-8):
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)  # sum of squared deviations
        self.clip = clip
        self.eps = eps

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count > 0 else np.ones_like(self.mean)

    def update(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = len(x)
        bmean = x.mean(axis=0)
        bm2 = ((x - bmean) ** 2).sum(axis=0)
        tot = self.count + n
        delta = bmean - self.mean
        self.mean = self.mean + delta * (n / tot)
        self.m2 = self.m2 + bm2 + delta**2 * (self.count * n / tot)
        self.count = tot

    def normalize(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(z, -self.clip, self.clip)

    def state_arrays(self, prefix: str) -> dict:
        return {f"{prefix}/count": np.array(self.count), f"{prefix}/mean": self.mean,
                f"{prefix}/m2": self.m2}

    def load_state_arrays(self, arrays: dict, prefix: str):
        self.count = float(arrays[f"{prefix}/count"])
        self.mean = arrays[f"{prefix}/mean"].copy()
        self.m2 = arrays[f"{prefix}/m2"].copy()


def l2_normalize(u: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    norm = np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), eps)
    return u / norm, norm


def l2_normalize_backward(s: np.ndarray, norm: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Gradient through s = u / |u| given the unit output s and the norm."""
    return (ds - s * np.sum(s * ds, axis=-1, keepdims=True)) / norm


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def sinkhorn_knopp(scores: np.ndarray, temperature: float, n_iters: int = 3) -> np.ndarray:
    """Balanced soft assignments of batch rows to prototypes (rows sum to 1)."""
    Q = np.exp((scores - scores.max()) / temperature).T  # prototypes x batch
    Q /= Q.sum()
    K, B = Q.shape
    for _ in range(n_iters):
        Q /= Q.sum(axis=1, keepdims=True)
        Q /= K
        Q /= Q.sum(axis=0, keepdims=True)
        Q /= B
    Q *= B
    return Q.T


def one_hot(index: int, dim: int) -> np.ndarray:
    w = np.zeros(dim)
    w[index] = 1.0
    return w


def ridge_solve(features: np.ndarray, rewards: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    """argmin_w |F w - r|^2 + ridge |w|^2 via the normal equations."""
    F = np.asarray(features, dtype=np.float64)
    A = F.T @ F + ridge * np.eye(F.shape[1])
    return np.linalg.solve(A, F.T @ np.asarray(rewards, dtype=np.float64))


def cat(*parts):
    return np.concatenate([p for p in parts if p is not None], axis=-1)


class IntrinsicModule:
    """Common surface of the eight reward modules.

    Subclasses register their networks in ``self.nets`` (name -> Net) and any
    non-trainable parameter sets in ``self.frozen`` so that persistence is
    uniform.
    """

    kind: str = ""
    category: str = ""
    skill_kind: Optional[str] = None  # "onehot" | "sphere"
    skill_dim: int = 0
    skill_every: int = 0  # resample period in environment steps (0: never)

    def __init__(self):
        self.nets: dict[str, Net] = {}
        self.frozen: dict[str, ParamSet] = {}

    def rewards(self, batch) -> np.ndarray:
        raise NotImplementedError

    def update(self, batch) -> dict:
        raise NotImplementedError

    def sample_skill(self, rng: np.random.Generator) -> Optional[np.ndarray]:
        if self.skill_kind == "onehot":
            return one_hot(int(rng.integers(self.skill_dim)), self.skill_dim)
        if self.skill_kind == "sphere":
            w = rng.standard_normal(self.skill_dim)
            return w / np.linalg.norm(w)
        return None

    def candidate_skills(self) -> list[np.ndarray]:
        if self.skill_kind == "onehot":
            return [one_hot(i, self.skill_dim) for i in range(self.skill_dim)]
        return []

    def extra_state(self) -> dict:
        return {}

    def load_extra_state(self, arrays: dict):
        pass

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, net in self.nets.items():
            for k, v in net.params.items():
                out[f"intrinsic/{self.kind}/{name}/{k}"] = v
        for name, ps in self.frozen.items():
            for k, v in ps.items():
                out[f"intrinsic/{self.kind}/{name}/{k}"] = v
        for k, v in self.extra_state().items():
            out[f"intrinsic/{self.kind}/{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict):
        root = f"intrinsic/{self.kind}/"
        for name, net in self.nets.items():
            net.load({k: arrays[f"{root}{name}/{k}"] for k in net.params})
        for name, ps in self.frozen.items():
            for k in ps:
                ps[k][...] = arrays[f"{root}{name}/{k}"]
            ps.bump()
        self.load_extra_state({k[len(root):]: v for k, v in arrays.items() if k.startswith(root)})
