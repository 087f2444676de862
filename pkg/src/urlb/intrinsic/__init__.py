"""The eight intrinsic-reward modules and their registry."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .base import (IntrinsicModule, RunningNormalizer, TransitionBatch, knn_distances, knn_reward, one_hot,
                   particle_entropy_reward, ridge_solve, sinkhorn_knopp)
from .competence import APS, DIAYN, SMM, APSConfig, DIAYNConfig, SMMConfig, infer_task_vector, smm_reward
from .data import APT, Proto, APTConfig, ProtoConfig
from .knowledge import ICM, RND, Disagreement, DisagreementConfig, ICMConfig, RNDConfig, ensemble_variance

ALGORITHMS = ("icm", "disagreement", "rnd", "apt", "proto", "smm", "diayn", "aps")

CATEGORY = {
    "icm": "knowledge", "disagreement": "knowledge", "rnd": "knowledge",
    "apt": "data", "proto": "data",
    "smm": "competence", "diayn": "competence", "aps": "competence",
}


@dataclass
class IntrinsicConfig:
    icm: ICMConfig = field(default_factory=ICMConfig)
    disagreement: DisagreementConfig = field(default_factory=DisagreementConfig)
    rnd: RNDConfig = field(default_factory=RNDConfig)
    apt: APTConfig = field(default_factory=APTConfig)
    proto: ProtoConfig = field(default_factory=ProtoConfig)
    smm: SMMConfig = field(default_factory=SMMConfig)
    diayn: DIAYNConfig = field(default_factory=DIAYNConfig)
    aps: APSConfig = field(default_factory=APSConfig)


_CLASSES = {"icm": ICM, "disagreement": Disagreement, "rnd": RND, "apt": APT,
            "proto": Proto, "smm": SMM, "diayn": DIAYN, "aps": APS}


def make_module(kind: str, obs_dim: int, action_dim: int, config: IntrinsicConfig,
                rng: np.random.Generator, obs_volume: float = 1.0) -> IntrinsicModule:
    if kind not in _CLASSES:
        raise KeyError(f"unknown algorithm {kind!r}")
    cfg = getattr(config, kind)
    if kind == "smm":
        return SMM(obs_dim, action_dim, cfg, rng, obs_volume=obs_volume)
    return _CLASSES[kind](obs_dim, action_dim, cfg, rng)


__all__ = [
    "ALGORITHMS", "CATEGORY", "IntrinsicConfig", "IntrinsicModule", "make_module",
    "ICM", "Disagreement", "RND", "APT", "Proto", "SMM", "DIAYN", "APS",
    "ICMConfig", "DisagreementConfig", "RNDConfig", "APTConfig", "ProtoConfig", "SMMConfig",
    "DIAYNConfig", "APSConfig", "RunningNormalizer", "TransitionBatch", "knn_distances", "knn_reward", "one_hot",
    "particle_entropy_reward", "ridge_solve", "sinkhorn_knopp", "infer_task_vector", "smm_reward",
    "ensemble_variance",
]
