"""Run configuration: dataclasses, desk/paper presets, flat key=value files.

Flat keys use dotted sections, e.g. ``backbone.lr=1e-4`` or
``intrinsic.apt.k=12``. Precedence is flag > file > preset default.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .backbone import BackboneConfig
from .intrinsic import IntrinsicConfig


@dataclass
class GridConfig:
    algorithms: tuple = ("apt", "rnd")
    domains: tuple = ("pointmass",)
    seeds: tuple = (0, 1, 2)
    random_init: bool = True
    calibrate: bool = True


@dataclass
class RunConfig:
    algorithm: str = "apt"
    domain: str = "pointmass"
    seed: int = 0
    scale: str = "desk"
    pretrain_steps: int = 100_000
    snapshot_steps: tuple = (5_000, 25_000, 50_000, 100_000)
    finetune_steps: int = 10_000
    eval_episodes: int = 10
    skill_budget_episodes: int = 20
    episode_length: int = 250
    expert_budget: int = 200_000
    expert_seeds: tuple = (0, 1)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    intrinsic: IntrinsicConfig = field(default_factory=IntrinsicConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def validate(self):
        steps = list(self.snapshot_steps)
        if steps != sorted(steps) or any(s < 1 or s > self.pretrain_steps for s in steps):
            raise ValueError(f"snapshot steps {steps} must be ascending within [1, {self.pretrain_steps}]")
        if not self.grid.seeds:
            raise ValueError("seed list must be non-empty")
        return self


def paper_config() -> RunConfig:
    """Table-3/4 sizes with the full-length protocol."""
    return RunConfig(scale="paper", pretrain_steps=2_000_000,
                     snapshot_steps=(100_000, 500_000, 1_000_000, 2_000_000),
                     finetune_steps=100_000, episode_length=1000, expert_budget=2_000_000)


def desk_config() -> RunConfig:
    """Narrow networks and short runs sized for a single CPU core."""
    cfg = RunConfig()
    b = cfg.backbone
    b.hidden_dim = b.feature_dim = 128
    b.batch = 128
    ic = cfg.intrinsic
    for sub in (ic.icm, ic.disagreement, ic.rnd, ic.apt, ic.smm, ic.diayn, ic.aps):
        sub.hidden_dim = 128
    for sub in (ic.icm, ic.rnd, ic.apt, ic.proto, ic.smm, ic.diayn):
        sub.rep_dim = 64
    ic.proto.pred_dim, ic.proto.proj_dim, ic.proto.num_protos, ic.proto.queue_size = 32, 64, 64, 512
    ic.smm.vae_latent = 8
    return cfg


PRESETS = {"desk": desk_config, "paper": paper_config}


def flatten(obj, prefix: str = "") -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        elif isinstance(v, (tuple, list)):
            out[key] = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            out[key] = repr(v)
        else:
            out[key] = str(v)
    return out


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(float(x)) for x in items)
        return tuple(items)
    return raw.strip()


def set_key(cfg: RunConfig, key: str, raw: str):
    *path, leaf = key.split(".")
    obj = cfg
    for part in path:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, part):
            raise KeyError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise KeyError(f"unknown config key {key!r}")
    current = getattr(obj, leaf)
    if dataclasses.is_dataclass(current):
        raise KeyError(f"{key!r} names a section, not a value")
    setattr(obj, leaf, _coerce(raw, current))


def parse_flat(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(file_values: Mapping[str, str] = (), flag_values: Mapping[str, str] = ()) -> RunConfig:
    file_values, flag_values = dict(file_values), dict(flag_values)
    scale = flag_values.get("scale", file_values.get("scale", "desk"))
    if scale not in PRESETS:
        raise ValueError(f"unknown scale {scale!r}")
    cfg = PRESETS[scale]()
    for source in (file_values, flag_values):
        for k, v in source.items():
            set_key(cfg, k, v)
    return cfg.validate()


def load_config(path=None, overrides: Mapping[str, str] = ()) -> RunConfig:
    file_values = {}
    if path:
        with open(path, encoding="utf-8") as f:
            file_values = parse_flat(f.read())
    return resolve(file_values, overrides)


def dump_flat(cfg) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(flatten(cfg).items()))


def digest(pairs: Mapping[str, str] | Iterable) -> str:
    """64-bit hex digest of sorted key=value pairs."""
    items = sorted(dict(pairs).items())
    text = "\n".join(f"{k}={v}" for k, v in items)
    return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


def config_digest(cfg: RunConfig) -> str:
    return digest(flatten(cfg))


def calibration_digest(cfg: RunConfig) -> str:
    """Digest of the settings an expert score depends on: backbone, episode and calibration keys."""
    own = ("episode_length", "eval_episodes", "expert_budget", "expert_seeds")
    keep = {k: v for k, v in flatten(cfg).items() if k.startswith("backbone.") or k in own}
    return digest(keep)
