"""Pretrain / finetune / calibrate / aggregate.

Every run draws from named random streams keyed on the run seed, so a cell
(algorithm, domain, task, snapshot step, seed) is reproducible on its own
regardless of which other cells ran before it.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .backbone import Agent, ExtrinsicReward, agent_update_tick
from .config import RunConfig, calibration_digest, config_digest, dump_flat, flatten, parse_flat, resolve
from .envs import Env, all_task_ids, make_domain, make_task
from .intrinsic import CATEGORY, IntrinsicModule, make_module
from .nets import NonFiniteError, dump_container, load_container, rng_stream, write_atomic
from .replay import ReplayBuffer, Transition

RANDOM_INIT = "random_init"
RESULT_COLUMNS = ("algorithm", "category", "domain", "task", "snapshot_step", "seed",
                  "raw_return", "expert_score", "normalized")
EXPERT_COLUMNS = ("task_id", "config_digest", "expert_score", "budget_steps")
METRIC_COLUMNS = ("step", "critic_loss", "actor_loss", "reward_mean", "extras")


def category_of(algorithm: str) -> str:
    return RANDOM_INIT if algorithm == RANDOM_INIT else CATEGORY[algorithm]


# -- snapshots ---------------------------------------------------------------

@dataclass
class AgentSnapshot:
    meta: dict
    arrays: dict

    @property
    def step(self) -> int:
        return int(self.meta["step"])

    def to_bytes(self) -> bytes:
        return dump_container(self.meta, self.arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AgentSnapshot":
        meta, arrays = load_container(data)
        return cls(meta, arrays)

    def save(self, path):
        write_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "AgentSnapshot":
        return cls.from_bytes(Path(path).read_bytes())

    def config(self) -> RunConfig:
        return resolve({}, parse_flat(self.meta["config"]))


@dataclass
class Learner:
    """An agent plus its (optional) intrinsic module, built from a config."""

    config: RunConfig
    agent: Agent
    module: Optional[IntrinsicModule]

    @property
    def algorithm(self) -> str:
        return self.config.algorithm

    def snapshot(self, step: int, **extra) -> AgentSnapshot:
        arrays = dict(self.agent.state_arrays())
        if self.module is not None:
            arrays.update(self.module.state_arrays())
        arrays = {k: np.array(v, dtype=np.float64, copy=True) for k, v in arrays.items()}
        meta = {"step": int(step), "algorithm": self.algorithm, "domain": self.config.domain,
                "seed": int(self.config.seed), "config_digest": config_digest(self.config),
                "config": dump_flat(self.config)}
        meta.update(extra)
        return AgentSnapshot(meta, arrays)

    def load(self, snap: AgentSnapshot):
        self.agent.load_state_arrays(snap.arrays)
        if self.module is not None:
            self.module.load_state_arrays(snap.arrays)


def build_learner(config: RunConfig) -> Learner:
    """Freshly initialised networks; identical for identical (config, seed)."""
    dom = make_domain(config.domain, episode_length=config.episode_length)
    rng = rng_stream(config.seed, "init")
    module = None
    if config.algorithm != RANDOM_INIT:
        module = make_module(config.algorithm, dom.obs_width, dom.action_width, config.intrinsic,
                             rng, obs_volume=dom.obs_volume)
    skill_dim = module.skill_dim if module is not None else 0
    agent = Agent(dom.obs_width, dom.action_width, config.backbone, rng, skill_dim=skill_dim)
    return Learner(config, agent, module)


def random_init_snapshot(config: RunConfig) -> AgentSnapshot:
    """Snapshot-step-0 stand-in: a freshly initialised backbone without intrinsic module."""
    cfg = resolve({}, {**flatten(config), "algorithm": RANDOM_INIT})
    return build_learner(cfg).snapshot(0, extrinsic_reads=0, nonfinite_updates=0)


# -- metrics -----------------------------------------------------------------

class MetricsLog:
    """Per-update diagnostics kept in memory and optionally written as CSV."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        self.nonfinite = 0

    def add(self, step: int, metrics: dict):
        extras = ";".join(f"{k}={v!r}" for k, v in sorted(metrics.items())
                          if k not in ("critic_loss", "actor_loss", "reward_mean"))
        self.rows.append({"step": step, "critic_loss": repr(metrics.get("critic_loss")),
                          "actor_loss": repr(metrics.get("actor_loss")),
                          "reward_mean": repr(metrics.get("reward_mean")), "extras": extras})

    def flush(self):
        if self.path is None:
            return
        write_atomic(self.path, _csv_bytes(METRIC_COLUMNS, self.rows))


def _csv_bytes(columns, rows) -> bytes:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue().encode("utf-8")


def read_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# -- pretraining -------------------------------------------------------------

def run_dir(root, algorithm: str, domain: str, seed: int) -> Path:
    return Path(root) / "runs" / algorithm / domain / str(seed)


def snapshot_path(directory, step: int) -> Path:
    return Path(directory) / f"snapshot_{step:08d}.bin"


def pretrain(config: RunConfig, out_dir=None) -> list[AgentSnapshot]:
    """Reward-free interaction with intrinsic rewards, snapshotting along the way.

    ``out_dir`` (optional) receives one file per snapshot, the metrics CSV
    and the resolved config. Each snapshot is written as soon as it is taken
    so a later failure leaves earlier ones intact.
    """
    config.validate()
    if config.algorithm == RANDOM_INIT:
        raise ValueError("random_init has no pretraining phase")
    learner = build_learner(config)
    agent, module = learner.agent, learner.module
    dom = make_domain(config.domain, episode_length=config.episode_length)
    env = Env(dom, rng_stream(config.seed, "pretrain/env"))
    act_rng = rng_stream(config.seed, "pretrain/act")
    update_rng = rng_stream(config.seed, "pretrain/update")
    skill_rng = rng_stream(config.seed, "pretrain/skill")
    buffer = ReplayBuffer(min(config.backbone.buffer_capacity, config.pretrain_steps), dom.obs_width,
                          dom.action_width, module.skill_dim, dom.episode_length)
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_flat(config), encoding="utf-8")
    log = MetricsLog(out / "metrics.csv" if out else None)

    pending = list(config.snapshot_steps)
    snapshots = []
    obs = env.reset()
    skill = None
    for step in range(config.pretrain_steps):
        if module.skill_kind and (skill is None or env.t % module.skill_every == 0):
            skill = module.sample_skill(skill_rng)
        action = agent.act(obs, "explore", act_rng, step, skill)
        next_obs = env.step(action)
        buffer.push(Transition(obs, action, 0.0, next_obs, env.t - 1, skill))
        obs = env.reset() if env.done else next_obs
        global_step = step + 1
        try:
            metrics = agent_update_tick(agent, buffer, global_step, module, update_rng, pretraining=True)
        except NonFiniteError:
            log.nonfinite += 1
            metrics = None
        if metrics is not None:
            log.add(global_step, metrics)
        while pending and pending[0] == global_step:
            pending.pop(0)
            snap = learner.snapshot(global_step, extrinsic_reads=env.extrinsic_reads,
                                    nonfinite_updates=log.nonfinite)
            snapshots.append(snap)
            if out is not None:
                snap.save(snapshot_path(out, global_step))
                log.flush()
    log.flush()
    return snapshots


# -- finetuning --------------------------------------------------------------

def evaluate(agent: Agent, task_id: str, episodes: int, env: Env, skill=None) -> float:
    """Mean return of ``episodes`` noise-free rollouts."""
    returns = []
    for _ in range(episodes):
        obs, total = env.reset(), 0.0
        while not env.done:
            obs = env.step(agent.act(obs, "eval", None, skill=skill))
            total += env.reward(task_id)
        returns.append(total)
    return float(np.mean(returns))


def _episode_return(agent: Agent, env: Env, task_id: str, skill) -> float:
    return evaluate(agent, task_id, 1, env, skill)


def select_finetune_skill(module: Optional[IntrinsicModule], agent: Agent, task_id: str,
                          budget_episodes: int, env: Env, rng: np.random.Generator):
    """Fix the skill used during finetuning.

    One-hot skills: the skill with the highest one-episode return (ties go to
    the lowest index); when the budget is smaller than the skill count a
    uniform subset is tried. Sphere skills: least-squares task inference on
    transitions gathered with random skills.
    """
    if module is None or module.skill_kind is None:
        return None
    if module.skill_kind == "onehot":
        candidates = module.candidate_skills()
        if len(candidates) == 1:
            return candidates[0]
        order = np.arange(len(candidates))
        if budget_episodes < len(candidates):
            order = np.sort(rng.choice(len(candidates), size=max(budget_episodes, 1), replace=False))
        scores = [_episode_return(agent, env, task_id, candidates[i]) for i in order]
        return candidates[int(order[int(np.argmax(scores))])]
    need = module.config.lstsq_batch
    obs_rows, rewards = [], []
    episodes = max(budget_episodes, math.ceil(need / env.spec.episode_length))
    for _ in range(episodes):
        obs = env.reset()
        skill = module.sample_skill(rng)
        while not env.done:
            if module.skill_every and env.t % module.skill_every == 0:
                skill = module.sample_skill(rng)
            obs = env.step(agent.act(obs, "eval", None, skill=skill))
            obs_rows.append(obs)
            rewards.append(env.reward(task_id))
    obs_rows, rewards = np.asarray(obs_rows), np.asarray(rewards)
    if len(rewards) > need:
        keep = np.sort(rng.choice(len(rewards), size=need, replace=False))
        obs_rows, rewards = obs_rows[keep], rewards[keep]
    return module.infer_task(obs_rows, rewards, rng)


@dataclass
class EvalRecord:
    algorithm: str
    category: str
    domain: str
    task: str
    snapshot_step: int
    seed: int
    raw_return: float
    expert_score: float = float("nan")
    normalized: float = float("nan")

    def with_expert(self, expert_score: Optional[float]) -> "EvalRecord":
        if expert_score is None:
            return self
        norm = self.raw_return / expert_score if expert_score > 0 else float("nan")
        return EvalRecord(**{**asdict(self), "expert_score": float(expert_score), "normalized": norm})

    def row(self) -> dict:
        return {k: (repr(float(v)) if isinstance(v, float) else str(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_row(cls, row: dict) -> "EvalRecord":
        kw = {}
        for f in fields(cls):
            raw = row[f.name]
            kw[f.name] = int(raw) if f.type in ("int", int) else float(raw) if f.type in ("float", float) else raw
        return cls(**kw)

    @property
    def key(self) -> tuple:
        return (self.algorithm, self.domain, self.task, self.snapshot_step, self.seed)


def train_on_task(learner: Learner, task_id: str, steps: int, skill=None, stream: str = "finetune"):
    """Extrinsic-reward training from an empty buffer. Returns the count of skipped non-finite updates."""
    cfg = learner.config
    dom = make_domain(cfg.domain, episode_length=cfg.episode_length)
    env = Env(dom, rng_stream(cfg.seed, f"{stream}/env"))
    act_rng = rng_stream(cfg.seed, f"{stream}/act")
    update_rng = rng_stream(cfg.seed, f"{stream}/update")
    agent = learner.agent
    skill_dim = learner.module.skill_dim if learner.module is not None else 0
    buffer = ReplayBuffer(max(1, min(cfg.backbone.buffer_capacity, steps)), dom.obs_width,
                          dom.action_width, skill_dim, dom.episode_length)
    assert len(buffer) == 0
    source = ExtrinsicReward()
    obs = env.reset() if steps else None
    nonfinite = 0
    for step in range(steps):
        action = agent.act(obs, "explore", act_rng, step, skill)
        next_obs = env.step(action)
        buffer.push(Transition(obs, action, env.reward(task_id), next_obs, env.t - 1, skill))
        obs = env.reset() if env.done else next_obs
        try:
            agent_update_tick(agent, buffer, step + 1, source, update_rng)
        except NonFiniteError:
            nonfinite += 1
    return nonfinite


def finetune(snapshot: AgentSnapshot, task_id: str, config: Optional[RunConfig] = None,
             expert_score: Optional[float] = None) -> EvalRecord:
    """Load a snapshot, fix a skill, train on the task reward, evaluate."""
    cfg = config or snapshot.config()
    task = make_task(task_id)
    if task.domain.name != snapshot.meta["domain"]:
        raise ValueError(f"task {task_id!r} does not belong to snapshot domain {snapshot.meta['domain']!r}")
    run_cfg = resolve({}, {**flatten(cfg), "algorithm": snapshot.meta["algorithm"],
                           "domain": snapshot.meta["domain"], "seed": str(snapshot.meta["seed"])})
    learner = build_learner(run_cfg)
    learner.load(snapshot)
    learner.agent.reset_optimizers()
    tag = f"finetune/{task.full_id}/{snapshot.step}"
    dom = make_domain(run_cfg.domain, episode_length=run_cfg.episode_length)
    skill = select_finetune_skill(learner.module, learner.agent, task.full_id,
                                  run_cfg.skill_budget_episodes,
                                  Env(dom, rng_stream(run_cfg.seed, f"{tag}/select/env")),
                                  rng_stream(run_cfg.seed, f"{tag}/select"))
    train_on_task(learner, task.full_id, run_cfg.finetune_steps, skill, stream=tag)
    eval_env = Env(dom, rng_stream(run_cfg.seed, f"{tag}/eval"))
    raw = evaluate(learner.agent, task.full_id, run_cfg.eval_episodes, eval_env, skill)
    rec = EvalRecord(run_cfg.algorithm, category_of(run_cfg.algorithm), run_cfg.domain, task.full_id,
                     snapshot.step, int(run_cfg.seed), raw)
    return rec.with_expert(expert_score)


# -- expert calibration ------------------------------------------------------

def expert_run(task_id: str, config: RunConfig, budget_steps: int, seed: int) -> float:
    """Final evaluation of a from-scratch extrinsic-reward agent."""
    cfg = resolve({}, {**flatten(config), "algorithm": RANDOM_INIT, "domain": make_task(task_id).domain.name,
                       "seed": str(seed)})
    learner = build_learner(cfg)
    tag = f"expert/{task_id}"
    train_on_task(learner, task_id, budget_steps, stream=tag)
    dom = make_domain(cfg.domain, episode_length=cfg.episode_length)
    return evaluate(learner.agent, task_id, cfg.eval_episodes, Env(dom, rng_stream(seed, f"{tag}/eval")))


def calibrate_expert(task_id: str, config: RunConfig, budget_steps: Optional[int] = None,
                     seeds: Optional[Iterable[int]] = None,
                     runner: Callable = expert_run) -> tuple[float, list[float]]:
    """Expert score = max over seeds of the final evaluation."""
    budget = config.expert_budget if budget_steps is None else budget_steps
    seeds = list(config.expert_seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("calibration needs at least one seed")
    scores = [runner(task_id, config, budget, s) for s in seeds]
    return max(scores), scores


class ExpertTable:
    """expert.csv: calibration scores keyed by (task id, config digest)."""

    def __init__(self, path):
        self.path = Path(path)

    def rows(self) -> list[dict]:
        return read_csv(self.path)

    def lookup(self, task_id: str, digest: Optional[str] = None) -> Optional[float]:
        hits = [r for r in self.rows() if r["task_id"] == task_id
                and (digest is None or r["config_digest"] == digest)]
        if not hits:
            return None
        if digest is None and len({r["config_digest"] for r in hits}) > 1:
            raise LookupError(f"task {task_id!r} has calibrations under several config digests")
        return float(hits[-1]["expert_score"])

    def record(self, task_id: str, digest: str, score: float, budget_steps: int):
        rows = [r for r in self.rows() if (r["task_id"], r["config_digest"]) != (task_id, digest)]
        rows.append({"task_id": task_id, "config_digest": digest, "expert_score": repr(float(score)),
                     "budget_steps": str(budget_steps)})
        self.path.parent.mkdir(parents=True, exist_ok=True)
        write_atomic(self.path, _csv_bytes(EXPERT_COLUMNS, rows))


def ensure_calibrated(table: ExpertTable, task_id: str, config: RunConfig) -> float:
    digest = calibration_digest(config)
    score = table.lookup(task_id, digest)
    if score is None:
        score, _ = calibrate_expert(task_id, config)
        table.record(task_id, digest, score, config.expert_budget)
    return score


# -- results store -----------------------------------------------------------

class ResultsStore:
    """Append-only CSV of EvalRecords; each append rewrites via temp-file + rename."""

    def __init__(self, path):
        self.path = Path(path)

    def records(self) -> list[EvalRecord]:
        return [EvalRecord.from_row(r) for r in read_csv(self.path)]

    def keys(self) -> set:
        return {r.key for r in self.records()}

    def append(self, rec: EvalRecord):
        self.write(self.records() + [rec])

    def write(self, records: Iterable[EvalRecord]):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        write_atomic(self.path, _csv_bytes(RESULT_COLUMNS, [r.row() for r in records]))


def merge_results(run_files: Iterable, merged_path) -> list[EvalRecord]:
    """Union of per-run CSVs, sorted by cell key so the merged file is order-independent."""
    recs = {}
    for p in run_files:
        for r in ResultsStore(p).records():
            recs[r.key] = r
    out = [recs[k] for k in sorted(recs)]
    ResultsStore(merged_path).write(out)
    return out


# -- aggregation -------------------------------------------------------------

@dataclass
class AggregateRow:
    group: str
    domain: str
    snapshot_step: int
    mean: float
    stderr: float
    n: int

    def label(self) -> str:
        return f"mean {self.mean:.3f} ± {self.stderr:.3f} (n={self.n})"


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=np.float64)
    if len(v) == 0:
        raise ValueError("no values to aggregate")
    if len(v) == 1:
        return float(v[0]), 0.0
    return float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(len(v)))


def aggregate(records: Iterable[EvalRecord], group_by: str = "algorithm",
              value: str = "normalized") -> list[AggregateRow]:
    """Mean and standard error per (group, domain, snapshot step).

    Pools seeds and tasks (and algorithms when grouping by category).
    """
    if group_by not in ("algorithm", "category"):
        raise ValueError(f"group_by must be 'algorithm' or 'category', got {group_by!r}")
    buckets: dict[tuple, list[float]] = {}
    for r in records:
        group = r.algorithm if group_by == "algorithm" else category_of(r.algorithm)
        buckets.setdefault((group, r.domain, r.snapshot_step), []).append(getattr(r, value))
    rows = []
    for (g, d, s), vals in sorted(buckets.items()):
        m, se = mean_stderr(vals)
        rows.append(AggregateRow(g, d, s, m, se, len(vals)))
    return rows


def normalize_records(records: Iterable[EvalRecord], table: ExpertTable,
                      digest: Optional[str] = None) -> list[EvalRecord]:
    """Attach expert scores from the calibration table; fails listing any uncalibrated tasks."""
    records = list(records)
    scores, missing = {}, []
    for task in sorted({r.task for r in records}):
        s = table.lookup(task, digest)
        if s is None or not s > 0:
            missing.append(task)
        scores[task] = s
    if missing:
        raise LookupError("uncalibrated tasks: " + ", ".join(missing))
    return [r.with_expert(scores[r.task]) for r in records]


# -- grid --------------------------------------------------------------------

def grid_cells(config: RunConfig) -> list[tuple]:
    """Every (algorithm, domain, task, snapshot_step, seed) the grid must produce."""
    cells = []
    g = config.grid
    for dom in g.domains:
        tasks = all_task_ids(dom)
        for algo in g.algorithms:
            for seed in g.seeds:
                for step in config.snapshot_steps:
                    cells += [(algo, dom, t, int(step), int(seed)) for t in tasks]
        if g.random_init:
            for seed in g.seeds:
                cells += [(RANDOM_INIT, dom, t, 0, int(seed)) for t in tasks]
    return cells


def run_unit(config: RunConfig, root, algorithm: str, domain: str, seed: int,
             experts: dict) -> list[EvalRecord]:
    """Pretrain (or reuse snapshots) and finetune all missing cells of one run."""
    cfg = resolve({}, {**flatten(config), "algorithm": algorithm, "domain": domain, "seed": str(seed)})
    d = run_dir(root, algorithm, domain, seed)
    store = ResultsStore(d / "results.csv")
    done = store.keys()
    tasks = all_task_ids(domain)
    steps = [0] if algorithm == RANDOM_INIT else list(cfg.snapshot_steps)
    todo = [(t, s) for s in steps for t in tasks if (algorithm, domain, t, s, seed) not in done]
    if not todo:
        return store.records()
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.txt").write_text(dump_flat(cfg), encoding="utf-8")
    if algorithm == RANDOM_INIT:
        snaps = {0: random_init_snapshot(cfg)}
    else:
        if all(snapshot_path(d, s).exists() for s in steps):
            snaps = {s: AgentSnapshot.load(snapshot_path(d, s)) for s in steps}
        else:
            snaps = {s.step: s for s in pretrain(cfg, d)}
    for task, step in todo:
        rec = finetune(snaps[step], task, cfg, experts.get(task))
        store.append(rec)
    return store.records()


def _unit_worker(args):
    flat, root, algorithm, domain, seed, experts = args
    run_unit(resolve({}, flat), root, algorithm, domain, seed, experts)
    return algorithm, domain, seed


def run_grid(config: RunConfig, root, jobs: int = 1) -> list[EvalRecord]:
    """Full sweep with resume: finished cells (per-run results) are never recomputed."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(dump_flat(config), encoding="utf-8")
    g = config.grid
    experts = {}
    table = ExpertTable(root / "expert.csv")
    digest = calibration_digest(config)
    for dom in g.domains:
        for tid in all_task_ids(dom):
            s = table.lookup(tid, digest)
            if s is None and g.calibrate:
                s = ensure_calibrated(table, tid, config)
            if s is not None:
                experts[tid] = s
    units = [(a, d, s) for d in g.domains for a in g.algorithms for s in g.seeds]
    if g.random_init:
        units += [(RANDOM_INIT, d, s) for d in g.domains for s in g.seeds]
    flat = flatten(config)
    args = [(flat, str(root), a, d, int(s), experts) for a, d, s in units]
    if jobs > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(jobs) as pool:
            list(pool.imap_unordered(_unit_worker, args))
    else:
        for a in args:
            _unit_worker(a)
    files = [run_dir(root, a, d, s) / "results.csv" for a, d, s in units]
    return merge_results(files, root / "results.csv")


# -- report ------------------------------------------------------------------

def report(results_path, expert_path, group_by: str = "category", digest: Optional[str] = None):
    """Markdown table and per-group CSV rows (normalized score vs snapshot step).

    A pure function of the two CSV files.
    """
    records = normalize_records(ResultsStore(results_path).records(), ExpertTable(expert_path), digest)
    rows = aggregate(records, group_by)
    lines = [f"Normalized scores (raw return / expert score, unclipped), grouped by {group_by}.", "",
             f"| {group_by} | domain | snapshot_step | normalized |", "|---|---|---|---|"]
    lines += [f"| {r.group} | {r.domain} | {r.snapshot_step} | {r.label()} |" for r in rows]
    csv_rows = [{"group": r.group, "domain": r.domain, "snapshot_step": r.snapshot_step,
                 "mean": repr(r.mean), "stderr": repr(r.stderr), "n": r.n} for r in rows]
    return "\n".join(lines) + "\n", _csv_bytes(("group", "domain", "snapshot_step", "mean", "stderr", "n"),
                                              csv_rows)
