import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urlb import protocol
from urlb.config import calibration_digest
from urlb.envs import Env, make_domain
from urlb.intrinsic import ALGORITHMS
from urlb.nets import rng_stream
from urlb.protocol import (AgentSnapshot, EvalRecord, ExpertTable, ResultsStore, aggregate, build_learner,
                           calibrate_expert, evaluate, finetune, grid_cells, normalize_records, pretrain,
                           random_init_snapshot, report, run_grid, select_finetune_skill)


def record(algo="apt", task="pointmass/reach_top_left", seed=0, value=0.5, step=100, expert=1.0):
    cat = protocol.category_of(algo)
    return EvalRecord(algo, cat, "pointmass", task, step, seed, value * expert, expert, value)


# -- pretraining ---------------------------------------------------------------

def test_single_snapshot_at_final_step(tiny):
    snaps = pretrain(tiny(algorithm="rnd", pretrain_steps=5000, snapshot_steps=5000))
    assert len(snaps) == 1 and snaps[0].meta["step"] == 5000


@pytest.mark.parametrize("algo", ALGORITHMS)
def test_pretraining_never_reads_task_rewards(tiny, algo):
    snaps = pretrain(tiny(algorithm=algo))
    assert [s.step for s in snaps] == [150, 300]
    assert all(s.meta["extrinsic_reads"] == 0 for s in snaps)


def test_pretraining_is_byte_deterministic(tiny, tmp_path):
    a = pretrain(tiny(algorithm="apt"), tmp_path / "a")
    b = pretrain(tiny(algorithm="apt"), tmp_path / "b")
    assert [s.to_bytes() for s in a] == [s.to_bytes() for s in b]
    assert (tmp_path / "a" / "snapshot_00000300.bin").read_bytes() == a[-1].to_bytes()
    assert (tmp_path / "a" / "metrics.csv").exists() and (tmp_path / "a" / "config.txt").exists()


def test_snapshot_round_trip(tiny):
    snap = pretrain(tiny(algorithm="proto"))[-1]
    blob = snap.to_bytes()
    assert AgentSnapshot.from_bytes(blob).to_bytes() == blob


def test_skills_resampled_every_50_steps(tiny, monkeypatch):
    cfg = tiny(algorithm="diayn", episode_length=100, pretrain_steps=300, snapshot_steps=300)
    calls = []
    orig = protocol.build_learner

    def spy(c):
        learner = orig(c)
        inner = learner.module.sample_skill

        def counted(rng):
            calls.append(1)
            return inner(rng)
        learner.module.sample_skill = counted
        return learner
    monkeypatch.setattr(protocol, "build_learner", spy)
    pretrain(cfg)
    assert len(calls) == 300 // 50


def test_bad_snapshot_steps(tiny):
    with pytest.raises(ValueError):
        tiny(snapshot_steps="300,150")
    with pytest.raises(ValueError):
        tiny(snapshot_steps="400")


# -- finetuning ----------------------------------------------------------------

def test_zero_step_finetune_is_zero_shot(tiny):
    cfg = tiny(algorithm="rnd", finetune_steps=0)
    snap = pretrain(cfg)[-1]
    rec = finetune(snap, "pointmass/reach_top_left", cfg)
    learner = build_learner(cfg)
    learner.load(snap)
    tag = "finetune/pointmass/reach_top_left/300"
    env = Env(make_domain("pointmass", episode_length=50), rng_stream(cfg.seed, f"{tag}/eval"))
    assert rec.raw_return == evaluate(learner.agent, "pointmass/reach_top_left", 2, env)


def test_random_init_uses_same_path(tiny):
    snap = random_init_snapshot(tiny())
    rec = finetune(snap, "pointmass/reach_top_left", tiny())
    assert rec.snapshot_step == 0 and rec.algorithm == "random_init"


def test_finetune_rejects_other_domain(tiny):
    snap = random_init_snapshot(tiny())
    with pytest.raises(ValueError):
        finetune(snap, "slider/run", tiny())


def test_finetune_is_reproducible(tiny):
    cfg = tiny(algorithm="diayn")
    snap = pretrain(cfg)[0]
    a = finetune(snap, "pointmass/reach_top_right", cfg, 50.0)
    b = finetune(AgentSnapshot.from_bytes(snap.to_bytes()), "pointmass/reach_top_right", cfg, 50.0)
    assert a.row() == b.row() and a.normalized == a.raw_return / 50.0


def test_evaluate_on_deterministic_env():
    cfg_env = make_domain("slider", episode_length=20)
    from urlb.backbone import Agent, BackboneConfig
    agent = Agent(2, 2, BackboneConfig(hidden_dim=8), rng_stream(0, "a"))
    env = Env(cfg_env, rng_stream(0, "e"))
    single = evaluate(agent, "slider/walk", 1, env)
    assert evaluate(agent, "slider/walk", 5, env) == single


class ScriptedEnv:
    """Episodes of one step whose reward follows a script."""

    def __init__(self, returns):
        self.returns = list(returns)
        self.t = 0
        self.resets = 0
        self.extrinsic_reads = 0

    @property
    def done(self):
        return self.t >= 1

    def reset(self):
        self.t = 0
        self.resets += 1
        return np.zeros(1)

    def step(self, action):
        self.t = 1
        return np.zeros(1)

    def reward(self, task):
        self.extrinsic_reads += 1
        return self.returns[self.resets - 1]


class StubAgent:
    def act(self, obs, mode, rng, step=0, skill=None):
        return np.zeros(1)


def test_evaluate_mean():
    assert evaluate(StubAgent(), "t", 2, ScriptedEnv([100.0, 200.0])) == 150.0


class OneHotStub:
    skill_kind, skill_every = "onehot", 50

    def __init__(self, n):
        self.n = n

    def candidate_skills(self):
        return [np.eye(self.n)[i] for i in range(self.n)]


def test_single_candidate_needs_no_rollout():
    env = ScriptedEnv([])
    w = select_finetune_skill(OneHotStub(1), StubAgent(), "t", 5, env, np.random.default_rng(0))
    assert np.array_equal(w, [1.0]) and env.resets == 0


def test_argmax_skill_and_ties():
    w = select_finetune_skill(OneHotStub(2), StubAgent(), "t", 5, ScriptedEnv([3.0, 7.0]), np.random.default_rng(0))
    assert np.argmax(w) == 1
    w = select_finetune_skill(OneHotStub(3), StubAgent(), "t", 5, ScriptedEnv([7.0, 2.0, 7.0]), np.random.default_rng(0))
    assert np.argmax(w) == 0


def test_no_skill_module():
    assert select_finetune_skill(None, StubAgent(), "t", 5, ScriptedEnv([]), np.random.default_rng(0)) is None


def test_aps_selection_delegates_to_inference(tiny):
    cfg = tiny(algorithm="aps")
    learner = build_learner(cfg)
    dom = make_domain("pointmass", episode_length=50)
    seen = {}
    orig = learner.module.infer_task

    def spy(obs, rewards, rng=None):
        seen["obs"], seen["rewards"] = obs.copy(), rewards.copy()
        return orig(obs, rewards, rng)
    learner.module.infer_task = spy
    w = select_finetune_skill(learner.module, learner.agent, "pointmass/reach_top_left", 2,
                              Env(dom, rng_stream(0, "sel")), np.random.default_rng(0))
    assert len(seen["rewards"]) == 100
    assert np.allclose(w, orig(seen["obs"], seen["rewards"], np.random.default_rng(99)))
    assert abs(np.linalg.norm(w) - 1) < 1e-12


# -- calibration ---------------------------------------------------------------

def test_expert_is_max_over_seeds(tiny):
    scores = {0: 180.0, 1: 210.0}
    best, per = calibrate_expert("pointmass/reach_top_left", tiny(), 10, [0, 1],
                                 runner=lambda t, c, b, s: scores[s])
    assert best == 210.0 and per == [180.0, 210.0]


def test_expert_table_digest(tmp_path, tiny):
    table = ExpertTable(tmp_path / "expert.csv")
    d = calibration_digest(tiny())
    table.record("pointmass/reach_top_left", d, 210.0, 200)
    assert table.lookup("pointmass/reach_top_left", d) == 210.0
    assert table.lookup("pointmass/reach_top_left", calibration_digest(tiny(backbone__lr=1e-3))) is None
    assert calibration_digest(tiny(algorithm="diayn")) == d
    table.record("pointmass/reach_top_left", "other", 1.0, 200)
    with pytest.raises(LookupError):
        table.lookup("pointmass/reach_top_left")


def test_real_calibration_runs(tiny):
    best, per = calibrate_expert("pointmass/reach_top_left", tiny(), 150, [0, 1])
    assert best == max(per) and len(per) == 2


# -- aggregation ---------------------------------------------------------------

def test_single_record_has_zero_stderr():
    row = aggregate([record(value=0.7)])[0]
    assert (row.mean, row.stderr, row.n) == (0.7, 0.0, 1)


def test_two_record_fixture():
    row = aggregate([record(seed=0, value=0.4), record(seed=1, value=0.6)])[0]
    assert abs(row.mean - 0.5) < 1e-12 and abs(row.stderr - 0.1) < 1e-12
    assert row.label() == "mean 0.500 ± 0.100 (n=2)"


def test_category_mapping():
    rows = aggregate([record("apt"), record("proto", seed=1)], group_by="category")
    assert len(rows) == 1 and rows[0].group == "data" and rows[0].n == 2


def test_normalization_requires_calibration(tmp_path):
    recs = [record(task="pointmass/reach_top_left"), record(task="pointmass/reach_top_right")]
    table = ExpertTable(tmp_path / "expert.csv")
    table.record("pointmass/reach_top_left", "d", 2.0, 10)
    with pytest.raises(LookupError, match="reach_top_right"):
        normalize_records(recs, table)


values = st.floats(0.0, 100.0, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(ALGORITHMS), st.integers(0, 4), values), min_size=1, max_size=30))
def test_category_n_is_sum_of_algorithm_n(items):
    recs = [record(a, seed=s, value=v) for a, s, v in items]
    by_algo = {r.group: r.n for r in aggregate(recs, "algorithm")}
    for row in aggregate(recs, "category"):
        members = [a for a in by_algo if protocol.category_of(a) == row.group]
        assert row.n == sum(by_algo[a] for a in members)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 500), st.floats(1, 500)), min_size=1, max_size=10))
def test_doubling_leaves_normalized_unchanged(pairs):
    for raw, expert in pairs:
        a = EvalRecord("apt", "data", "pointmass", "t", 1, 0, raw).with_expert(expert)
        b = EvalRecord("apt", "data", "pointmass", "t", 1, 0, 2 * raw).with_expert(2 * expert)
        assert a.normalized == b.normalized


def test_normalized_is_unclipped():
    assert EvalRecord("apt", "data", "pointmass", "t", 1, 0, 300.0).with_expert(200.0).normalized == 1.5


def test_record_csv_round_trip(tmp_path):
    store = ResultsStore(tmp_path / "r.csv")
    recs = [record(value=1 / 3), record(seed=1, value=math.pi)]
    for r in recs:
        store.append(r)
    assert store.records() == recs


def test_report_is_pure(tmp_path):
    ResultsStore(tmp_path / "results.csv").write([record(seed=0, value=0.4), record(seed=1, value=0.6)])
    ExpertTable(tmp_path / "expert.csv").record("pointmass/reach_top_left", "d", 1.0, 10)
    md1, csv1 = report(tmp_path / "results.csv", tmp_path / "expert.csv", "algorithm")
    md2, csv2 = report(tmp_path / "results.csv", tmp_path / "expert.csv", "algorithm")
    assert md1 == md2 and csv1 == csv2
    assert "mean 0.500 ± 0.100 (n=2)" in md1 and "unclipped" in md1


# -- grid ------------------------------------------------------------------------

def grid_config(tiny):
    return tiny(grid__algorithms="rnd", grid__domains="pointmass", grid__seeds="0,1",
                snapshot_steps="300", finetune_steps="120", expert_budget="120")


def test_grid_covers_every_cell_once(tiny, tmp_path):
    cfg = grid_config(tiny)
    recs = run_grid(cfg, tmp_path)
    keys = [r.key for r in recs]
    assert sorted(keys) == sorted(grid_cells(cfg)) and len(set(keys)) == len(keys)
    assert all(np.isfinite(r.normalized) for r in recs)


def test_grid_resume_skips_finished_cells(tiny, tmp_path, monkeypatch):
    cfg = grid_config(tiny)
    run_grid(cfg, tmp_path / "full")
    full = (tmp_path / "full" / "results.csv").read_bytes()

    # interrupted sweep: one run finished two cells, the other nothing yet
    part = tmp_path / "part"
    run_grid(cfg, part)
    store = ResultsStore(protocol.run_dir(part, "rnd", "pointmass", 1) / "results.csv")
    store.write(store.records()[:2])
    (part / "results.csv").unlink()
    import shutil
    shutil.rmtree(protocol.run_dir(part, "random_init", "pointmass", 0))

    calls = []
    real = protocol.finetune
    monkeypatch.setattr(protocol, "finetune", lambda *a, **k: calls.append(a[1]) or real(*a, **k))
    run_grid(cfg, part)
    assert len(calls) == 2 + 4
    assert (part / "results.csv").read_bytes() == full
