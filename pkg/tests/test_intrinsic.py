import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urlb.intrinsic import (ALGORITHMS, APS, APSConfig, APT, APTConfig, CATEGORY, DIAYN, DIAYNConfig, ICM,
                            ICMConfig, IntrinsicConfig, Proto, ProtoConfig, RND, RNDConfig, SMM, SMMConfig,
                            Disagreement, DisagreementConfig, RunningNormalizer, TransitionBatch,
                            ensemble_variance, infer_task_vector, knn_reward, make_module,
                            particle_entropy_reward, ridge_solve, sinkhorn_knopp, smm_reward)
from urlb.nets import rng_stream


def brute_knn_reward(query, points, k, exclude_self=False):
    out = []
    for i, q in enumerate(query):
        d = sorted(math.dist(q, p) for j, p in enumerate(points) if not (exclude_self and i == j))
        out.append(math.log1p(sum(d[:k]) / k))
    return np.array(out)


def zero_net(net, bias=0.0):
    for k in net.params:
        net.params[k][...] = 0.0
    last = net.spec.n_layers - 1
    net.params[f"b{last}"][...] = bias
    net.params.bump()


def rand_batch(n, obs_dim, act_dim, skill=None, seed=0):
    rng = np.random.default_rng(seed)
    return TransitionBatch(rng.standard_normal((n, obs_dim)), rng.uniform(-1, 1, (n, act_dim)),
                           rng.standard_normal((n, obs_dim)), skill)


# -- particle estimator --------------------------------------------------------

def test_identical_rows_give_zero():
    assert np.all(particle_entropy_reward(np.ones((20, 3)), 12) == 0.0)


def test_hand_particle_example():
    r = particle_entropy_reward(np.array([0.0, 1.0, 3.0, 6.0]), 2)
    assert r[0] == pytest.approx(math.log(3.0), abs=1e-15)


def test_particle_needs_enough_rows():
    with pytest.raises(ValueError):
        particle_entropy_reward(np.zeros((3, 1)), 3)


def test_defaults_from_table():
    c = APTConfig()
    assert c.k == 12 and c.avg_top_k and APSConfig().k == 12


def test_sum_form():
    z = np.array([0.0, 1.0, 3.0, 6.0])
    assert particle_entropy_reward(z, 2, average=False)[0] == pytest.approx(math.log(2) + math.log(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 30), st.integers(1, 5), st.sampled_from([1, 2, 3]))
def test_particle_matches_brute_force(seed, n, d, k):
    z = np.random.default_rng(seed).standard_normal((n, d))
    assert np.allclose(particle_entropy_reward(z, k), brute_knn_reward(z, z, k, exclude_self=True),
                       atol=1e-12, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_particle_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((25, 3))
    perm = rng.permutation(25)
    assert np.allclose(particle_entropy_reward(z, 3)[perm], particle_entropy_reward(z[perm], 3), atol=1e-12)


# -- knowledge-based -----------------------------------------------------------

def test_icm_perfect_predictor():
    m = ICM(2, 1, ICMConfig(rep_dim=0, hidden_dim=8), rng_stream(0, "icm"))
    b = rand_batch(5, 2, 1)
    pred = m.nets["forward"](np.concatenate([b.obs, b.action], axis=1))
    assert np.allclose(m.rewards(TransitionBatch(b.obs, b.action, pred)), 0.0, atol=1e-15)


def test_icm_hand_reward():
    m = ICM(2, 1, ICMConfig(rep_dim=0, hidden_dim=8), rng_stream(0, "icm"))
    zero_net(m.nets["forward"])
    b = TransitionBatch(np.zeros((1, 2)), np.zeros((1, 1)), np.array([[1.0, 2.0]]))
    assert m.prediction_error(b)[0] == 5.0
    assert m.rewards(b)[0] == pytest.approx(math.log(6.0), abs=1e-12)


def test_icm_forward_arch_default():
    m = ICM(6, 2, ICMConfig(), rng_stream(0, "icm"))
    assert m.nets["forward"].spec.layer_widths == (512 + 2, 1024, 1024, 512)


def test_icm_encoder_ignores_forward_loss():
    m = ICM(3, 2, ICMConfig(rep_dim=4, hidden_dim=8, lr=1e-2), rng_stream(0, "icm"))
    zero_net(m.nets["inverse"])
    # with a zero inverse net the only encoder signal would come from the forward loss
    before = m.nets["encoder"].params.copy()
    m.update(rand_batch(16, 3, 2))
    W = m.nets["encoder"].params
    assert all(np.array_equal(W[k], before[k]) for k in before)


def test_disagreement_examples():
    assert ensemble_variance(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))[0] == pytest.approx(2 / 3, abs=1e-12)
    preds = np.array([[[0.0, 0.0]], [[1.0, math.sqrt(3)]], [[2.0, 2 * math.sqrt(3)]]])
    # two members at +-sqrt(v) have population variance v
    members = np.array([[[-math.sqrt(0.5), -math.sqrt(1.5)]], [[math.sqrt(0.5), math.sqrt(1.5)]]])
    assert ensemble_variance(members)[0] == pytest.approx(1.0, abs=1e-12)
    assert ensemble_variance(preds)[0] == pytest.approx((2 / 3 + 2) / 2, abs=1e-12)


def test_identical_members_zero():
    m = Disagreement(3, 2, DisagreementConfig(ensemble_size=3, hidden_dim=8), rng_stream(0, "d"))
    for net in list(m.nets.values())[1:]:
        net.load(m.nets["member0"].params)
    assert np.all(m.rewards(rand_batch(4, 3, 2)) == 0.0)


def test_rnd_copied_predictor():
    m = RND(3, 1, RNDConfig(rep_dim=4, hidden_dim=8), rng_stream(0, "rnd"))
    m.nets["predictor"].load(m.target.params)
    assert np.all(m.rewards(rand_batch(4, 3, 1)) == 0.0)


def test_normalizer_clip():
    n = RunningNormalizer(1, clip=5.0)
    n.update(np.array([[-1.0], [1.0]]))  # mean 0, population var 1
    assert n.normalize(np.array([10.0]))[0] == 5.0
    assert n.normalize(np.array([0.5]))[0] == pytest.approx(0.5, rel=1e-7)


def test_rnd_target_stays_frozen():
    m = RND(3, 1, RNDConfig(rep_dim=4, hidden_dim=8, lr=1e-2), rng_stream(0, "rnd"))
    before = m.target.params.copy()
    for s in range(5):
        m.update(rand_batch(8, 3, 1, seed=s))
    assert all(np.array_equal(m.target.params[k], before[k]) for k in before)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_normalizer_matches_numpy(seed, n):
    x = np.random.default_rng(seed).normal(3, 2, (n, 3))
    norm = RunningNormalizer(3)
    for chunk in np.array_split(x, 3):
        if len(chunk):
            norm.update(chunk)
    assert np.allclose(norm.mean, x.mean(0)) and np.allclose(norm.var, x.var(0))


# -- data-based ------------------------------------------------------------------

def test_apt_collapsed_encoder():
    m = APT(3, 1, APTConfig(rep_dim=4, hidden_dim=8, k=3), rng_stream(0, "apt"))
    zero_net(m.nets["encoder"], bias=0.3)
    assert np.all(m.rewards(rand_batch(10, 3, 1)) == 0.0)


def test_apt_identity_encoder_matches_particle():
    m = APT(1, 1, APTConfig(rep_dim=0, hidden_dim=8, k=2), rng_stream(0, "apt"))
    pts = np.array([[0.0], [1.0], [3.0], [6.0]])
    b = TransitionBatch(np.zeros((4, 1)), np.zeros((4, 1)), pts)
    assert np.array_equal(m.rewards(b), particle_entropy_reward(pts, 2))


def test_sinkhorn_uniform():
    q = sinkhorn_knopp(np.zeros((8, 512)), 0.1, 3)
    assert np.allclose(q, 1 / 512, rtol=0, atol=1e-15)


def test_sinkhorn_rows_are_distributions():
    q = sinkhorn_knopp(np.random.default_rng(0).standard_normal((16, 5)), 0.1, 3)
    assert np.allclose(q.sum(1), 1.0)


def proto_module(**kw):
    c = ProtoConfig(rep_dim=8, pred_dim=4, proj_dim=8, num_protos=kw.pop("num_protos", 16), queue_size=64, **kw)
    return Proto(3, 1, c, rng_stream(0, "proto"))


def test_proto_uniform_scores_loss():
    m = proto_module(num_protos=512)
    m.protos["P"][...] = m.protos["P"][0]
    out = m.update(rand_batch(8, 3, 1))
    assert out["proto_loss"] == pytest.approx(math.log(512), abs=1e-12)


def test_prototypes_stay_unit_norm():
    m = proto_module(lr=1e-2)
    for s in range(10):
        m.update(rand_batch(16, 3, 1, seed=s))
        assert np.all(np.abs(np.linalg.norm(m.protos["P"], axis=1) - 1) <= 1e-9)


def test_proto_reward_against_candidate_set():
    m = proto_module(num_candidates=2, k=3)
    m._target_embed = lambda x: np.asarray(x, dtype=float)
    rng = np.random.default_rng(5)
    m.memory = rng.standard_normal((32, 4))
    query = rng.standard_normal((6, 4))
    cand = m.candidates()
    # independent candidate set: each prototype's two nearest memory rows
    expect = set()
    for p in m.protos["P"]:
        d = [math.dist(p, r) for r in m.memory]
        expect.update(np.argsort(d, kind="stable")[:2].tolist())
    assert len(cand) == len(expect)
    assert np.allclose(m.rewards(TransitionBatch(query, np.zeros((6, 1)), query)),
                       brute_knn_reward(query, m.memory[sorted(expect)], 3), atol=1e-12)


def test_proto_memory_is_bounded():
    m = proto_module()
    for s in range(6):
        m.update(rand_batch(16, 3, 1, seed=s))
    assert len(m.memory) == 64


def test_knn_reward_caps_k():
    r = knn_reward(np.zeros((2, 1)), np.array([[1.0], [3.0]]), 5)
    assert np.allclose(r, math.log1p(2.0))


# -- competence-based -------------------------------------------------------------

def test_smm_uniform_prior_term():
    m = SMM(2, 1, SMMConfig(rep_dim=4, hidden_dim=8, vae_latent=2), rng_stream(0, "smm"), obs_volume=4.0)
    w = np.tile(np.eye(4)[0], (3, 1))
    terms = m.reward_terms(TransitionBatch(np.zeros((3, 2)), np.zeros((3, 1)), np.ones((3, 2)), w))
    assert np.allclose(terms["log_p_star"], -math.log(4))
    assert np.allclose(-terms["log_p_w"], math.log(4))


def test_smm_hand_set_terms_cancel():
    log_p_star, log_q = -1.3, -1.3
    assert smm_reward(log_p_star, log_q, -math.log(4), math.log(0.25)) == pytest.approx(0.0, abs=1e-15)


def test_smm_reward_is_sum_of_terms():
    m = SMM(2, 1, SMMConfig(rep_dim=4, hidden_dim=8, vae_latent=2), rng_stream(0, "smm"), obs_volume=4.0)
    w = np.eye(4)[[0, 1, 2, 3, 0]]
    b = rand_batch(5, 2, 1, skill=w)
    t = m.reward_terms(b)
    assert np.allclose(m.rewards(b), t["log_p_star"] - t["log_q"] - t["log_p_w"] + t["log_d"], atol=1e-12)


def test_smm_update_reduces_vae_loss():
    m = SMM(2, 1, SMMConfig(rep_dim=4, hidden_dim=16, vae_latent=2), rng_stream(0, "smm"))
    b = rand_batch(64, 2, 1, skill=np.eye(4)[np.arange(64) % 4])
    first = m.update(b)["vae_loss"]
    for _ in range(50):
        last = m.update(b)["vae_loss"]
    assert last < first


def test_diayn_uniform_discriminator_reward_zero():
    m = DIAYN(2, 1, DIAYNConfig(rep_dim=4, hidden_dim=8), rng_stream(0, "diayn"))
    zero_net(m.nets["discriminator"])
    b = rand_batch(5, 2, 1, skill=np.eye(16)[[0, 3, 5, 7, 15]])
    assert np.all(np.abs(m.rewards(b)) <= 1e-12)


def test_diayn_perfect_discriminator_reward():
    m = DIAYN(2, 1, DIAYNConfig(rep_dim=4, hidden_dim=8), rng_stream(0, "diayn"))
    zero_net(m.nets["discriminator"])
    m.nets["discriminator"].params["b2"][3] = 1000.0
    b = rand_batch(2, 2, 1, skill=np.eye(16)[[3, 3]])
    assert np.allclose(m.rewards(b), math.log(16), atol=1e-12)


def test_diayn_learns_to_discriminate_separable_states():
    m = DIAYN(2, 1, DIAYNConfig(skill_dim=4, rep_dim=8, hidden_dim=32, lr=1e-2), rng_stream(0, "diayn"))
    idx = np.arange(128) % 4
    centres = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], float)
    obs = centres[idx] + 0.05 * np.random.default_rng(0).standard_normal((128, 2))
    b = TransitionBatch(obs, np.zeros((128, 1)), obs, np.eye(4)[idx])
    for _ in range(200):
        m.update(b)
    assert m.accuracy(obs, np.eye(4)[idx]) == 1.0


def test_aps_alignment_terms():
    w = np.eye(10)[2]
    assert APS.alignment_term(w[None], w[None])[0] == 1.0
    assert APS.alignment_term(np.eye(10)[5][None], w[None])[0] == 0.0


def test_aps_reward_is_particle_plus_cosine():
    m = APS(3, 1, APSConfig(hidden_dim=8, k=3), rng_stream(0, "aps"))
    rng = np.random.default_rng(1)
    w = rng.standard_normal((20, 10))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    b = rand_batch(20, 3, 1, skill=w)
    u = m.nets["features"](b.next_obs)
    phi = u / np.linalg.norm(u, axis=1, keepdims=True)
    expect = brute_knn_reward(phi, phi, 3, exclude_self=True) + np.einsum("ij,ij->i", phi, w)
    assert np.allclose(m.rewards(b), expect, atol=1e-12)


def test_infer_identity_rows():
    psi = np.eye(10)
    assert np.allclose(infer_task_vector(psi, psi[3]), np.eye(10)[3], atol=1e-9)


def test_planted_task_recovery():
    rng = np.random.default_rng(3)
    psi = rng.standard_normal((4096, 10))
    w = rng.standard_normal(10)
    assert np.max(np.abs(ridge_solve(psi, psi @ w) - w)) < 1e-6


def test_zero_rewards_fall_back_to_random_unit():
    w = infer_task_vector(np.random.default_rng(0).standard_normal((50, 10)), np.zeros(50),
                          rng=np.random.default_rng(1))
    assert abs(np.linalg.norm(w) - 1) < 1e-12


def test_skill_sampling():
    cfg = IntrinsicConfig()
    rng = rng_stream(0, "skills")
    diayn = DIAYN(2, 1, DIAYNConfig(rep_dim=4, hidden_dim=8), rng)
    counts = np.bincount([int(np.argmax(diayn.sample_skill(rng))) for _ in range(10_000)], minlength=16)
    sigma = math.sqrt(10_000 * (1 / 16) * (15 / 16))
    assert np.all(np.abs(counts - 625) <= 5 * sigma)
    aps = APS(2, 1, APSConfig(hidden_dim=8), rng)
    assert abs(np.linalg.norm(aps.sample_skill(rng)) - 1) < 1e-9
    icm = make_module("icm", 2, 1, cfg, rng)
    assert icm.sample_skill(rng) is None
    smm = SMM(2, 1, SMMConfig(rep_dim=4, hidden_dim=8, vae_latent=2), rng)
    assert smm.sample_skill(rng).shape == (4,) and len(smm.candidate_skills()) == 4


def test_categories():
    assert {a for a, c in CATEGORY.items() if c == "knowledge"} == {"icm", "disagreement", "rnd"}
    assert {a for a, c in CATEGORY.items() if c == "data"} == {"apt", "proto"}
    assert {a for a, c in CATEGORY.items() if c == "competence"} == {"smm", "diayn", "aps"}
    for a in ALGORITHMS:
        assert make_module(a, 4, 2, small_config(), rng_stream(0, a)).category == CATEGORY[a]


def small_config():
    cfg = IntrinsicConfig()
    for sub in vars(cfg).values():
        for field in ("hidden_dim", "rep_dim", "proj_dim"):
            if hasattr(sub, field):
                setattr(sub, field, 8)
    cfg.proto.pred_dim, cfg.proto.num_protos, cfg.proto.queue_size = 4, 8, 32
    cfg.smm.vae_latent = 2
    return cfg


@pytest.mark.parametrize("algo", ALGORITHMS)
def test_state_round_trip(algo):
    cfg = small_config()
    a = make_module(algo, 4, 2, cfg, rng_stream(0, algo))
    b = make_module(algo, 4, 2, cfg, rng_stream(1, algo))
    skill = a.sample_skill(np.random.default_rng(0))
    skills = None if skill is None else np.tile(skill, (20, 1))
    batch = rand_batch(20, 4, 2, skill=skills)
    for _ in range(3):
        a.update(batch)
    b.load_state_arrays(a.state_arrays())
    assert np.array_equal(a.rewards(batch), b.rewards(batch))
