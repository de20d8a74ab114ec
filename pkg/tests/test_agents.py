import numpy as np
import pytest
from scipy import stats

from wocar.agents import (
    PointMassEnv,
    ReplayBuffer,
    Schedules,
    TrainConfig,
    TrainingAborted,
    extract_tabular_policy,
    make_env,
    robust_target,
    tabular_report,
    vanilla_dqn_train,
    vanilla_ppo_train,
    vanilla_target,
    wocar_dqn_train,
    wocar_ppo_train,
)
from wocar.agents.common import Trainable, tabular_adv_mask
from wocar.agents.ppo import PPOState, _policy_grad
from wocar.approximator import Net, NetSpec, flatten
from wocar.attacks_eval import AttackSpec, evaluate
from wocar.losses import log_softmax
from wocar.mdp import DeterministicPolicy
from wocar.worst_attack import natural_return, policy_evaluation, state_values, value_iteration


@pytest.fixture(scope="module")
def gohome():
    return make_env("gohome")


# --------------------------------------------------------------------------
# replay and schedules


def test_replay_uniform_chi_square():
    buf = ReplayBuffer(100)
    for i in range(100):
        buf.add([float(i)], i, 0.0, [0.0], False)
    idx = buf.sample_indices(100_000, np.random.default_rng(7))
    counts = np.bincount(idx, minlength=100)
    assert stats.chisquare(counts).pvalue > 0.001
    assert np.array_equal(buf.sample(5, np.random.default_rng(1))["a"],
                          buf.sample_indices(5, np.random.default_rng(1)))


def test_replay_ring_overwrites_oldest():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.add([float(i)], i, float(i), [0.0], i == 4)
    assert len(buf) == 3 and buf.inserted == 5
    seen = set(buf.sample(200, np.random.default_rng(0))["a"].tolist())
    assert seen == {2, 3, 4}
    with pytest.raises(ValueError):
        ReplayBuffer(10).sample(1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ReplayBuffer(0)


@pytest.mark.parametrize("shape", ["dqn", "ppo", "const"])
def test_schedules_monotone_and_hit_targets(shape):
    sch = Schedules(1000, 0.3, 0.5, shape)
    eps = [sch.eps_of(t) for t in range(1001)]
    kap = [sch.kappa_wst_of(t) for t in range(1001)]
    assert eps[0] == 0.0
    assert np.all(np.diff(eps) >= 0) and np.all(np.diff(kap) >= 0)
    assert eps[100] == 0.0 and eps[101] > 0
    assert eps[600] == pytest.approx(0.3, abs=1e-15) and eps[1000] == 0.3
    assert kap[1000] == pytest.approx(0.5, abs=1e-12)
    if shape == "dqn":
        assert kap[333] == 0.0 and kap[334] > 0
    if shape == "ppo":
        assert kap[500] == pytest.approx(0.25)


def test_schedule_rejects_bad_input():
    with pytest.raises(ValueError):
        Schedules(0, 0.1, 0.5)
    with pytest.raises(ValueError):
        Schedules(10, 0.1, 0.5, "linear")
    with pytest.raises(ValueError):
        Schedules(10, 0.1, 0.5, eps_start_frac=0.7, eps_end_frac=0.6)


def test_config_defaults_per_algo():
    cfg = TrainConfig()
    assert cfg.schedules("dqn").kappa_target == 0.5 and cfg.schedules("dqn").kappa_shape == "dqn"
    assert cfg.schedules("ppo").kappa_target == 0.8 and cfg.schedules("ppo").kappa_shape == "ppo"
    assert cfg.replace(lr=0.5).lr == 0.5
    with pytest.raises(KeyError):
        cfg.replace(learning_rate=0.5)


# --------------------------------------------------------------------------
# targets and degenerate weights


def test_robust_target_mixture():
    rng = np.random.default_rng(3)
    qv, qw = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    r, done = rng.normal(size=8), rng.random(8) < 0.3
    y = robust_target(qv, qw, r, done, 0.9, 0.3)
    hand = r + 0.9 * np.where(done, 0, (0.3 * qv + 0.7 * qw).max(axis=1))
    assert np.allclose(y, hand, atol=0, rtol=0)
    assert np.array_equal(robust_target(qv, qw, r, done, 0.9, 1.0), vanilla_target(qv, r, done, 0.9))


def test_dqn_kappa_one_target_matches_vanilla(gohome):
    cfg = TrainConfig(total_steps=1500, learning_starts=200, log_every=250, kappa_wst=1.0, kappa_shape="const",
                      kappa_reg=0.0)
    _, m = wocar_dqn_train(gohome, cfg, 4)
    gaps = [rec["target_gap_vs_vanilla"] for rec in m if "target_gap_vs_vanilla" in rec]
    assert len(gaps) >= 5 and max(gaps) <= 1e-9
    # the robust Q starts equal to the vanilla Q, so its losses replay the baseline run
    _, mv = vanilla_dqn_train(gohome, cfg, 4)
    robust = [r["loss_robust"] for r in m if "loss_robust" in r]
    vanilla = [r["loss_vanilla"] for r in mv if "loss_vanilla" in r]
    assert len(robust) == len(vanilla) >= 5
    assert np.allclose(robust, vanilla, rtol=0, atol=1e-9)
    assert [r["natural_return"] for r in m] == [r["natural_return"] for r in mv]


@pytest.mark.parametrize("env_name", ["gohome", "point-mass"])
def test_ppo_zero_weights_bit_identical(env_name):
    env = make_env(env_name)
    cfg = TrainConfig(total_steps=1200, rollout_steps=256, log_every=600, kappa_wst=0.0, kappa_reg=0.0,
                      eval_episodes=2)
    sv, mv = vanilla_ppo_train(env, cfg, 11)
    sw, mw = wocar_ppo_train(env, cfg, 11)
    assert np.array_equal(sv.policy.params, sw.policy.params)
    assert np.array_equal(sv.value.params, sw.value.params)
    for a, b in zip(mv, mw):
        for k in ("loss_policy", "loss_value", "natural_return", "worst_eval_return", "train_return"):
            if k in a:
                assert a[k] == b[k]
    if env_name == "point-mass":
        assert np.array_equal(sv.log_std, sw.log_std)


def test_zero_budget_mask_is_greedy_singleton(gohome, rng):
    net = Net(NetSpec((gohome.obs_dim, 8, gohome.n_actions)), rng.normal(size=NetSpec(
        (gohome.obs_dim, 8, gohome.n_actions)).n_params))
    states = np.arange(gohome.mdp.n_states)
    mask = tabular_adv_mask(net, gohome, states, active=False)
    assert np.all(mask.sum(axis=1) == 1)
    assert np.array_equal(mask.argmax(axis=1), net(gohome.observations).argmax(axis=1))
    full = tabular_adv_mask(net, gohome, states, active=True)
    assert np.all(full >= mask)


def test_zero_budget_critic_tracks_natural_values(gohome):
    cfg = TrainConfig(total_steps=3000, log_every=1000, eps_target=0.0)
    _, m = wocar_dqn_train(gohome, cfg, 0)
    last = m[-1]
    assert last["eps"] == 0.0
    assert abs(last["worst_critic_mean"] - last["budget_value_mean"]) < 0.5
    assert abs(last["worst_critic_value"] - last["budget_value_start"]) < 0.5


# --------------------------------------------------------------------------
# run hygiene


def test_dqn_seed_determinism(gohome):
    cfg = TrainConfig(total_steps=1200, learning_starts=200, log_every=400)
    a = wocar_dqn_train(gohome, cfg, 5)[1]
    b = wocar_dqn_train(gohome, cfg, 5)[1]
    c = wocar_dqn_train(gohome, cfg, 6)[1]
    assert a == b
    assert a != c


def test_ppo_seed_determinism():
    env = make_env("point-mass")
    cfg = TrainConfig(total_steps=1024, rollout_steps=256, log_every=512, eval_episodes=2)
    assert wocar_ppo_train(env, cfg, 2)[1] == wocar_ppo_train(env, cfg, 2)[1]


def test_log_cadence_and_callback(gohome):
    seen = []
    cfg = TrainConfig(total_steps=1100, learning_starts=100, log_every=500)
    _, m = vanilla_dqn_train(gohome, cfg, 0, on_log=lambda rec, st: seen.append(rec["step"]))
    assert [r["step"] for r in m] == seen == [500, 1000, 1100]
    for r in m:
        assert {"natural_return", "worst_eval_return", "eps", "kappa_wst"} <= set(r)


def test_dqn_rejects_continuous_env():
    with pytest.raises(ValueError):
        vanilla_dqn_train(PointMassEnv(), TrainConfig(total_steps=10), 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_dqn(gohome):
    with pytest.raises(TrainingAborted):
        wocar_dqn_train(gohome, TrainConfig(total_steps=800, learning_starts=100, lr=1e200, grad_clip=1e300), 0)


def test_ppo_ratio_guard(gohome):
    with pytest.raises(TrainingAborted):
        # any update moves some ratio off 1 by more than this
        vanilla_ppo_train(gohome, TrainConfig(total_steps=2048, rollout_steps=512, max_ratio=1.0 + 1e-9), 0)


def test_ppo_clipped_branch_has_no_gradient(rng):
    spec = NetSpec((3, 4), "relu", "softmax-logits")
    pol = Trainable.create(spec, 0)
    state = PPOState(pol, pol.copy())
    s = rng.normal(size=(6, 3))
    a = rng.integers(0, 4, 6)
    lp = log_softmax(pol(s))[np.arange(6), a]
    # old log-probs chosen so each ratio sits outside the clip range on the side
    # where the clipped term is the minimum
    adv = np.array([1.0, 1.0, 1.0, -1.0, -1.0, -1.0])
    logp_old = np.where(adv > 0, lp - 0.5, lp + 0.5)
    _, grad, info = _policy_grad(state, s, a, logp_old, adv, 0.2, 0.0)
    assert np.all(info["clipped"])
    assert np.all(grad == 0)
    # inside the range every sample contributes
    _, grad, info = _policy_grad(state, s, a, lp, adv, 0.2, 0.0)
    assert not np.any(info["clipped"]) and np.any(grad != 0)


# --------------------------------------------------------------------------
# tabular policy extraction


def test_extract_constant_net(gohome):
    spec = NetSpec((gohome.obs_dim, gohome.n_actions))
    w = np.zeros((gohome.n_actions, gohome.obs_dim))
    net = Net(spec, flatten([(w, np.array([0.0, 1.0, 3.0, 1.0]))]))
    assert set(extract_tabular_policy(net, gohome.mdp).action_of) == {2}
    tied = Net(spec, np.zeros(spec.n_params))
    assert set(extract_tabular_policy(tied, gohome.mdp).action_of) == {0}


def test_extract_table_lookup(gohome, rng):
    n, m = gohome.mdp.n_states, gohome.n_actions
    table = rng.normal(size=(n, m))
    net = Net(NetSpec((n, m)), flatten([(table.T.copy(), np.zeros(m))]))
    assert extract_tabular_policy(net, gohome.mdp).action_of == tuple(table.argmax(axis=1))


def test_extracted_policy_value_matches_monte_carlo(rng):
    env = make_env("gohome", slip=0.2)
    n, m = env.mdp.n_states, env.n_actions
    table = rng.normal(size=(n, m))
    net = Net(NetSpec((n, m)), flatten([(table.T.copy(), np.zeros(m))]))
    pol = extract_tabular_policy(net, env.mdp)
    exact = natural_return(env.mdp, pol)
    rep = evaluate(net, env, AttackSpec("none"), 2000, seed=1, max_steps=400)
    se = np.std(rep.returns) / np.sqrt(rep.episodes)
    assert abs(rep.mean - exact) <= 3 * se + 1e-9


def test_vanilla_dqn_reaches_near_optimal(gohome):
    _, m = vanilla_dqn_train(gohome, TrainConfig(total_steps=10_000, log_every=10_000), 0)
    v_opt = gohome.mdp.initial_dist @ value_iteration(gohome.mdp).max(axis=1)
    assert m[-1]["natural_return"] >= v_opt - 0.1 * abs(v_opt)


def test_tabular_report_keys(gohome):
    net = Net(NetSpec((gohome.obs_dim, gohome.n_actions)), np.zeros(gohome.obs_dim * 4 + 4))
    rep = tabular_report(net, gohome)
    pol = DeterministicPolicy((0,) * gohome.mdp.n_states)
    assert rep["natural_return"] == pytest.approx(
        gohome.mdp.initial_dist @ state_values(policy_evaluation(gohome.mdp, pol), pol))
    assert rep["worst_eval_return"] <= rep["natural_return"] + 1e-12


def test_point_mass_wocar_ppo_beats_vanilla_under_pgd():
    env = make_env("point-mass")
    cfg = TrainConfig(total_steps=20_000, log_every=20_000, eps_target=0.1)
    wins = 0
    for seed in range(5):
        van = vanilla_ppo_train(env, cfg, seed)[0]
        woc = wocar_ppo_train(env, cfg, seed)[0]
        atk = AttackSpec("pgd", 0.1, 10)
        r_v = evaluate(van.policy.net, env, atk, 20, 100 + seed).mean
        r_w = evaluate(woc.policy.net, env, atk, 20, 100 + seed).mean
        wins += r_w > r_v
    assert wins >= 4
