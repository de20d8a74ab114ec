import numpy as np
import pytest

from conftest import fd_grad, random_net, rel_err
from wocar.approximator import Net, NetSpec, flatten, forward
from wocar.bound_prop import ContinuousAdvBox
from wocar.losses import (
    Batch,
    LossWeights,
    combined_policy_grad,
    combined_policy_loss,
    est_loss,
    est_targets,
    normalize_weights,
    policy_distance,
    reg_inner_enumerate,
    reg_inner_max,
    reg_loss,
    state_importance,
    state_importance_ppo,
    wst_policy_loss,
)


def discrete_batch(rng, n, ds, na, weighted=False):
    return Batch(rng.normal(size=(n, ds)), rng.integers(0, na, n), rng.normal(size=n),
                 rng.normal(size=(n, ds)), rng.random(n) < 0.3,
                 rng.uniform(0.1, 1, n) if weighted else None)


def with_params(net, p):
    return Net(net.spec, p)


def test_est_loss_hand_example():
    # linear critic Q(s, .) = s @ W.T; one transition
    w = np.array([[1.0, 0.0], [0.0, 2.0]])
    critic = Net(NetSpec((2, 2)), flatten([(w, np.zeros(2))]))
    b = Batch([[1.0, 1.0]], [0], [0.5], [[3.0, 1.0]], [False])
    # Q(s', .) = [3, 2]; admissible {0, 1} -> min 2; target 0.5 + 0.5 * 2 = 1.5; pred 1
    val, _ = est_loss(critic, b, gamma=0.5, adv=np.array([[True, True]]))
    assert val == pytest.approx(0.25)
    val, _ = est_loss(critic, b, gamma=0.5, adv=np.array([[True, False]]))
    assert val == pytest.approx((0.5 + 1.5 - 1) ** 2)
    b_done = Batch([[1.0, 1.0]], [0], [0.5], [[3.0, 1.0]], [True])
    assert est_loss(critic, b_done, gamma=0.5, adv=np.array([[True, True]]))[0] == pytest.approx(0.25)


def test_est_targets_reject_empty_mask(rng):
    critic = random_net(rng, (2, 3))
    b = discrete_batch(rng, 4, 2, 3)
    with pytest.raises(ValueError):
        est_targets(critic, b, 0.9, np.zeros((4, 3), dtype=bool))


@pytest.mark.parametrize("trial", range(25))
def test_est_loss_gradient_discrete(trial):
    rng = np.random.default_rng(trial)
    critic = random_net(rng, (3, 8, 4), "tanh")
    policy = random_net(rng, (3, 6, 4), "relu", "softmax-logits")
    b = discrete_batch(rng, 6, 3, 4, weighted=trial % 2 == 0)
    eps = 0.1
    # targets depend on the critic but are held fixed: freeze them for FD
    from wocar.losses import discrete_adv_mask
    adv = discrete_adv_mask(policy, b.s_next, eps)
    tgt = est_targets(critic, b, 0.9, adv)
    _, g = est_loss(critic, b, policy, eps, gamma=0.9)
    f = lambda p: est_loss(with_params(critic, p), b, targets=tgt)[0]
    assert rel_err(g, fd_grad(f, critic.params)) < 1e-4


@pytest.mark.parametrize("trial", range(10))
def test_est_loss_gradient_continuous(trial):
    rng = np.random.default_rng(trial)
    critic = random_net(rng, (3, 8, 1), "tanh")
    policy = random_net(rng, (2, 6, 1), "tanh", "gaussian-mean")
    n = 5
    b = Batch(rng.normal(size=(n, 2)), rng.normal(size=(n, 1)), rng.normal(size=n), rng.normal(size=(n, 2)),
              np.zeros(n, bool))
    _, g = est_loss(critic, b, policy, 0.1, mode="continuous", gamma=0.9)
    from wocar.bound_prop import adv_box_continuous
    box = adv_box_continuous(policy.spec, policy.params, b.s_next, 0.1)
    tgt = est_targets(critic, b, 0.9, box, mode="continuous")
    f = lambda p: est_loss(with_params(critic, p), b, mode="continuous", targets=tgt)[0]
    assert rel_err(g, fd_grad(f, critic.params)) < 1e-4


def test_est_loss_continuous_uses_box_min(rng):
    critic = random_net(rng, (2, 6, 1), "tanh")
    b = Batch([[0.3]], [[0.0]], [1.0], [[0.5]], [False])
    box = ContinuousAdvBox(np.array([[-0.2]]), np.array([[0.4]]))
    tgt = est_targets(critic, b, 0.5, box, mode="continuous")
    grid = np.column_stack([np.full(2001, 0.5), np.linspace(-0.2, 0.4, 2001)])
    assert tgt[0] == pytest.approx(1.0 + 0.5 * critic(grid).min(), abs=1e-4)


@pytest.mark.parametrize("trial", range(20))
def test_wst_policy_gradient_discrete(trial):
    rng = np.random.default_rng(trial)
    policy = random_net(rng, (3, 8, 4), "tanh", "softmax-logits")
    critic = random_net(rng, (3, 8, 4), "relu")
    b = discrete_batch(rng, 5, 3, 4)
    _, g = wst_policy_loss(policy, critic, b)
    f = lambda p: wst_policy_loss(with_params(policy, p), critic, b)[0]
    assert rel_err(g, fd_grad(f, policy.params)) < 1e-4


@pytest.mark.parametrize("trial", range(10))
def test_wst_policy_gradient_continuous(trial):
    rng = np.random.default_rng(trial)
    policy = random_net(rng, (3, 8, 2), "tanh", "gaussian-mean")
    critic = random_net(rng, (5, 8, 1), "tanh")
    b = Batch(rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), np.zeros(4), rng.normal(size=(4, 3)), np.zeros(4))
    _, g = wst_policy_loss(policy, critic, b)
    f = lambda p: wst_policy_loss(with_params(policy, p), critic, b)[0]
    assert rel_err(g, fd_grad(f, policy.params)) < 1e-4


def test_wst_policy_loss_value():
    # zero-logit policy: uniform over two actions, so the loss is -mean Q
    policy = Net(NetSpec((1, 2), "relu", "softmax-logits"), np.zeros(4))
    critic = Net(NetSpec((1, 2)), flatten([(np.zeros((2, 1)), np.array([1.0, 3.0]))]))
    b = Batch([[0.0]], [0], [0.0], [[0.0]], [False])
    assert wst_policy_loss(policy, critic, b)[0] == pytest.approx(-2.0)


def test_state_importance():
    assert state_importance([1.0, 4.0, 2.0]) == 3.0
    assert state_importance([2.0, 2.0]) == 0.0
    np.testing.assert_array_equal(state_importance([[1, 2], [5, 0]]), [1, 5])


def test_state_importance_ppo(rng):
    critic = Net(NetSpec((1, 3)), flatten([(np.zeros((3, 1)), np.array([1.0, -2.0, 0.5]))]))
    assert state_importance_ppo(1.0, critic, np.zeros(1)) == pytest.approx(3.0)
    assert state_importance_ppo(1.0, critic, np.zeros(1), np.array([True, False, True])) == pytest.approx(0.5)


def test_normalize_weights():
    np.testing.assert_allclose(normalize_weights([1, 2, 4]), [0.25, 0.5, 1])
    assert not normalize_weights(np.zeros(3)).any()


def test_inner_max_stays_in_ball(rng):
    policy = random_net(rng, (3, 8, 4), "tanh", "softmax-logits")
    s = rng.normal(size=(10, 3))
    x = reg_inner_max(policy, s, 0.2, rng=rng, noise=0.5)
    assert np.abs(x - s).max() <= 0.2 + 1e-12
    assert np.array_equal(reg_inner_max(policy, s, 0.0), s)


def test_inner_max_beats_random_start(rng):
    policy = random_net(rng, (3, 16, 4), "tanh", "softmax-logits", scale=3)
    s = rng.normal(size=(20, 3))
    x = reg_inner_max(policy, s, 0.3, steps=20, rng=np.random.default_rng(0))
    rand = s + np.random.default_rng(0).uniform(-0.3, 0.3, size=s.shape)
    assert np.all(policy_distance(policy, s, x) >= policy_distance(policy, s, rand) - 1e-12)


def test_inner_enumerate_is_exact(rng):
    policy = random_net(rng, (3, 8, 3), "relu", "softmax-logits")
    s = rng.normal(size=(2, 3))
    cands = [rng.normal(size=(5, 3)), rng.normal(size=(4, 3))]
    out = reg_inner_enumerate(policy, s, cands)
    for i in range(2):
        d = policy_distance(policy, np.repeat(s[i:i + 1], len(cands[i]), 0), cands[i])
        assert np.array_equal(out[i], cands[i][d.argmax()])


@pytest.mark.parametrize("head", ["softmax-logits", "linear", "gaussian-mean"])
@pytest.mark.parametrize("trial", range(10))
def test_reg_loss_gradient(head, trial):
    rng = np.random.default_rng(trial)
    policy = random_net(rng, (3, 8, 3), "tanh", head)
    s = rng.normal(size=(4, 3))
    s_adv = s + rng.uniform(-0.1, 0.1, size=s.shape)
    w = rng.uniform(0, 1, 4)
    _, g = reg_loss(policy, s, 0.1, weights=w, s_adv=s_adv)
    f = lambda p: reg_loss(with_params(policy, p), s, 0.1, weights=w, s_adv=s_adv)[0]
    assert rel_err(g, fd_grad(f, policy.params)) < 1e-4


def test_reg_loss_zero_at_eps_zero(rng):
    policy = random_net(rng, (3, 8, 3), "tanh", "softmax-logits")
    val, g = reg_loss(policy, rng.normal(size=(5, 3)), 0.0)
    assert val == pytest.approx(0.0, abs=1e-15)
    assert np.abs(g).max() < 1e-12


def test_reg_loss_constant_policy_is_zero():
    policy = Net(NetSpec((2, 3), "relu", "softmax-logits"),
                 flatten([(np.zeros((3, 2)), np.array([0.1, 0.5, -1.0]))]))
    assert reg_loss(policy, np.ones((3, 2)), 0.5)[0] == pytest.approx(0.0, abs=1e-15)


def test_combination():
    w = LossWeights(0.5, 2.0)
    assert combined_policy_loss(1.0, 2.0, 3.0, w) == pytest.approx(8.0)
    np.testing.assert_allclose(combined_policy_grad(np.ones(2), np.ones(2), np.ones(2), w), [3.5, 3.5])
    np.testing.assert_array_equal(combined_policy_grad(np.ones(2), np.full(2, 9.0), np.full(2, 9.0),
                                                       LossWeights()), np.ones(2))
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.0)


def test_batch_validation(rng):
    with pytest.raises(ValueError):
        Batch(np.zeros((3, 2)), np.zeros(3), np.zeros(2), np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        Batch(np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros(0))


def test_forward_shapes_for_policy_distance(rng):
    policy = random_net(rng, (2, 4, 2), "relu", "gaussian-mean")
    s = rng.normal(size=(3, 2))
    d = policy_distance(policy, s, s + 0.1)
    np.testing.assert_allclose(d, np.sum((forward(policy.spec, policy.params, s + 0.1) - policy(s)) ** 2, 1))
