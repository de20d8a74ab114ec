"""Vanilla DQN and WocaR-DQN on discrete-action environments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..approximator import value_and_grads
from ..losses import Batch, discrete_adv_mask, est_loss, normalize_weights, reg_inner_max, \
    reg_loss, state_importance
from .common import TrainConfig, Trainable, check_finite, net_spec, seed_streams, critic_tracking, tabular_adv_mask, tabular_reg_targets,\
    tabular_report
from .envs import TabularEnv
from .replay import ReplayBuffer


@dataclass
class DQNState:
    q_v: Trainable
    q_target: Trainable
    q_r: Trainable | None = None
    critic: Trainable | None = None
    step: int = 0

    @property
    def acting(self) -> Trainable:
        """The network whose greedy policy is deployed."""
        return self.q_r if self.q_r is not None else self.q_v


def vanilla_target(q_target_next, r, done, gamma) -> np.ndarray:
    return r + gamma * np.where(done, 0.0, q_target_next.max(axis=1))


def robust_target(q_target_next, q_worst_next, r, done, gamma, kappa) -> np.ndarray:
    """``r + gamma * max_a [kappa * Q_v'(s', a) + (1 - kappa) * Q_worst(s', a)]``."""
    mix = kappa * q_target_next + (1.0 - kappa) * q_worst_next
    return r + gamma * np.where(done, 0.0, mix.max(axis=1))


def _td_loss(net: Trainable, s, a, targets):
    """Mean squared TD error on the taken actions and its parameter gradient."""
    n = len(targets)
    rows = np.arange(n)

    def upstream(out):
        err = targets - out[rows, a]
        up = np.zeros_like(out)
        up[rows, a] = -2.0 * err / n
        return float(np.mean(err**2)), up

    val, grad, _ = value_and_grads(net.spec, net.params, s, upstream)
    return val, grad


def _soft_update(target: Trainable, source: Trainable, tau: float) -> None:
    target.params = tau * source.params + (1.0 - tau) * target.params


def _explore_rate(cfg: TrainConfig, t: int) -> float:
    f = min(t / max(cfg.explore_frac * cfg.total_steps, 1.0), 1.0)
    return cfg.explore_start + f * (cfg.explore_end - cfg.explore_start)


def _train(env, cfg: TrainConfig, seed: int, robust: bool, on_log: Callable | None):
    if not getattr(env, "discrete", False):
        raise ValueError("DQN needs a discrete-action environment")
    gamma = cfg.gamma if cfg.gamma is not None else getattr(getattr(env, "mdp", None), "gamma", 0.99)
    sched = cfg.schedules("dqn")
    tabular = isinstance(env, TabularEnv) and cfg.tabular_sets
    env_rng, act_rng, sample_rng, reg_rng, init_rng = seed_streams(seed, 5)
    init_seeds = init_rng.integers(0, 2**31, size=3)
    spec = net_spec(cfg, env.obs_dim, env.n_actions)
    q_v = Trainable.create(spec, int(init_seeds[0]))
    state = DQNState(q_v, q_v.copy())
    if robust:
        # the robust Q starts as a copy of the vanilla Q, so with kappa_wst = 1 and
        # kappa_reg = 0 the two stay equal and the run replays the baseline
        state.q_r = q_v.copy()
        state.critic = Trainable.create(spec, int(init_seeds[2]))
    buf = ReplayBuffer(cfg.buffer_size)
    acc: dict[str, list] = {}
    metrics = []

    def note(**kv):
        for k, v in kv.items():
            acc.setdefault(k, []).append(float(v))

    obs = env.reset(env_rng)
    ep_ret, ep_disc, episode_returns = 0.0, 1.0, []
    for t in range(1, cfg.total_steps + 1):
        acting = state.acting
        if act_rng.random() < _explore_rate(cfg, t):
            a = int(act_rng.integers(env.n_actions))
        else:
            a = int(np.argmax(acting(obs)))
        nxt, r, done, trunc = env.step(a, env_rng)
        buf.add(obs, a, r, nxt, done)
        ep_ret += ep_disc * r
        ep_disc *= gamma
        obs = nxt
        if done or trunc:
            episode_returns.append(ep_ret)
            ep_ret, ep_disc = 0.0, 1.0
            obs = env.reset(env_rng)

        if t >= cfg.learning_starts and t % cfg.train_every == 0:
            _update(state, buf.sample(cfg.batch_size, sample_rng), cfg, sched, t, gamma, env, tabular, reg_rng,
                    robust, note)
        state.step = t

        if t % cfg.log_every == 0 or t == cfg.total_steps:
            rec = {"step": t, "explore": _explore_rate(cfg, t), **sched.values(t)}
            rec.update({k: float(np.mean(v)) for k, v in sorted(acc.items())})
            acc.clear()
            if episode_returns:
                rec["train_return"] = float(np.mean(episode_returns))
                episode_returns = []
            if isinstance(env, TabularEnv):
                rec.update(tabular_report(state.acting.net, env))
                if robust:
                    rec.update(critic_tracking(state.q_r.net, state.critic.net, env, sched.eps_of(t) > 0))
            metrics.append(rec)
            if on_log is not None:
                on_log(rec, state)
    return state, metrics


def _update(state: DQNState, b: dict, cfg: TrainConfig, sched, t: int, gamma: float, env, tabular: bool,
            reg_rng, robust: bool, note) -> None:
    s, a, r, s2, done = b["s"], b["a"].astype(int), b["r"], b["s_next"], b["done"]
    q_next_target = state.q_target(s2)
    y_v = vanilla_target(q_next_target, r, done, gamma)
    loss_v, g_v = _td_loss(state.q_v, s, a, y_v)
    check_finite("vanilla TD loss", loss_v)
    state.q_v.update(g_v, cfg.lr, cfg.grad_clip)
    _soft_update(state.q_target, state.q_v, cfg.tau)
    note(loss_vanilla=loss_v)
    if not robust:
        return

    eps = sched.eps_of(t)
    kappa = sched.kappa_wst_of(t)
    q_r_net = state.q_r.net
    # admissible actions of the robust policy at the next states
    if tabular:
        adv = tabular_adv_mask(q_r_net, env, env.state_of(s2), eps > 0)
    else:
        adv = discrete_adv_mask(q_r_net, s2, eps)
    batch = Batch(s, a, r, s2, done)
    loss_c, g_c = est_loss(state.critic.net, batch, gamma=gamma, adv=adv)
    check_finite("worst-attack critic loss", loss_c)
    state.critic.update(g_c, cfg.lr, cfg.grad_clip)

    q_worst_next = state.critic(s2)
    y_r = robust_target(q_next_target, q_worst_next, r, done, gamma, kappa)
    loss_r, g_r = _td_loss(state.q_r, s, a, y_r)
    check_finite("robust TD loss", loss_r)
    loss_reg = 0.0
    if cfg.kappa_reg > 0 and eps > 0:
        w = normalize_weights(state_importance(state.q_v(s)))
        if tabular:
            s_adv = tabular_reg_targets(q_r_net, env, env.state_of(s))
        else:
            s_adv = reg_inner_max(q_r_net, s, eps, steps=cfg.reg_steps, rng=reg_rng)
        loss_reg, g_reg = reg_loss(q_r_net, s, eps, weights=w, s_adv=s_adv)
        check_finite("state regularizer", loss_reg)
        g_r = g_r + cfg.kappa_reg * g_reg
    state.q_r.update(g_r, cfg.lr, cfg.grad_clip)
    note(loss_critic=loss_c, loss_robust=loss_r, loss_reg=loss_reg,
         critic_mean=float(np.mean(q_worst_next[np.arange(len(a)), a])),
         target_gap_vs_vanilla=float(np.max(np.abs(y_r - y_v))))


def vanilla_dqn_train(env, config: TrainConfig, seed: int, on_log: Callable | None = None):
    """Double-network DQN; returns ``(DQNState, metrics)``."""
    return _train(env, config, seed, False, on_log)


def wocar_dqn_train(env, config: TrainConfig, seed: int, on_log: Callable | None = None):
    """WocaR-DQN: a vanilla Q, its target, a robust Q and a worst-attack critic.

    Acts greedily (with exploration) on the robust Q. Each minibatch takes a
    vanilla TD step, trains the critic toward the worst admissible next
    action, then regresses the robust Q onto a mixture of the vanilla target
    and the critic plus the weighted state regularizer.
    """
    return _train(env, config, seed, True, on_log)
