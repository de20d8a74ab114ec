"""Vanilla PPO-Clip and WocaR-PPO for discrete (softmax) and continuous (gaussian) policies."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..approximator import AdamState, NetSpec, adam_step, clip_grad_norm, value_and_grads
from ..bound_prop import adv_box_continuous, min_q_over_box
from ..losses import Batch, discrete_adv_mask, est_loss, log_softmax, normalize_weights, reg_inner_max, reg_loss
from .common import TrainConfig, critic_tracking, TrainingAborted, Trainable, check_finite, net_spec, seed_streams, \
    tabular_adv_mask, tabular_reg_targets, tabular_report
from .envs import TabularEnv


@dataclass
class PPOState:
    policy: Trainable
    value: Trainable
    critic: Trainable | None = None
    log_std: np.ndarray | None = None
    log_std_opt: AdamState | None = None
    clip: float = 0.2
    step: int = 0

    @property
    def discrete(self) -> bool:
        return self.policy.spec.output_head == "softmax-logits"


def _sample_action(state: PPOState, obs, rng):
    z = state.policy(obs)
    if state.discrete:
        lp = log_softmax(z)
        a = int(rng.choice(len(z), p=np.exp(lp)))
        return a, float(lp[a])
    std = np.exp(state.log_std)
    a = z + std * rng.normal(size=z.shape)
    return a, float(_gauss_logp(a[None], z[None], state.log_std)[0])


def _gauss_logp(a, mu, log_std):
    return np.sum(-0.5 * ((a - mu) / np.exp(log_std)) ** 2 - log_std - 0.5 * math.log(2 * math.pi), axis=1)


def _rollout(env, state: PPOState, n: int, gamma: float, env_rng, act_rng, carry):
    obs = carry["obs"]
    cols = {k: [] for k in ("s", "a", "r", "s_next", "done", "trunc", "logp")}
    for _ in range(n):
        a, lp = _sample_action(state, obs, act_rng)
        nxt, r, done, trunc = env.step(a, env_rng)
        for k, v in zip(cols, (obs, a, r, nxt, done, trunc, lp)):
            cols[k].append(v)
        carry["ret"] += carry["disc"] * r
        carry["disc"] *= gamma
        obs = nxt
        if done or trunc:
            carry["episodes"].append(carry["ret"])
            carry["ret"], carry["disc"] = 0.0, 1.0
            obs = env.reset(env_rng)
    carry["obs"] = obs
    out = {k: np.asarray(v) for k, v in cols.items()}
    out["s"] = out["s"].astype(float)
    out["s_next"] = out["s_next"].astype(float)
    return out


def _gae(ro, state: PPOState, gamma: float, lam: float):
    v = state.value(ro["s"])[:, 0]
    v_next = np.where(ro["done"], 0.0, state.value(ro["s_next"])[:, 0])
    delta = ro["r"] + gamma * v_next - v
    adv = np.zeros_like(delta)
    running = 0.0
    for t in range(len(delta) - 1, -1, -1):
        # episode boundaries cut the recursion
        if ro["done"][t] or ro["trunc"][t]:
            running = 0.0
        running = delta[t] + gamma * lam * running
        adv[t] = running
    return adv, adv + v


def _policy_grad(state: PPOState, s, a, logp_old, adv, clip, ent_coef):
    """Clipped surrogate loss, its gradients, and ratio statistics."""
    n = len(adv)
    z_out = {}

    def upstream(z):
        if state.discrete:
            lp_all = log_softmax(z)
            lp = lp_all[np.arange(n), a]
        else:
            lp = _gauss_logp(a, z, state.log_std)
        ratio = np.exp(lp - logp_old)
        surr1 = ratio * adv
        surr2 = np.clip(ratio, 1 - clip, 1 + clip) * adv
        # the unclipped branch carries gradient wherever it is the minimum
        active = surr1 <= surr2
        val = -float(np.mean(np.minimum(surr1, surr2)))
        dlp = np.where(active, -adv * ratio / n, 0.0)
        if state.discrete:
            p = np.exp(lp_all)
            onehot = np.zeros_like(z)
            onehot[np.arange(n), a] = 1.0
            up = dlp[:, None] * (onehot - p)
            if ent_coef:
                ent = -np.sum(p * lp_all, axis=1)
                val -= ent_coef * float(np.mean(ent))
                # d(-ent)/dz = p * (log p + ent)
                up += ent_coef * p * (lp_all + ent[:, None]) / n
        else:
            var = np.exp(2 * state.log_std)
            up = dlp[:, None] * (a - z) / var
            z_out["dlog_std"] = np.sum(dlp[:, None] * ((a - z) ** 2 / var - 1.0), axis=0)
        z_out["ratio"] = ratio
        z_out["clipped"] = ~active
        return val, up

    val, grad, _ = value_and_grads(state.policy.spec, state.policy.params, s, upstream)
    return val, grad, z_out


def _value_grad(state: PPOState, s, returns):
    n = len(returns)

    def upstream(out):
        err = out[:, 0] - returns
        return float(np.mean(err**2)), (2.0 * err / n)[:, None]

    val, grad, _ = value_and_grads(state.value.spec, state.value.params, s, upstream)
    return val, grad


def _critic_region(state: PPOState, env, s, eps, tabular, cfg):
    """Admissible region of the current policy at states ``s``."""
    if state.discrete:
        if tabular:
            return tabular_adv_mask(state.policy.net, env, env.state_of(s), eps > 0)
        return discrete_adv_mask(state.policy.net, s, eps)
    return adv_box_continuous(state.policy.spec, state.policy.params, s, eps, env.act_low, env.act_high)


def _critic_inputs(state: PPOState, s, a):
    if state.discrete:
        return s
    return np.concatenate([s, np.asarray(a, dtype=float).reshape(len(s), -1)], axis=1)


def _critic_sa(state: PPOState, s, a):
    q = state.critic(_critic_inputs(state, s, a))
    return q[np.arange(len(s)), a] if state.discrete else q[:, 0]


def _critic_min(state: PPOState, s, region, box_steps):
    if state.discrete:
        return np.where(region, state.critic(s), np.inf).min(axis=1)
    return min_q_over_box(state.critic.spec, state.critic.params, s, region, steps=box_steps)[1]


def _train(env, cfg: TrainConfig, seed: int, robust: bool, on_log: Callable | None):
    gamma = cfg.gamma if cfg.gamma is not None else getattr(getattr(env, "mdp", None), "gamma", 0.99)
    sched = cfg.schedules("ppo")
    tabular = isinstance(env, TabularEnv) and cfg.tabular_sets
    env_rng, act_rng, shuffle_rng, critic_rng, reg_rng, init_rng = seed_streams(seed, 6)
    init_seeds = init_rng.integers(0, 2**31, size=3)
    if env.discrete:
        pspec = net_spec(cfg, env.obs_dim, env.n_actions, "softmax-logits")
        cspec = net_spec(cfg, env.obs_dim, env.n_actions)
    else:
        pspec = net_spec(cfg, env.obs_dim, env.act_dim, "gaussian-mean")
        cspec = net_spec(cfg, env.obs_dim + env.act_dim, 1)
    state = PPOState(Trainable.create(pspec, int(init_seeds[0]), out_scale=0.01),
                     Trainable.create(NetSpec((env.obs_dim, *cfg.hidden, 1), cfg.activation), int(init_seeds[1])),
                     clip=cfg.clip)
    if not env.discrete:
        state.log_std = np.full(env.act_dim, cfg.init_log_std)
        state.log_std_opt = AdamState.zeros(env.act_dim)
    if robust:
        state.critic = Trainable.create(cspec, int(init_seeds[2]))
    value_lr = cfg.value_lr if cfg.value_lr is not None else cfg.lr

    carry = {"obs": env.reset(env_rng), "ret": 0.0, "disc": 1.0, "episodes": []}
    metrics, acc = [], {}
    next_log = cfg.log_every

    def note(**kv):
        for k, v in kv.items():
            acc.setdefault(k, []).append(float(v))

    t = 0
    while t < cfg.total_steps:
        n = min(cfg.rollout_steps, cfg.total_steps - t)
        ro = _rollout(env, state, n, gamma, env_rng, act_rng, carry)
        t += n
        eps, kappa = sched.eps_of(t), sched.kappa_wst_of(t)
        adv, returns = _gae(ro, state, gamma, cfg.gae_lambda)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        check_finite("advantages", adv)

        bonus = np.zeros(n)
        weights = None
        if robust:
            _train_critic(state, env, ro, cfg, eps, gamma, tabular, critic_rng, note)
            q_sa = _critic_sa(state, ro["s"], ro["a"])
            note(critic_mean=float(np.mean(q_sa)))
            if cfg.normalize_qworst:
                q_sa = (q_sa - q_sa.mean()) / (q_sa.std() + 1e-8)
            bonus = kappa * q_sa
            if cfg.kappa_reg > 0:
                region = _critic_region(state, env, ro["s"], eps, tabular, cfg)
                imp = state.value(ro["s"])[:, 0] - _critic_min(state, ro["s"], region, cfg.box_steps)
                weights = normalize_weights(np.maximum(imp, 0.0))
        adv_total = adv + bonus

        for _ in range(cfg.epochs):
            perm = shuffle_rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                idx = perm[start:start + cfg.minibatch]
                s, a = ro["s"][idx], ro["a"][idx]
                loss_pi, g_pi, info = _policy_grad(state, s, a, ro["logp"][idx], adv_total[idx], state.clip,
                                                   cfg.ent_coef)
                ratio = info["ratio"]
                if not np.all(np.isfinite(ratio)) or ratio.max() > cfg.max_ratio:
                    raise TrainingAborted(f"policy ratio diverged (max {ratio.max():.3g})")
                check_finite("policy loss", loss_pi)
                if robust and cfg.kappa_reg > 0 and eps > 0:
                    if tabular:
                        s_adv = tabular_reg_targets(state.policy.net, env, env.state_of(s))
                    else:
                        s_adv = reg_inner_max(state.policy.net, s, eps, steps=cfg.reg_steps, rng=reg_rng)
                    loss_reg, g_reg = reg_loss(state.policy.net, s, eps, weights=weights[idx], s_adv=s_adv)
                    check_finite("state regularizer", loss_reg)
                    g_pi = g_pi + cfg.kappa_reg * g_reg
                    note(loss_reg=loss_reg)
                state.policy.update(g_pi, cfg.lr, cfg.grad_clip)
                if state.log_std is not None:
                    g_ls = clip_grad_norm(info["dlog_std"], cfg.grad_clip)
                    state.log_std, state.log_std_opt = adam_step(state.log_std, g_ls, state.log_std_opt, cfg.lr)
                loss_v, g_v = _value_grad(state, s, returns[idx])
                check_finite("value loss", loss_v)
                state.value.update(g_v, value_lr, cfg.grad_clip)
                note(loss_policy=loss_pi, loss_value=loss_v, clip_frac=float(np.mean(info["clipped"])),
                     ratio_mean=float(np.mean(ratio)))
        state.step = t

        # logs land on rollout boundaries, so a record may cover more than log_every steps
        if t >= next_log or t == cfg.total_steps:
            rec = {"step": t, **sched.values(t)}
            rec.update({k: float(np.mean(v)) for k, v in sorted(acc.items())})
            acc.clear()
            if carry["episodes"]:
                rec["train_return"] = float(np.mean(carry["episodes"]))
                carry["episodes"] = []
            rec.update(_report(state, env, cfg, eps, tabular, seed))
            metrics.append(rec)
            if on_log is not None:
                on_log(rec, state)
            next_log = (t // cfg.log_every + 1) * cfg.log_every
    return state, metrics


def _train_critic(state: PPOState, env, ro, cfg: TrainConfig, eps, gamma, tabular, rng, note):
    n = len(ro["r"])
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = perm[start:start + cfg.minibatch]
            a = ro["a"][idx]
            batch = Batch(ro["s"][idx], a, ro["r"][idx], ro["s_next"][idx], ro["done"][idx])
            region = _critic_region(state, env, batch.s_next, eps, tabular, cfg)
            mode = "discrete" if state.discrete else "continuous"
            loss_c, g_c = est_loss(state.critic.net, batch, gamma=gamma, adv=region, mode=mode,
                                   box_steps=cfg.box_steps)
            check_finite("worst-attack critic loss", loss_c)
            state.critic.update(g_c, cfg.lr, cfg.grad_clip)
            note(loss_critic=loss_c)


def _report(state: PPOState, env, cfg: TrainConfig, eps, tabular, seed) -> dict:
    if isinstance(env, TabularEnv):
        out = tabular_report(state.policy.net, env)
        if state.critic is not None:
            out.update(critic_tracking(state.policy.net, state.critic.net, env, eps > 0))
        return out
    from ..attacks_eval import AttackSpec, evaluate
    nat = evaluate(state.policy.net, env, AttackSpec("none"), cfg.eval_episodes, seed)
    att = evaluate(state.policy.net, env, AttackSpec("pgd", cfg.eps_target, cfg.eval_attack_steps, seed),
                   cfg.eval_episodes, seed)
    return {"natural_return": nat.mean, "worst_eval_return": att.mean}


def vanilla_ppo_train(env, config: TrainConfig, seed: int, on_log: Callable | None = None):
    """PPO-Clip with GAE; returns ``(PPOState, metrics)``."""
    return _train(env, config, seed, False, on_log)


def wocar_ppo_train(env, config: TrainConfig, seed: int, on_log: Callable | None = None):
    """WocaR-PPO: PPO-Clip whose advantage gains ``kappa_wst * Q_worst(s, a)``.

    A worst-attack critic is fitted on every rollout before the policy
    epochs; the policy also pays ``kappa_reg`` times the importance-weighted
    state regularizer. Critic updates draw from their own random stream, so
    zero weights reproduce :func:`vanilla_ppo_train` exactly.
    """
    return _train(env, config, seed, True, on_log)
