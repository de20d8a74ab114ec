"""The three worst-case-aware loss terms and their composition.

Every loss returns ``(value, grad)`` where ``grad`` is the flat gradient with
respect to the parameters being trained. Critic targets are held fixed
(semi-gradient); frozen networks contribute no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approximator import Net, NetSpec, forward, value_and_grads
from .bound_prop import ContinuousAdvBox, adv_box_continuous, adv_mask_from_bounds, ibp_bounds, min_q_over_box


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.s = np.atleast_2d(np.asarray(self.s, dtype=float))
        self.s_next = np.atleast_2d(np.asarray(self.s_next, dtype=float))
        self.r = np.asarray(self.r, dtype=float).reshape(-1)
        self.done = np.asarray(self.done, dtype=bool).reshape(-1)
        self.a = np.asarray(self.a)
        n = len(self.r)
        if n == 0:
            raise ValueError("empty batch")
        if self.s.shape[0] != n or self.s_next.shape != self.s.shape or len(self.done) != n or len(self.a) != n:
            raise ValueError("inconsistent batch dimensions")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
            if len(self.weights) != n:
                raise ValueError("weights must have one entry per transition")

    def __len__(self) -> int:
        return len(self.r)


@dataclass(frozen=True)
class LossWeights:
    kappa_wst: float = 0.0
    kappa_reg: float = 0.0

    def __post_init__(self):
        for v in (self.kappa_wst, self.kappa_reg):
            if not np.isfinite(v) or v < 0:
                raise ValueError("loss weights must be finite and non-negative")


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    zs = z - z.max(axis=axis, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# worst-attack estimation loss


def discrete_adv_mask(policy: Net, s, eps) -> np.ndarray:
    """Batched IBP admissible-action mask for a discrete policy or Q network."""
    b = ibp_bounds(policy.spec, policy.params, np.atleast_2d(s), eps)
    return adv_mask_from_bounds(b.lower, b.upper)


def est_targets(critic: Net, batch: Batch, gamma: float, adv, mode: str = "discrete",
                box_steps: int = 50) -> np.ndarray:
    """Bootstrapped worst-case targets ``r + gamma * min_{adv(s')} Q(s', .)``."""
    if mode == "discrete":
        q_next = forward(critic.spec, critic.params, batch.s_next)
        adv = np.asarray(adv, dtype=bool)
        if adv.shape != q_next.shape or not adv.any(axis=1).all():
            raise ValueError("admissible mask must be non-empty per row and match the critic outputs")
        cont = np.where(adv, q_next, np.inf).min(axis=1)
    elif mode == "continuous":
        _, cont = min_q_over_box(critic.spec, critic.params, batch.s_next, adv, steps=box_steps)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return batch.r + gamma * np.where(batch.done, 0.0, cont)


def est_loss(critic: Net, batch: Batch, policy: Net | None = None, eps: float = 0.0,
             mode: str = "discrete", gamma: float = 0.99, adv=None, act_low=None, act_high=None,
             targets=None, box_steps: int = 50) -> tuple[float, np.ndarray]:
    """Mean squared error between the critic and its worst-case targets.

    ``adv`` overrides the admissible region of the next states: a boolean
    ``[N, actions]`` mask (discrete) or a batched :class:`ContinuousAdvBox`.
    Without it the region comes from IBP on ``policy`` at radius ``eps``.
    Optional per-item batch weights multiply the squared errors.
    """
    if targets is None:
        if adv is None:
            if policy is None:
                raise ValueError("need a policy or an explicit admissible region")
            if mode == "discrete":
                adv = discrete_adv_mask(policy, batch.s_next, eps)
            else:
                adv = adv_box_continuous(policy.spec, policy.params, batch.s_next, eps, act_low, act_high)
        targets = est_targets(critic, batch, gamma, adv, mode, box_steps)
    n = len(batch)
    w = np.ones(n) if batch.weights is None else batch.weights

    if mode == "discrete":
        x = batch.s
        idx = batch.a.astype(int)

        def upstream(out):
            pred = out[np.arange(n), idx]
            err = targets - pred
            up = np.zeros_like(out)
            up[np.arange(n), idx] = -2.0 * w * err / n
            return float(np.sum(w * err**2) / n), up
    else:
        x = np.concatenate([batch.s, np.atleast_2d(batch.a.astype(float)).reshape(n, -1)], axis=1)

        def upstream(out):
            err = targets - out[:, 0]
            up = (-2.0 * w * err / n)[:, None]
            return float(np.sum(w * err**2) / n), up

    val, grad, _ = value_and_grads(critic.spec, critic.params, x, upstream)
    return val, grad


# --------------------------------------------------------------------------
# worst-attack policy loss


def wst_policy_loss(policy: Net, critic: Net, batch: Batch) -> tuple[float, np.ndarray]:
    """``-mean_t sum_a pi(a|s_t) Q(s_t, a)`` for softmax policies, or
    ``-mean_t Q(s_t, mu(s_t))`` for gaussian-mean policies."""
    n = len(batch)
    if policy.spec.output_head == "softmax-logits":
        q = forward(critic.spec, critic.params, batch.s)
        if q.shape[1] != policy.spec.n_out:
            raise ValueError("critic and policy disagree on the number of actions")

        def upstream(z):
            p = softmax(z)
            val = -float(np.sum(p * q)) / n
            expq = np.sum(p * q, axis=1, keepdims=True)
            return val, -p * (q - expq) / n

        val, grad, _ = value_and_grads(policy.spec, policy.params, batch.s, upstream)
        return val, grad
    if policy.spec.output_head == "gaussian-mean":
        mu = forward(policy.spec, policy.params, batch.s)
        ds = batch.s.shape[1]
        if critic.spec.n_in != ds + mu.shape[1]:
            raise ValueError("critic must take concat(state, action)")
        x = np.concatenate([batch.s, mu], axis=1)
        qv, _, gx = value_and_grads(critic.spec, critic.params, x,
                                    lambda o: (o[:, 0].copy(), np.ones_like(o)), want_input=True)
        dq_da = gx[:, ds:]
        val = -float(qv.sum()) / n
        _, grad, _ = value_and_grads(policy.spec, policy.params, batch.s,
                                     lambda o: (0.0, -dq_da / n))
        return val, grad
    raise ValueError("worst-attack policy loss needs a softmax-logits or gaussian-mean policy")


# --------------------------------------------------------------------------
# state importance


def state_importance(q_natural_per_action) -> np.ndarray | float:
    """Spread between the best and worst natural action values (per row)."""
    q = np.asarray(q_natural_per_action, dtype=float)
    if q.shape[-1] < 1:
        raise ValueError("need at least one action value")
    out = q.max(axis=-1) - q.min(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def state_importance_ppo(v_s, critic: Net, s, adv_region=None, box_steps: int = 50):
    """``V(s) - min Q(s, a)`` over the action region.

    Discrete critics minimise over all actions, or the ``True`` entries of a
    boolean mask; continuous critics minimise over a :class:`ContinuousAdvBox`.
    """
    s2 = np.atleast_2d(s)
    if isinstance(adv_region, ContinuousAdvBox):
        _, qmin = min_q_over_box(critic.spec, critic.params, s2, adv_region, steps=box_steps)
    else:
        q = forward(critic.spec, critic.params, s2)
        mask = np.ones_like(q, dtype=bool) if adv_region is None else np.atleast_2d(adv_region)
        qmin = np.where(mask, q, np.inf).min(axis=1)
    out = np.asarray(v_s, dtype=float).reshape(-1) - qmin
    return float(out[0]) if np.ndim(s) == 1 else out


def normalize_weights(w) -> np.ndarray:
    """Divide by the batch maximum; an all-zero batch stays zero."""
    w = np.asarray(w, dtype=float)
    top = w.max() if w.size else 0.0
    return w / top if top > 0 else np.zeros_like(w)


# --------------------------------------------------------------------------
# state regularizer


def _dist_and_grads(head: str, z0, z1):
    """Per-row distance and its gradients w.r.t. both network outputs."""
    if head == "gaussian-mean":
        d = z1 - z0
        return np.sum(d * d, axis=1), -2 * d, 2 * d
    lp, lq = log_softmax(z0), log_softmax(z1)
    p, q = np.exp(lp), np.exp(lq)
    kl = np.sum(p * (lp - lq), axis=1)
    g0 = p * (lp - lq - kl[:, None])
    g1 = q - p
    return kl, g0, g1


def policy_distance(policy: Net, s, s_adv) -> np.ndarray:
    """KL for softmax/linear (Q-induced softmax) heads, squared L2 for means."""
    head = "gaussian-mean" if policy.spec.output_head == "gaussian-mean" else "kl"
    z0 = forward(policy.spec, policy.params, np.atleast_2d(s))
    z1 = forward(policy.spec, policy.params, np.atleast_2d(s_adv))
    return _dist_and_grads(head, z0, z1)[0]


def reg_inner_max(policy: Net, s, eps: float, steps: int = 10, step_size: float | None = None,
                  noise: float = 0.0, rng: np.random.Generator | None = None, init=None) -> np.ndarray:
    """Approximate ``argmax_{|s~ - s|_inf <= eps} Dist(pi(s), pi(s~))``.

    Projected signed-gradient ascent with step ``eps / 4`` and optional
    Gaussian noise on each step. The start is ``init`` when given (clipped
    into the ball) or a random point of the ball; the best iterate per row,
    start included, is returned.
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    if eps <= 0:
        return s.copy()
    rng = np.random.default_rng(0) if rng is None else rng
    step_size = eps / 4 if step_size is None else step_size
    head = "gaussian-mean" if policy.spec.output_head == "gaussian-mean" else "kl"
    z0 = forward(policy.spec, policy.params, s)
    if init is None:
        x = s + rng.uniform(-eps, eps, size=s.shape)
    else:
        x = np.clip(np.atleast_2d(init), s - eps, s + eps)

    def objective_and_grad(x):
        def up(z1):
            d, _, g1 = _dist_and_grads(head, z0, z1)
            return d, g1
        d, _, gx = value_and_grads(policy.spec, policy.params, x, up, want_input=True)
        return d, gx

    best_x = x.copy()
    best_d, g = objective_and_grad(x)
    for _ in range(steps):
        x = x + step_size * np.sign(g)
        if noise > 0:
            x = x + noise * step_size * rng.normal(size=x.shape)
        x = np.clip(x, s - eps, s + eps)
        d, g = objective_and_grad(x)
        better = d > best_d
        best_x[better] = x[better]
        best_d = np.where(better, d, best_d)
    return best_x


def reg_inner_enumerate(policy: Net, s, candidates) -> np.ndarray:
    """Exact inner maximum over an enumerated candidate set per row.

    ``candidates[i]`` is an array of admissible observations for row ``i``.
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    out = np.empty_like(s)
    for i, cand in enumerate(candidates):
        cand = np.atleast_2d(cand)
        d = policy_distance(policy, np.repeat(s[i:i + 1], len(cand), axis=0), cand)
        out[i] = cand[int(d.argmax())]
    return out


def reg_loss(policy: Net, s, eps: float, weights=None, inner_steps: int = 10, s_adv=None,
             noise: float = 0.0, rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    """``mean_t w_t * max_{s~ in B(s_t)} Dist(pi(s_t), pi(s~))``.

    ``s_adv`` supplies precomputed maximisers (e.g. from
    :func:`reg_inner_enumerate`); otherwise :func:`reg_inner_max` runs. The
    gradient treats ``s_adv`` as a constant and flows through both branches.
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    n = s.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if len(w) != n:
        raise ValueError("weights must have one entry per state")
    if s_adv is None:
        s_adv = reg_inner_max(policy, s, eps, steps=inner_steps, noise=noise, rng=rng)
    s_adv = np.atleast_2d(s_adv)
    head = "gaussian-mean" if policy.spec.output_head == "gaussian-mean" else "kl"
    spec, params = policy.spec, policy.params
    z0 = forward(spec, params, s)
    z1 = forward(spec, params, s_adv)
    d, g0, g1 = _dist_and_grads(head, z0, z1)
    val = float(np.sum(w * d) / n)
    scale = (w / n)[:, None]
    _, grad0, _ = value_and_grads(spec, params, s, lambda o: (0.0, scale * g0))
    _, grad1, _ = value_and_grads(spec, params, s_adv, lambda o: (0.0, scale * g1))
    return val, grad0 + grad1


# --------------------------------------------------------------------------
# composition


def combined_policy_loss(l_rl: float, l_wst: float, l_reg: float, weights: LossWeights) -> float:
    return l_rl + weights.kappa_wst * l_wst + weights.kappa_reg * l_reg


def combined_policy_grad(g_rl, g_wst, g_reg, weights: LossWeights) -> np.ndarray:
    return np.asarray(g_rl) + weights.kappa_wst * np.asarray(g_wst) + weights.kappa_reg * np.asarray(g_reg)


def critic_loss(critic: Net, batch: Batch, **kwargs) -> tuple[float, np.ndarray]:
    """The critic objective is the estimation loss alone."""
    return est_loss(critic, batch, **kwargs)
