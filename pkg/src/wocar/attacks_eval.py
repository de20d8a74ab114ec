"""Observation attacks on trained victims and the episodic evaluator.

A victim is a :class:`~wocar.approximator.Net`: discrete victims (linear Q
heads or softmax logits) act greedily, gaussian-mean victims act with their
mean clipped to the action box. Attacks only change what the victim sees;
the environment always steps from its true state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .approximator import Net, value_and_grads
from .losses import log_softmax, policy_distance, reg_inner_max
from .mdp import DeterministicPolicy, TabularMDP, TabularPerturbation
from .worst_attack import AttackerMap, EnumerationCapError, brute_force_worst_value, optimal_attacker

ATTACK_KINDS = ("none", "random", "maxdiff", "minbest", "pgd", "tabular-bruteforce")
_BUDGET_SLACK = 1e-12


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    eps: float = 0.0
    steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; known: {', '.join(ATTACK_KINDS)}")
        if not self.eps >= 0:
            raise ValueError("eps must be non-negative")
        if self.kind in ("pgd", "maxdiff") and self.steps < 1:
            raise ValueError("steps must be >= 1")

    def as_dict(self) -> dict:
        return {"kind": self.kind, "eps": self.eps, "steps": self.steps, "seed": self.seed}


@dataclass(frozen=True)
class EvalReport:
    returns: tuple[float, ...]
    attack: AttackSpec = field(default_factory=AttackSpec)

    @classmethod
    def from_returns(cls, returns, attack: AttackSpec) -> "EvalReport":
        return cls(tuple(sorted(float(r) for r in returns)), attack)

    @property
    def episodes(self) -> int:
        return len(self.returns)

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))

    def as_dict(self) -> dict:
        return {"attack": self.attack.as_dict(), "episodes": self.episodes, "mean": self.mean, "std": self.std,
                "returns": list(self.returns)}


def _is_discrete(net: Net) -> bool:
    return net.spec.output_head != "gaussian-mean"


def victim_action(net: Net, obs, act_low=None, act_high=None):
    out = net(obs)
    if _is_discrete(net):
        return int(np.argmax(out))
    return out if act_low is None else np.clip(out, act_low, act_high)


def _project(x, s, eps):
    return np.clip(x, s - eps, s + eps)


# --------------------------------------------------------------------------
# attacks


def attack_random(s, eps: float, rng: np.random.Generator, candidates=None) -> np.ndarray:
    """Uniform draw from the l-inf ball, or a uniform member of ``candidates``."""
    s = np.asarray(s, dtype=float)
    if candidates is not None:
        cand = np.atleast_2d(candidates)
        return cand[rng.integers(len(cand))].copy()
    if eps == 0:
        return s.copy()
    return s + rng.uniform(-eps, eps, size=s.shape)


def pgd_objective(net: Net, s_clean, x) -> float:
    """Cross-entropy of the clean greedy action at ``x`` (discrete), or the
    squared distance of the mean action from the clean mean (continuous)."""
    z0, z = net(s_clean), net(x)
    if _is_discrete(net):
        return float(-log_softmax(z)[int(np.argmax(z0))])
    return float(np.sum((z - z0) ** 2))


def _pgd_grad(net: Net, s_clean, x):
    z0 = net(s_clean)
    if _is_discrete(net):
        a = int(np.argmax(z0))

        def up(z):
            lp = log_softmax(z)
            g = np.exp(lp)
            g[a] -= 1.0
            return -float(lp[a]), g
    else:
        def up(z):
            return float(np.sum((z - z0) ** 2)), 2.0 * (z - z0)

    val, _, gx = value_and_grads(net.spec, net.params, x, up, want_input=True)
    return val, gx


def attack_pgd(net: Net, s, eps: float, steps: int = 10, rng: np.random.Generator | None = None) -> np.ndarray:
    """Projected signed ascent on :func:`pgd_objective`, step ``2 eps / steps``.

    Discrete victims start at the clean observation. The continuous
    objective is flat there, so those start at a random point of the ball.
    The best iterate seen is returned; for discrete victims the objective
    therefore never falls below its clean value.
    """
    s = np.asarray(s, dtype=float)
    if eps == 0:
        return s.copy()
    step = 2.0 * eps / steps
    if _is_discrete(net):
        x = s.copy()
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        x = s + rng.uniform(-eps, eps, size=s.shape)
    best_x, best_val = x.copy(), pgd_objective(net, s, x)
    for _ in range(steps):
        _, g = _pgd_grad(net, s, x)
        x = _project(x + step * np.sign(g), s, eps)
        val = pgd_objective(net, s, x)
        if val > best_val:
            best_x, best_val = x.copy(), val
    return best_x


def attack_maxdiff(net: Net, s, eps: float, steps: int = 10, rng: np.random.Generator | None = None) -> np.ndarray:
    """Maximize the policy distance (KL, or squared L2 of means) from the clean output.

    The distance has zero gradient at the clean point, so the ascent starts
    from a random point of the ball; the best iterate is returned.
    """
    s = np.asarray(s, dtype=float)
    if eps == 0:
        return s.copy()
    rng = np.random.default_rng(0) if rng is None else rng
    return reg_inner_max(net, s, eps, steps=steps, step_size=2.0 * eps / steps, rng=rng)[0]


def attack_minbest(net: Net, s, eps: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """One signed-gradient step lowering the greedy action's probability.

    Linear Q heads use their induced softmax. Gaussian victims have no
    greedy probability gradient at the clean point, so the step instead
    ascends the squared mean shift from a random start.
    """
    s = np.asarray(s, dtype=float)
    if eps == 0:
        return s.copy()
    if _is_discrete(net):
        _, g = _pgd_grad(net, s, s)
        return _project(s + eps * np.sign(g), s, eps)
    rng = np.random.default_rng(0) if rng is None else rng
    x0 = s + rng.uniform(-eps, eps, size=s.shape)
    _, g = _pgd_grad(net, s, x0)
    return _project(x0 + eps * np.sign(g), s, eps)


def attack_tabular_bruteforce(mdp: TabularMDP, policy: DeterministicPolicy,
                              perturb: TabularPerturbation) -> AttackerMap:
    """The value-minimizing attacker map (enumeration, or attacker policy iteration when too large)."""
    try:
        return brute_force_worst_value(mdp, policy, perturb)[1]
    except EnumerationCapError:
        return optimal_attacker(mdp, policy, perturb)[1]


# --------------------------------------------------------------------------
# evaluation


def evaluate(agent: Net, env, attack: AttackSpec, episodes: int, seed: int, max_steps: int | None = None,
             gamma: float | None = None) -> EvalReport:
    """Run ``episodes`` episodes with every observation passed through the attack.

    Returns are discounted by the MDP's own ``gamma`` on tabular envs (so
    they estimate tabular values) and undiscounted otherwise. Each episode
    draws environment and attack randomness from its own stream split off
    ``seed``.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    tabular = hasattr(env, "mdp")
    if attack.kind == "tabular-bruteforce" and not tabular:
        raise ValueError("tabular-bruteforce needs a tabular environment")
    if not _is_discrete(agent) and getattr(env, "discrete", False):
        raise ValueError("gaussian victim on a discrete-action environment")
    if gamma is None:
        gamma = env.mdp.gamma if tabular else 1.0
    horizon = max_steps if max_steps is not None else env.max_steps
    act_low, act_high = getattr(env, "act_low", None), getattr(env, "act_high", None)

    attacker = None
    if attack.kind == "tabular-bruteforce":
        from .agents.common import extract_tabular_policy
        attacker = attack_tabular_bruteforce(env.mdp, extract_tabular_policy(agent, env.mdp), env.perturb)

    streams = np.random.SeedSequence([seed, attack.seed]).spawn(episodes)
    returns = []
    for ss in streams:
        env_rng, atk_rng = (np.random.default_rng(x) for x in ss.spawn(2))
        obs = env.reset(env_rng)
        total, disc = 0.0, 1.0
        for _ in range(horizon):
            seen = _perturb(agent, env, obs, attack, atk_rng, attacker)
            obs, r, done, _ = env.step(victim_action(agent, seen, act_low, act_high), env_rng)
            total += disc * r
            disc *= gamma
            if done:
                break
        returns.append(total)
    return EvalReport.from_returns(returns, attack)


def _perturb(agent, env, obs, attack: AttackSpec, rng, attacker):
    kind, eps = attack.kind, attack.eps
    if kind == "none" or (eps == 0 and kind != "tabular-bruteforce"):
        return obs
    if kind == "tabular-bruteforce":
        return env.encode(attacker[env.state])
    if kind == "random":
        cand = env.candidates(env.state) if hasattr(env, "candidates") else None
        return attack_random(obs, eps, rng, cand)
    if kind == "pgd":
        seen = attack_pgd(agent, obs, eps, attack.steps, rng)
    elif kind == "maxdiff":
        seen = attack_maxdiff(agent, obs, eps, attack.steps, rng)
    else:
        seen = attack_minbest(agent, obs, eps, rng)
    if np.max(np.abs(seen - obs)) > eps + _BUDGET_SLACK:
        raise ArithmeticError(f"{kind} attack left the eps-ball")
    return seen


def distance_objective(net: Net, s, x) -> float:
    """Policy distance used by MaxDiff, for a single observation pair."""
    return float(policy_distance(net, s, x)[0])
