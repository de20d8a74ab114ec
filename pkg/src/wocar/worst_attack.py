"""Exact worst-attack values on tabular MDPs.

The worst-attack Bellman backup bootstraps through the cheapest action the
attacker can force at the next state; iterating it from zero converges to the
worst-attack action value. Two independent cross-checks live here as well:
exhaustive enumeration of deterministic attacker maps, and policy iteration
on the attacker's own (minimising) MDP for instances too large to enumerate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .mdp import DeterministicPolicy, TabularMDP, TabularPerturbation

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000
ENUM_CAP = 10**6


class NonConvergenceError(RuntimeError):
    pass


class EnumerationCapError(ValueError):
    pass


@dataclass(frozen=True)
class AttackerMap:
    perturb_to: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "perturb_to", tuple(int(x) for x in self.perturb_to))

    def __getitem__(self, s: int) -> int:
        return self.perturb_to[s]

    def check(self, perturb: TabularPerturbation) -> None:
        for s, t in enumerate(self.perturb_to):
            if t not in perturb[s]:
                raise ValueError(f"attacker maps {s} -> {t}, outside B({s})")

    @classmethod
    def identity(cls, n_states: int) -> "AttackerMap":
        return cls(tuple(range(n_states)))


def adv_action_set(policy: DeterministicPolicy, perturb: TabularPerturbation, s: int) -> tuple[int, ...]:
    """Actions the policy can be misled into at ``s``, sorted ascending."""
    return tuple(sorted({policy[t] for t in perturb[s]}))


def adv_mask(policy: DeterministicPolicy, perturb: TabularPerturbation, n_actions: int) -> np.ndarray:
    mask = np.zeros((len(perturb), n_actions), dtype=bool)
    for s in range(len(perturb)):
        mask[s, list(adv_action_set(policy, perturb, s))] = True
    return mask


def _check(q, mdp, policy, perturb):
    policy.check(mdp)
    if len(perturb) != mdp.n_states:
        raise ValueError("perturbation does not match the MDP")
    if q is not None and np.shape(q) != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"Q table must be {(mdp.n_states, mdp.n_actions)}, got {np.shape(q)}")


def _min_over_mask(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, q, np.inf).min(axis=1)


def worst_attack_backup(q, mdp: TabularMDP, policy: DeterministicPolicy, perturb: TabularPerturbation,
                        mask: np.ndarray | None = None) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    _check(q, mdp, policy, perturb)
    if mask is None:
        mask = adv_mask(policy, perturb, mdp.n_actions)
    cont = np.where(mdp.terminal, 0.0, _min_over_mask(q, mask))
    return mdp.reward + mdp.gamma * mdp.transition @ cont


def iteration_bound(mdp: TabularMDP, tol: float) -> int:
    """Upper bound on sweeps from the zero table to a sup-norm step of ``tol``."""
    rmax = float(np.abs(mdp.reward).max())
    if mdp.gamma == 0.0 or rmax == 0.0:
        return 1
    if tol * (1 - mdp.gamma) >= rmax:
        return 1
    return math.ceil(math.log(tol * (1 - mdp.gamma) / rmax) / math.log(mdp.gamma)) + 1


def worst_attack_fixed_point(mdp: TabularMDP, policy: DeterministicPolicy, perturb: TabularPerturbation,
                             tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                             return_iters: bool = False):
    """Jacobi iteration of the worst-attack backup from the zero table."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check(None, mdp, policy, perturb)
    mask = adv_mask(policy, perturb, mdp.n_actions)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for it in range(1, max_iter + 1):
        nxt = worst_attack_backup(q, mdp, policy, perturb, mask)
        diff = np.abs(nxt - q).max()
        q = nxt
        if diff <= tol:
            return (q, it) if return_iters else q
    raise NonConvergenceError(f"no convergence to tol={tol} within {max_iter} sweeps (last step {diff:.3e})")


def worst_attack_state_value(q_worst, policy: DeterministicPolicy, perturb: TabularPerturbation) -> np.ndarray:
    q_worst = np.asarray(q_worst, dtype=float)
    return _min_over_mask(q_worst, adv_mask(policy, perturb, q_worst.shape[1]))


def worst_attack_argmin(q_worst, policy, perturb) -> tuple[int, ...]:
    """Worst forced action per state; ties go to the lowest action index."""
    q_worst = np.asarray(q_worst, dtype=float)
    masked = np.where(adv_mask(policy, perturb, q_worst.shape[1]), q_worst, np.inf)
    return tuple(int(a) for a in masked.argmin(axis=1))


# --------------------------------------------------------------------------
# natural evaluation


def _evaluate_actions(mdp: TabularMDP, actions) -> np.ndarray:
    """Exact V of the deterministic state->action map by a linear solve."""
    idx = np.arange(mdp.n_states)
    p = mdp.transition[idx, actions]
    r = mdp.reward[idx, actions]
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p, r)


def policy_evaluation(mdp: TabularMDP, policy: DeterministicPolicy) -> np.ndarray:
    policy.check(mdp)
    v = _evaluate_actions(mdp, np.asarray(policy.action_of))
    return mdp.reward + mdp.gamma * mdp.transition @ v


def state_values(q, policy: DeterministicPolicy) -> np.ndarray:
    q = np.asarray(q)
    return q[np.arange(q.shape[0]), np.asarray(policy.action_of)]


def value_iteration(mdp: TabularMDP, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Optimal natural action values."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        nxt = mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1)
        if np.abs(nxt - q).max() <= tol:
            return nxt
        q = nxt
    raise NonConvergenceError("value iteration did not converge")


def greedy_policy(q) -> DeterministicPolicy:
    return DeterministicPolicy(tuple(int(a) for a in np.asarray(q).argmax(axis=1)))


# --------------------------------------------------------------------------
# attacker-side oracles


def _composite(policy, h):
    return np.array([policy[t] for t in h])


def brute_force_worst_value(mdp: TabularMDP, policy: DeterministicPolicy, perturb: TabularPerturbation,
                            cap: int = ENUM_CAP) -> tuple[np.ndarray, AttackerMap]:
    """Enumerate deterministic attacker maps and evaluate each exactly.

    Maps that induce the same composite policy have identical values, so the
    search runs over one representative observation per distinct forced action
    (the lowest-indexed one). Terminal states are absorbing with zero reward,
    so the attacker's choice there is irrelevant and fixed to the identity.
    """
    _check(None, mdp, policy, perturb)
    choices = []
    for s in range(mdp.n_states):
        if mdp.terminal[s]:
            choices.append((s,))
            continue
        rep = {}
        for t in perturb[s]:
            rep.setdefault(policy[t], t)
        choices.append(tuple(rep[a] for a in sorted(rep)))
    size = math.prod(len(c) for c in choices)
    if size > cap:
        raise EnumerationCapError(f"attacker enumeration needs {size} maps, cap is {cap}")

    n = mdp.n_states
    idx = np.arange(n)
    eye = np.eye(n)
    best_v = np.full(n, np.inf)
    best_h, best_sum = None, np.inf
    # evaluate in chunks of stacked linear systems
    it = itertools.product(*choices)
    while True:
        chunk = list(itertools.islice(it, 4096))
        if not chunk:
            break
        acts = np.array([[policy[t] for t in h] for h in chunk])
        p = mdp.transition[idx, acts]  # [k, n, n]
        r = mdp.reward[idx, acts]  # [k, n]
        v = np.linalg.solve(eye - mdp.gamma * p, r[..., None])[..., 0]
        best_v = np.minimum(best_v, v.min(axis=0))
        sums = v.sum(axis=1)
        k = int(sums.argmin())
        if sums[k] < best_sum:
            best_sum, best_h = sums[k], chunk[k]
    return best_v, AttackerMap(best_h)


def optimal_attacker(mdp: TabularMDP, policy: DeterministicPolicy, perturb: TabularPerturbation,
                     max_iter: int = 10_000) -> tuple[np.ndarray, AttackerMap]:
    """Howard policy iteration on the attacker's minimising MDP.

    Every iterate is a concrete attacker map evaluated by an exact linear
    solve, so the result does not depend on the value-iteration path. Used
    where the enumeration in :func:`brute_force_worst_value` is too large.
    """
    _check(None, mdp, policy, perturb)
    n = mdp.n_states
    h = list(range(n))
    for _ in range(max_iter):
        v = _evaluate_actions(mdp, _composite(policy, h))
        q = mdp.reward + mdp.gamma * mdp.transition @ v
        changed = False
        for s in range(n):
            if mdp.terminal[s]:
                continue
            cur = q[s, policy[h[s]]]
            for t in perturb[s]:
                if q[s, policy[t]] < cur - 1e-12 * max(1.0, abs(cur)):
                    h[s], cur, changed = t, q[s, policy[t]], True
        if not changed:
            return v, AttackerMap(h)
    raise NonConvergenceError("attacker policy iteration did not terminate")


def attacked_value(mdp: TabularMDP, policy: DeterministicPolicy, attacker: AttackerMap) -> np.ndarray:
    """Exact value of the policy when observations pass through ``attacker``."""
    return _evaluate_actions(mdp, _composite(policy, attacker.perturb_to))


def worst_case_return(mdp: TabularMDP, policy: DeterministicPolicy, perturb: TabularPerturbation,
                      cap: int = ENUM_CAP) -> float:
    """Initial-distribution-weighted worst-attack value.

    Uses attacker enumeration when it fits under ``cap`` and attacker policy
    iteration otherwise; both are exact.
    """
    try:
        v, _ = brute_force_worst_value(mdp, policy, perturb, cap=cap)
    except EnumerationCapError:
        v, _ = optimal_attacker(mdp, policy, perturb)
    return float(mdp.initial_dist @ v)


def natural_return(mdp: TabularMDP, policy: DeterministicPolicy) -> float:
    return float(mdp.initial_dist @ _evaluate_actions(mdp, np.asarray(policy.action_of)))
