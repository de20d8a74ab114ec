"""Configuration and helpers shared by the DQN and PPO loops."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from ..approximator import AdamState, Net, NetSpec, adam_step, clip_grad_norm, forward, init_params
from ..losses import log_softmax
from ..mdp import DeterministicPolicy, TabularMDP
from ..worst_attack import EnumerationCapError, brute_force_worst_value, natural_return, optimal_attacker, \
    policy_evaluation, state_values, worst_case_return
from .schedules import Schedules


# attacker enumeration size above which periodic reports switch to attacker
# policy iteration; both are exact, enumeration is just slow past this
REPORT_ENUM_CAP = 10_000


class TrainingAborted(RuntimeError):
    """A loss or statistic went non-finite, or PPO ratios diverged."""


@dataclass
class TrainConfig:
    total_steps: int = 20_000
    gamma: float | None = None  # None: the MDP's own discount (0.99 for continuous envs)
    lr: float = 1e-3
    hidden: tuple[int, ...] = (64,)
    activation: str = "relu"
    grad_clip: float = 10.0
    log_every: int = 1000

    # budget and loss weights
    eps_target: float = 0.1
    eps_start_frac: float = 0.1
    eps_end_frac: float = 0.6
    kappa_wst: float | None = None  # None: 0.5 for DQN, 0.8 for PPO
    kappa_shape: str | None = None  # None: the algorithm's own ramp
    kappa_reg: float = 0.1
    reg_steps: int = 10
    tabular_sets: bool = True  # enumerate B(s) instead of bounding one-hot balls
    box_steps: int = 20

    # dqn
    batch_size: int = 64
    buffer_size: int = 20_000
    learning_starts: int = 500
    train_every: int = 1
    tau: float = 0.005
    explore_start: float = 1.0
    explore_end: float = 0.05
    explore_frac: float = 0.3

    # ppo
    rollout_steps: int = 512
    epochs: int = 4
    minibatch: int = 64
    clip: float = 0.2
    gae_lambda: float = 0.95
    value_lr: float | None = None
    ent_coef: float = 0.0
    init_log_std: float = -0.5
    normalize_qworst: bool = True
    max_ratio: float = 1e3

    # periodic evaluation for continuous envs
    eval_episodes: int = 5
    eval_attack_steps: int = 10

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def replace(self, **kw) -> "TrainConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        unknown = set(kw) - set(vals)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        vals.update(kw)
        return TrainConfig(**vals)

    def schedules(self, algo: str) -> Schedules:
        kappa = self.kappa_wst if self.kappa_wst is not None else (0.5 if algo == "dqn" else 0.8)
        return Schedules(self.total_steps, self.eps_target, kappa, self.kappa_shape or algo,
                         self.eps_start_frac, self.eps_end_frac)


@dataclass
class Trainable:
    """A network with its optimizer state."""

    spec: NetSpec
    params: np.ndarray
    opt: AdamState
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, spec: NetSpec, seed: int, out_scale: float = 1.0) -> "Trainable":
        p = init_params(spec, seed=seed, out_scale=out_scale)
        return cls(spec, p, AdamState.zeros(spec.n_params))

    @property
    def net(self) -> Net:
        return Net(self.spec, self.params)

    def __call__(self, x):
        return forward(self.spec, self.params, x)

    def update(self, grad, lr: float, clip: float) -> None:
        check_finite("gradient", grad)
        self.params, self.opt = adam_step(self.params, clip_grad_norm(grad, clip), self.opt, lr)

    def copy(self) -> "Trainable":
        return Trainable(self.spec, self.params.copy(), self.opt.copy(), dict(self.extra))


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise TrainingAborted(f"non-finite {name}")


def net_spec(cfg: TrainConfig, n_in: int, n_out: int, head: str = "linear") -> NetSpec:
    return NetSpec((n_in, *cfg.hidden, n_out), cfg.activation, head)


def seed_streams(seed: int, n: int) -> list[np.random.Generator]:
    """Independent generators split deterministically from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def extract_tabular_policy(net: Net, mdp: TabularMDP) -> DeterministicPolicy:
    """Greedy action per state from one-hot inputs; ties go to the lowest index."""
    out = net(np.eye(mdp.n_states))
    return DeterministicPolicy(tuple(int(a) for a in out.argmax(axis=1)))


def tabular_report(net: Net, env) -> dict:
    pol = extract_tabular_policy(net, env.mdp)
    return {
        "natural_return": natural_return(env.mdp, pol),
        "worst_eval_return": worst_case_return(env.mdp, pol, env.perturb, cap=REPORT_ENUM_CAP),
    }


def tabular_state_values(net: Net, env, attacked: bool) -> np.ndarray:
    """Exact per-state value of the greedy policy, natural or under the worst attack on B(s)."""
    pol = extract_tabular_policy(net, env.mdp)
    if not attacked:
        return state_values(policy_evaluation(env.mdp, pol), pol)
    try:
        return brute_force_worst_value(env.mdp, pol, env.perturb, cap=REPORT_ENUM_CAP)[0]
    except EnumerationCapError:
        return optimal_attacker(env.mdp, pol, env.perturb)[0]


def critic_tracking(net: Net, critic: Net, env, active: bool) -> dict:
    """Critic's worst-case value estimates against the exact values, both
    taken at the budget in force (``active``: B(s), otherwise no attack).

    ``*_start`` entries weight by the initial distribution; ``*_mean``
    entries average over non-terminal states.
    """
    mask = tabular_adv_mask(net, env, np.arange(env.mdp.n_states), active)
    est = np.where(mask, critic(env.observations), np.inf).min(axis=1)
    true = tabular_state_values(net, env, active)
    live = ~env.mdp.terminal
    init = env.mdp.initial_dist
    return {
        "worst_critic_value": float(init @ est),
        "worst_critic_mean": float(est[live].mean()),
        "budget_value_start": float(init @ true),
        "budget_value_mean": float(true[live].mean()),
    }


def tabular_adv_mask(net: Net, env, states, active: bool) -> np.ndarray:
    """Actions the greedy policy of ``net`` can be misled into at each state.

    With ``active`` false only the clean greedy action is admissible.
    """
    states = np.asarray(states, dtype=int)
    greedy = net(env.observations).argmax(axis=1)
    onehot = np.eye(env.n_actions, dtype=bool)[greedy]
    if not active:
        return onehot[states]
    return (env.membership[states].astype(float) @ onehot) > 0


def tabular_reg_targets(net: Net, env, states) -> np.ndarray:
    """Encodings of the member of B(s) maximizing the policy distance from s."""
    states = np.asarray(states, dtype=int)
    z = net(env.observations)
    lp = log_softmax(z)
    # kl[s, t] = KL(pi(s) || pi(t))
    kl = (np.exp(lp) * lp).sum(axis=1)[:, None] - np.exp(lp) @ lp.T
    kl = np.where(env.membership, kl, -np.inf)
    return env.observations[kl[states].argmax(axis=1)]
