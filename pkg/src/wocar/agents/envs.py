"""Environment wrappers the training loops drive.

Tabular MDPs are exposed through one-hot observations; the continuous
point-mass task is a damped double integrator steered toward the origin.
"""

from __future__ import annotations

import numpy as np

from ..mdp import ContinuousEnvSpec, TabularMDP, TabularPerturbation, build_gohome, step


class TabularEnv:
    discrete = True

    def __init__(self, mdp: TabularMDP, perturb: TabularPerturbation, max_steps: int = 50, name: str = "tabular"):
        self.mdp = mdp
        self.perturb = perturb
        self.max_steps = int(max_steps)
        self.name = name
        self.observations = np.eye(mdp.n_states)
        # membership[s, t] is true iff t is in B(s)
        self.membership = np.zeros((mdp.n_states, mdp.n_states), dtype=bool)
        for s in range(mdp.n_states):
            self.membership[s, list(perturb[s])] = True
        self.state = None
        self._t = 0

    @property
    def obs_dim(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def encode(self, s: int) -> np.ndarray:
        return self.observations[s].copy()

    def state_of(self, obs) -> np.ndarray | int:
        """Inverse of :meth:`encode` (rows of a batch, or a single vector)."""
        obs = np.asarray(obs)
        return obs.argmax(axis=-1) if obs.ndim > 1 else int(obs.argmax())

    def candidates(self, s: int) -> np.ndarray:
        """Encodings of every member of B(s)."""
        return self.observations[list(self.perturb[s])]

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = int(rng.choice(self.mdp.n_states, p=self.mdp.initial_dist))
        self._t = 0
        return self.encode(self.state)

    def step(self, action: int, rng: np.random.Generator):
        """Returns ``(obs, reward, terminal, truncated)``."""
        self.state, r, done = step(self.mdp, self.state, int(action), rng)
        self._t += 1
        return self.encode(self.state), r, done, (not done and self._t >= self.max_steps)


class PointMassEnv:
    """Drive a unit mass to the origin under a bounded force.

    Observation ``(x, v)`` (for ``obs_dim`` = 2 per axis), action a force in
    ``[act_low, act_high]`` per axis. Reward is ``-(x^2 + 0.1 v^2 + 0.01 a^2)``
    summed over axes, so returns are always non-positive.
    """

    discrete = False
    dt = 0.1
    damping = 0.95

    def __init__(self, spec: ContinuousEnvSpec | None = None, gamma: float = 0.99, name: str = "point-mass"):
        spec = spec or ContinuousEnvSpec(2, 1, (-1.0,), (1.0,), "point-mass", 50, 0.1)
        if spec.dynamics != "point-mass":
            raise ValueError(f"unknown dynamics {spec.dynamics!r}")
        if spec.obs_dim != 2 * spec.act_dim:
            raise ValueError("point-mass needs obs_dim == 2 * act_dim")
        self.spec = spec
        self.gamma = gamma
        self.name = name
        self.act_low = np.asarray(spec.act_low, dtype=float)
        self.act_high = np.asarray(spec.act_high, dtype=float)
        self.max_steps = spec.horizon
        self.x = self.v = None
        self._t = 0

    @property
    def obs_dim(self) -> int:
        return self.spec.obs_dim

    @property
    def act_dim(self) -> int:
        return self.spec.act_dim

    def _obs(self):
        return np.concatenate([self.x, self.v])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.x = rng.uniform(-1.0, 1.0, self.act_dim)
        self.v = np.zeros(self.act_dim)
        self._t = 0
        return self._obs()

    def step(self, action, rng: np.random.Generator | None = None):
        a = np.clip(np.asarray(action, dtype=float).reshape(self.act_dim), self.act_low, self.act_high)
        r = -float(np.sum(self.x**2 + 0.1 * self.v**2 + 0.01 * a**2))
        self.v = self.damping * self.v + self.dt * a
        self.x = self.x + self.dt * self.v
        self._t += 1
        return self._obs(), r, False, self._t >= self.max_steps


# layout for the go-home experiments: the rocks leave some shortest routes
# running past the bomb, where a one-cell observation shift can push the
# agent onto it
GOHOME_LAYOUT = dict(width=5, height=5, home=(4, 0), bomb=(3, 2), rocks=((1, 1), (2, 1)), start=(0, 4))


def make_env(name: str, **kwargs):
    """Build a registered environment by name."""
    if name == "gohome":
        opts = dict(GOHOME_LAYOUT)
        max_steps = kwargs.pop("max_steps", 50)
        opts.update(kwargs)
        mdp, pert = build_gohome(**opts)
        return TabularEnv(mdp, pert, max_steps, name)
    if name == "gohome-open":
        max_steps = kwargs.pop("max_steps", 50)
        mdp, pert = build_gohome(**kwargs)
        return TabularEnv(mdp, pert, max_steps, name)
    if name == "point-mass":
        return PointMassEnv(**kwargs)
    raise KeyError(f"unknown environment {name!r}; known: {', '.join(ENV_NAMES)}")


ENV_NAMES = ("gohome", "gohome-open", "point-mass")
