"""Finite MDPs, built-in environments and the tabular perturbation model."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ROW_TOL = 1e-9

# grid actions: up, right, down, left as (dx, dy)
MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))
ACTION_NAMES = ("up", "right", "down", "left")


class MDPFormatError(ValueError):
    """Raised when an MDP file or tensor violates the format/invariants."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class TabularMDP:
    transition: np.ndarray  # [s, a, s']
    reward: np.ndarray  # [s, a]
    gamma: float
    initial_dist: np.ndarray
    terminal: np.ndarray
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        term = np.asarray(self.terminal, dtype=bool)
        init = np.asarray(self.initial_dist, dtype=float)
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise MDPFormatError(f"transition must be [S, A, S], got {t.shape}")
        n, m = t.shape[:2]
        if n < 1 or m < 1:
            raise MDPFormatError("need at least one state and one action")
        if r.shape != (n, m):
            raise MDPFormatError(f"reward must be {(n, m)}, got {r.shape}")
        if term.shape != (n,) or init.shape != (n,):
            raise MDPFormatError("terminal / initial_dist must have length n_states")
        if not 0.0 <= self.gamma < 1.0:
            raise MDPFormatError(f"gamma must lie in [0, 1), got {self.gamma}")
        # terminal states become absorbing with zero reward
        if term.any():
            t = t.copy()
            r = r.copy()
            for s in np.flatnonzero(term):
                t[s] = 0.0
                t[s, :, s] = 1.0
                r[s] = 0.0
        check_rows(t)
        if (init < 0).any() or abs(init.sum() - 1.0) > ROW_TOL:
            raise MDPFormatError("initial_dist must be a probability vector")
        for name, val in (("transition", t), ("reward", r), ("terminal", term), ("initial_dist", init)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_gamma(self, gamma: float) -> "TabularMDP":
        return TabularMDP(self.transition, self.reward, gamma, self.initial_dist, self.terminal, dict(self.meta))


def check_rows(transition: np.ndarray) -> None:
    if (transition < 0).any():
        s, a, _ = np.argwhere(transition < 0)[0]
        raise MDPFormatError(f"negative transition probability at state {s}, action {a}")
    sums = transition.sum(axis=2)
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)
    if len(bad):
        s, a = bad[0]
        raise MDPFormatError(f"transition row ({s}, {a}) sums to {sums[s, a]!r}")


@dataclass(frozen=True)
class TabularPerturbation:
    """Per-state admissible observation sets B(s); s is always a member."""

    admissible: tuple[tuple[int, ...], ...]
    budget_label: float = 0.0

    def __post_init__(self):
        sets = tuple(tuple(sorted(set(int(x) for x in b))) for b in self.admissible)
        n = len(sets)
        for s, b in enumerate(sets):
            if s not in b:
                raise MDPFormatError(f"B({s}) must contain {s}")
            if b[0] < 0 or b[-1] >= n:
                raise MDPFormatError(f"B({s}) references a state outside [0, {n})")
        object.__setattr__(self, "admissible", sets)

    @classmethod
    def identity(cls, n_states: int) -> "TabularPerturbation":
        return cls(tuple((s,) for s in range(n_states)), 0.0)

    def __len__(self) -> int:
        return len(self.admissible)

    def __getitem__(self, s: int) -> tuple[int, ...]:
        return self.admissible[s]

    def product_size(self) -> int:
        out = 1
        for b in self.admissible:
            out *= len(b)
        return out

    def contains(self, other: "TabularPerturbation") -> bool:
        """True if every B_other(s) is a subset of B(s)."""
        return all(set(o) <= set(b) for b, o in zip(self.admissible, other.admissible))


@dataclass(frozen=True)
class DeterministicPolicy:
    action_of: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "action_of", tuple(int(a) for a in self.action_of))

    def __getitem__(self, s: int) -> int:
        return self.action_of[s]

    def __len__(self) -> int:
        return len(self.action_of)

    def check(self, mdp: TabularMDP) -> None:
        if len(self.action_of) != mdp.n_states:
            raise ValueError(f"policy covers {len(self.action_of)} states, MDP has {mdp.n_states}")
        if any(a < 0 or a >= mdp.n_actions for a in self.action_of):
            raise ValueError("policy action index out of range")


@dataclass(frozen=True)
class ContinuousEnvSpec:
    obs_dim: int
    act_dim: int
    act_low: tuple[float, ...]
    act_high: tuple[float, ...]
    dynamics: str = "point-mass"
    horizon: int = 50
    eps: float = 0.1

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ValueError("obs_dim and act_dim must be positive")
        if len(self.act_low) != self.act_dim or len(self.act_high) != self.act_dim:
            raise ValueError("action bounds must have act_dim entries")
        if any(lo >= hi for lo, hi in zip(self.act_low, self.act_high)):
            raise ValueError("act_low must be below act_high componentwise")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


# --------------------------------------------------------------------------
# generators


def build_gohome(
    width: int = 5,
    height: int = 5,
    home: tuple[int, int] = (4, 0),
    bomb: tuple[int, int] = (2, 2),
    rocks: Sequence[tuple[int, int]] = (),
    slip: float = 0.0,
    k_perturb: int = 1,
    start: tuple[int, int] | None = None,
    gamma: float = 0.9,
    home_reward: float = 10.0,
    bomb_reward: float = -10.0,
    step_reward: float = -0.1,
) -> tuple[TabularMDP, TabularPerturbation]:
    """Grid world with a rewarding home cell, a bomb and impassable rocks.

    Cells are ``(x, y)`` with ``y`` growing downwards; states enumerate
    non-rock cells in row-major order. Moving into a wall or rock leaves the
    agent in place. With probability ``slip`` the move is replaced by one of
    the two lateral moves (``slip / 2`` each).
    """
    if width < 1 or height < 1 or width * height < 2:
        raise ValueError("grid must have at least two cells")
    rocks = {tuple(c) for c in rocks}
    home, bomb = tuple(home), tuple(bomb)

    def inside(c):
        return 0 <= c[0] < width and 0 <= c[1] < height

    for name, c in (("home", home), ("bomb", bomb)):
        if not inside(c):
            raise ValueError(f"{name} cell {c} outside the grid")
        if c in rocks:
            raise ValueError(f"{name} cell {c} is on a rock")
    if home == bomb:
        raise ValueError("home and bomb must differ")
    if any(not inside(c) for c in rocks):
        raise ValueError("rock outside the grid")
    if not 0.0 <= slip < 0.5:
        raise ValueError("slip must lie in [0, 0.5)")
    if k_perturb < 0:
        raise ValueError("k_perturb must be non-negative")

    cells = [(x, y) for y in range(height) for x in range(width) if (x, y) not in rocks]
    index = {c: i for i, c in enumerate(cells)}
    n, m = len(cells), len(MOVES)
    if start is None:
        start = (0, height - 1)
    start = tuple(start)
    if start not in index or start in (home, bomb):
        raise ValueError(f"start cell {start} must be a free, non-terminal cell")

    def move(c, d):
        nxt = (c[0] + d[0], c[1] + d[1])
        return nxt if inside(nxt) and nxt not in rocks else c

    transition = np.zeros((n, m, n))
    reward = np.zeros((n, m))
    terminal = np.zeros(n, dtype=bool)
    terminal[index[home]] = terminal[index[bomb]] = True
    for c, s in index.items():
        if terminal[s]:
            continue
        for a, d in enumerate(MOVES):
            lateral = [MOVES[(a + 1) % 4], MOVES[(a + 3) % 4]]
            outcomes = [(d, 1.0 - slip)] + [(l, slip / 2) for l in lateral]
            for dd, p in outcomes:
                if p == 0.0:
                    continue
                nxt = index[move(c, dd)]
                transition[s, a, nxt] += p
                r = step_reward
                if nxt == index[home]:
                    r = home_reward
                elif nxt == index[bomb]:
                    r = bomb_reward
                reward[s, a] += p * r
    init = np.zeros(n)
    init[index[start]] = 1.0
    meta = {"cells": cells, "width": width, "height": height, "home": home, "bomb": bomb,
            "rocks": sorted(rocks), "start": start, "slip": slip}
    mdp = TabularMDP(transition, reward, gamma, init, terminal, meta)

    sets = []
    for (x, y) in cells:
        sets.append(tuple(
            index[c] for c in cells
            if max(abs(c[0] - x), abs(c[1] - y)) <= k_perturb
        ))
    return mdp, TabularPerturbation(tuple(sets), float(k_perturb))


def random_mdp(n_states: int, n_actions: int, gamma: float = 0.9, seed: int = 0) -> TabularMDP:
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be >= 1")
    rng = np.random.default_rng(seed)
    raw = rng.exponential(1.0, size=(n_states, n_actions, n_states)) + 1e-12
    transition = raw / raw.sum(axis=2, keepdims=True)
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    init = np.full(n_states, 1.0 / n_states)
    return TabularMDP(transition, reward, gamma, init, np.zeros(n_states, dtype=bool))


def random_perturbation(mdp: TabularMDP, max_set_size: int, seed: int = 0) -> TabularPerturbation:
    if max_set_size < 1:
        raise ValueError("max_set_size must be >= 1")
    rng = np.random.default_rng(seed)
    n = mdp.n_states
    sets = []
    for s in range(n):
        others = [x for x in range(n) if x != s]
        k = int(rng.integers(0, min(max_set_size - 1, n - 1) + 1))
        extra = rng.choice(others, size=k, replace=False) if k else []
        sets.append((s, *map(int, extra)))
    return TabularPerturbation(tuple(sets), float(max_set_size))


def step(mdp: TabularMDP, state: int, action: int, rng: np.random.Generator) -> tuple[int, float, bool]:
    if not 0 <= state < mdp.n_states:
        raise IndexError(f"state {state} out of range")
    if not 0 <= action < mdp.n_actions:
        raise IndexError(f"action {action} out of range")
    row = mdp.transition[state, action]
    nxt = int(rng.choice(mdp.n_states, p=row))
    return nxt, float(mdp.reward[state, action]), bool(mdp.terminal[nxt])


# --------------------------------------------------------------------------
# text format


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_mdp(path, mdp: TabularMDP, perturb: TabularPerturbation) -> None:
    n, m = mdp.n_states, mdp.n_actions
    lines = [f"MDP {n} {m} {_fmt(mdp.gamma)}"]
    lines.append("INIT " + " ".join(_fmt(p) for p in mdp.initial_dist))
    for s in range(n):
        for a in range(m):
            lines.append(f"T {s} {a} " + " ".join(_fmt(p) for p in mdp.transition[s, a]))
    lines.append("R")
    for s in range(n):
        lines.append(" ".join(_fmt(r) for r in mdp.reward[s]))
    lines.append("TERM " + " ".join("1" if t else "0" for t in mdp.terminal))
    lines.append(f"PERT {_fmt(perturb.budget_label)}")
    for b in perturb.admissible:
        lines.append(" ".join(str(x) for x in b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_mdp(path) -> tuple[TabularMDP, TabularPerturbation]:
    """Parse the text format written by :func:`save_mdp`.

    ``INIT`` is optional (uniform when absent). Every error carries the
    1-based line number it was detected on.
    """
    raw = Path(path).read_text().splitlines()
    lines = [(i + 1, ln.split()) for i, ln in enumerate(raw) if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise MDPFormatError("empty file", 1)
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise MDPFormatError("unexpected end of file", len(raw) + 1)
        item = lines[pos]
        pos += 1
        return item

    def peek():
        return lines[pos][1][0] if pos < len(lines) else None

    def floats(toks, lineno):
        try:
            return [float(t) for t in toks]
        except ValueError as exc:
            raise MDPFormatError(f"bad number: {exc}", lineno) from None

    lineno, head = take()
    if len(head) != 4 or head[0] != "MDP":
        raise MDPFormatError("header must be 'MDP n_states n_actions gamma'", lineno)
    try:
        n, m, gamma = int(head[1]), int(head[2]), float(head[3])
    except ValueError:
        raise MDPFormatError("malformed header values", lineno) from None
    if n < 1 or m < 1:
        raise MDPFormatError("n_states and n_actions must be positive", lineno)
    if not 0.0 <= gamma < 1.0:
        raise MDPFormatError("gamma must lie in [0, 1)", lineno)

    init = np.full(n, 1.0 / n)
    if peek() == "INIT":
        lineno, toks = take()
        init = np.array(floats(toks[1:], lineno))
        if init.shape != (n,):
            raise MDPFormatError(f"INIT needs {n} entries", lineno)

    transition = np.zeros((n, m, n))
    seen = np.zeros((n, m), dtype=bool)
    while peek() == "T":
        lineno, toks = take()
        if len(toks) != 3 + n:
            raise MDPFormatError(f"T row needs 'T s a' plus {n} probabilities", lineno)
        try:
            s, a = int(toks[1]), int(toks[2])
        except ValueError:
            raise MDPFormatError("bad T indices", lineno) from None
        if not (0 <= s < n and 0 <= a < m):
            raise MDPFormatError(f"dangling index in 'T {s} {a}'", lineno)
        row = np.array(floats(toks[3:], lineno))
        if (row < 0).any() or abs(row.sum() - 1.0) > ROW_TOL:
            raise MDPFormatError(f"transition row sums to {row.sum()!r}", lineno)
        transition[s, a] = row
        seen[s, a] = True
    if not seen.all():
        s, a = np.argwhere(~seen)[0]
        raise MDPFormatError(f"missing transition row for ({s}, {a})", lineno)

    lineno, toks = take()
    if toks != ["R"]:
        raise MDPFormatError("expected 'R'", lineno)
    reward = np.zeros((n, m))
    for s in range(n):
        lineno, toks = take()
        vals = floats(toks, lineno)
        if len(vals) != m:
            raise MDPFormatError(f"reward row needs {m} entries", lineno)
        reward[s] = vals

    lineno, toks = take()
    if toks[0] != "TERM" or len(toks) != n + 1 or any(t not in ("0", "1") for t in toks[1:]):
        raise MDPFormatError(f"expected 'TERM' with {n} 0/1 flags", lineno)
    terminal = np.array([t == "1" for t in toks[1:]])

    lineno, toks = take()
    if toks[0] != "PERT":
        raise MDPFormatError("expected 'PERT'", lineno)
    label = floats(toks[1:2], lineno)[0] if len(toks) > 1 else 0.0
    sets = []
    for s in range(n):
        lineno, toks = take()
        try:
            members = [int(t) for t in toks]
        except ValueError:
            raise MDPFormatError("bad PERT index", lineno) from None
        bad = [x for x in members if not 0 <= x < n]
        if bad:
            raise MDPFormatError(f"dangling state index {bad[0]} in B({s})", lineno)
        if s not in members:
            raise MDPFormatError(f"B({s}) must contain {s}", lineno)
        sets.append(tuple(members))
    if pos != len(lines):
        raise MDPFormatError("trailing content", lines[pos][0])
    mdp = TabularMDP(transition, reward, gamma, init, terminal)
    return mdp, TabularPerturbation(tuple(sets), label)


def save_policy(path, policy: DeterministicPolicy) -> None:
    Path(path).write_text("POLICY " + " ".join(str(a) for a in policy.action_of) + "\n")


def load_policy(path) -> DeterministicPolicy:
    toks = Path(path).read_text().split()
    if not toks or toks[0] != "POLICY":
        raise MDPFormatError("policy file must start with 'POLICY'", 1)
    return DeterministicPolicy(tuple(int(t) for t in toks[1:]))


def chain2() -> tuple[TabularMDP, TabularPerturbation, DeterministicPolicy]:
    """Two-state stay/switch chain used throughout the test-suite."""
    t = np.zeros((2, 2, 2))
    t[0, 0, 0] = t[0, 1, 1] = 1.0
    t[1, 0, 1] = t[1, 1, 0] = 1.0
    r = np.array([[0.0, 0.0], [1.0, 1.0]])
    mdp = TabularMDP(t, r, 0.5, np.array([1.0, 0.0]), np.zeros(2, dtype=bool))
    return mdp, TabularPerturbation(((0, 1), (1,)), 1.0), DeterministicPolicy((1, 0))
