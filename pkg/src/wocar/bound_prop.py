"""Interval bound propagation and estimated admissible-action sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approximator import NetSpec, forward, unflatten, value_and_grads

# outward padding applied to non-degenerate bounds so float rounding in the
# matmuls cannot make a sampled forward pass poke past a bound
_PAD = 1e-12


@dataclass(frozen=True)
class IntervalBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    def contains(self, y) -> np.ndarray:
        y = np.asarray(y)
        return (y >= self.lower) & (y <= self.upper)

    def within(self, other: "IntervalBounds") -> bool:
        return bool(np.all(other.lower <= self.lower) and np.all(self.upper <= other.upper))


@dataclass(frozen=True)
class ContinuousAdvBox:
    low: np.ndarray
    high: np.ndarray

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    @property
    def width(self) -> np.ndarray:
        return self.high - self.low

    def contains(self, a) -> bool:
        a = np.asarray(a)
        return bool(np.all(a >= self.low) and np.all(a <= self.high))


def ibp_bounds(spec: NetSpec, params, center, eps) -> IntervalBounds:
    """Output bounds over the l-inf ball of radius ``eps`` around ``center``.

    ``center`` may be a batch; ``eps`` may be a scalar or per-coordinate.
    """
    eps_arr = np.asarray(eps, dtype=float)
    if np.any(eps_arr < 0):
        raise ValueError("eps must be non-negative")
    c = np.asarray(center, dtype=float)
    lo, hi = c - eps_arr, c + eps_arr
    layers = unflatten(spec, params)
    for k, (w, b) in enumerate(layers):
        mid = 0.5 * (lo + hi)
        rad = 0.5 * (hi - lo)
        m = mid @ w.T + b
        r = rad @ np.abs(w).T
        lo, hi = m - r, m + r
        if k < len(layers) - 1:
            if spec.activation == "relu":
                lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
            else:
                lo, hi = np.tanh(lo), np.tanh(hi)
    if np.any(eps_arr > 0):
        pad = _PAD * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
        lo, hi = lo - pad, hi + pad
    else:
        # degenerate ball: report the plain forward pass
        lo = hi = forward(spec, params, c)
    return IntervalBounds(lo, hi)


def adv_set_from_bounds(lower, upper) -> tuple[int, ...]:
    """Action ``i`` qualifies iff ``upper[i] > lower[j]`` for every ``j != i``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = len(lower)
    out = []
    for i in range(n):
        others = np.delete(lower, i)
        if n == 1 or np.all(upper[i] > others):
            out.append(i)
    return tuple(out)


def adv_mask_from_bounds(lower, upper) -> np.ndarray:
    """Batched :func:`adv_set_from_bounds` as a boolean ``[batch, actions]`` mask."""
    lower = np.atleast_2d(lower)
    upper = np.atleast_2d(upper)
    n = lower.shape[1]
    if n == 1:
        return np.ones_like(lower, dtype=bool)
    # largest lower bound among the other actions
    order = np.argsort(lower, axis=1)
    top = np.take_along_axis(lower, order[:, -1:], axis=1)
    second = np.take_along_axis(lower, order[:, -2:-1], axis=1)
    is_top = np.arange(n)[None, :] == order[:, -1:]
    other_max = np.where(is_top, second, top)
    return upper > other_max


def adv_set_discrete(spec: NetSpec, params, s, eps) -> tuple[int, ...]:
    if spec.output_head not in ("linear", "softmax-logits"):
        raise ValueError("discrete admissible sets need a linear or softmax-logits head")
    b = ibp_bounds(spec, params, s, eps)
    out = adv_set_from_bounds(b.lower, b.upper)
    if not out:
        # unreachable for sound bounds: the clean argmax always qualifies
        raise ArithmeticError("empty admissible set")
    return out


def adv_set_tabular(spec: NetSpec, params, observations, members) -> tuple[int, ...]:
    """Exact admissible set over an enumerated perturbation set.

    ``observations[t]`` is the encoding of state ``t`` and ``members`` lists
    the states an observation may be perturbed to.
    """
    out = forward(spec, params, np.asarray(observations)[list(members)])
    return tuple(sorted({int(a) for a in out.argmax(axis=1)}))


def adv_box_continuous(spec: NetSpec, params, s, eps, act_low=None, act_high=None) -> ContinuousAdvBox:
    if spec.output_head != "gaussian-mean":
        raise ValueError("continuous admissible boxes need a gaussian-mean head")
    b = ibp_bounds(spec, params, s, eps)
    lo, hi = b.lower, b.upper
    if act_low is not None:
        lo = np.clip(lo, act_low, act_high)
        hi = np.clip(hi, act_low, act_high)
    return ContinuousAdvBox(lo, hi)


def min_q_over_box(q_spec: NetSpec, q_params, s, box: ContinuousAdvBox, steps: int = 50,
                   step_size=None) -> tuple[np.ndarray, np.ndarray]:
    """Minimise ``Q(s, a)`` over ``a`` in a box by projected descent.

    The critic takes ``concat(s, a)``. Starts at the box midpoint and takes
    signed-gradient steps of ``step_size`` (default: a tenth of the box
    width), clamping back into the box; a step that fails to lower the value
    is rejected and that sample's step is halved. Returns the best iterate and
    its value; batched over rows of ``s`` (with matching rows in the box).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    s2 = np.atleast_2d(np.asarray(s, dtype=float))
    lo = np.atleast_2d(np.asarray(box.low, dtype=float))
    hi = np.atleast_2d(np.asarray(box.high, dtype=float))
    lo, hi = np.broadcast_to(lo, (s2.shape[0], lo.shape[1])), np.broadcast_to(hi, (s2.shape[0], hi.shape[1]))
    single = np.ndim(s) == 1
    ds = s2.shape[1]
    a = 0.5 * (lo + hi)
    step = 0.1 * (hi - lo) if step_size is None else np.broadcast_to(np.asarray(step_size, float), lo.shape).copy()
    step = np.array(step, dtype=float)

    def evaluate(acts, with_grad):
        x = np.concatenate([s2, acts], axis=1)
        if not with_grad:
            return forward(q_spec, q_params, x)[:, 0], None
        out, _, gx = value_and_grads(q_spec, q_params, x, lambda o: (o[:, 0].copy(), np.ones_like(o)),
                                     want_input=True)
        return out, gx[:, ds:]

    val, g = evaluate(a, True)
    for _ in range(steps):
        if not np.any(step > 0):
            break
        cand = np.clip(a - step * np.sign(g), lo, hi)
        cval, _ = evaluate(cand, False)
        better = cval < val
        a = np.where(better[:, None], cand, a)
        val = np.where(better, cval, val)
        step = np.where(better[:, None], step, 0.5 * step)
        _, g = evaluate(a, True)
    if single:
        return a[0], val[0]
    return a, val
