"""Small MLPs over flat parameter vectors, with hand-rolled backprop and Adam.

All functions accept a single input vector or a batch (rows are samples).
Parameter gradients of a batch are summed over its rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh")
HEADS = ("linear", "gaussian-mean", "softmax-logits")


@dataclass(frozen=True)
class NetSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    output_head: str = "linear"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"need >= 2 positive layer widths, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_widths[1:], self.layer_widths[:-1]))

    @property
    def n_params(self) -> int:
        return sum((i + 1) * o for o, i in self.shapes)

    def line(self) -> str:
        return f"{'-'.join(map(str, self.layer_widths))} {self.activation} {self.output_head}"

    @classmethod
    def parse(cls, text: str) -> "NetSpec":
        widths, act, head = text.split()
        return cls(tuple(int(w) for w in widths.split("-")), act, head)


def unflatten(spec: NetSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (not copies) of each layer's ``(W, b)``; ``W`` is ``[out, in]``."""
    params = np.asarray(params)
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")
    layers, k = [], 0
    for o, i in spec.shapes:
        w = params[k:k + o * i].reshape(o, i)
        k += o * i
        b = params[k:k + o]
        k += o
        layers.append((w, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in layers])


def _act(spec, z):
    return np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)


def _act_grad(spec, z, a):
    return (z > 0).astype(float) if spec.activation == "relu" else 1.0 - a * a


def _as_batch(spec, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None] if single else x
    if x2.ndim != 2 or x2.shape[1] != spec.n_in:
        raise ValueError(f"input must have {spec.n_in} features, got shape {x.shape}")
    return x2, single


def forward_cache(spec: NetSpec, params, x):
    x2, single = _as_batch(spec, x)
    layers = unflatten(spec, params)
    acts, pre = [x2], []
    h = x2
    for k, (w, b) in enumerate(layers):
        z = h @ w.T + b
        pre.append(z)
        h = z if k == len(layers) - 1 else _act(spec, z)
        acts.append(h)
    return (layers, acts, pre), single


def forward(spec: NetSpec, params, x) -> np.ndarray:
    """Affine/activation composition; softmax heads return raw logits."""
    (_, acts, _), single = forward_cache(spec, params, x)
    return acts[-1][0] if single else acts[-1]


def _backward(spec, cache, upstream, want_params=True, want_input=False):
    layers, acts, pre = cache
    g = upstream
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        if k < len(layers) - 1:
            g = g * _act_grad(spec, pre[k], acts[k + 1])
        if want_params:
            grads.append((g.T @ acts[k], g.sum(axis=0)))
        if k > 0 or want_input:
            g = g @ w
    gp = flatten(grads[::-1]) if want_params else None
    return gp, g


def _upstream(spec, upstream, batch, single):
    u = np.asarray(upstream, dtype=float)
    u2 = u[None] if single else u
    if u2.shape != (batch, spec.n_out):
        raise ValueError(f"upstream must have shape {(batch, spec.n_out)}, got {u.shape}")
    return u2


def grad_params(spec: NetSpec, params, x, upstream) -> np.ndarray:
    """Gradient of ``<upstream, forward(x)>`` w.r.t. the flat parameters."""
    cache, single = forward_cache(spec, params, x)
    u = _upstream(spec, upstream, cache[1][0].shape[0], single)
    return _backward(spec, cache, u)[0]


def grad_input(spec: NetSpec, params, x, upstream) -> np.ndarray:
    cache, single = forward_cache(spec, params, x)
    u = _upstream(spec, upstream, cache[1][0].shape[0], single)
    _, gx = _backward(spec, cache, u, want_params=False, want_input=True)
    return gx[0] if single else gx


def value_and_grads(spec: NetSpec, params, x, upstream_fn, want_input=False):
    """Forward once, then backprop ``upstream_fn(outputs)``.

    ``upstream_fn`` returns ``(scalar, d scalar / d outputs)``; the result is
    ``(scalar, grad_params, grad_input or None)``.
    """
    cache, single = forward_cache(spec, params, x)
    out = cache[1][-1]
    val, up = upstream_fn(out[0] if single else out)
    up = _upstream(spec, up, out.shape[0], single)
    gp, gx = _backward(spec, cache, up, want_input=want_input)
    if want_input:
        gx = gx[0] if single else gx
    return val, gp, (gx if want_input else None)


def init_params(spec: NetSpec, scheme: str = "auto", seed: int = 0, out_scale: float = 1.0) -> np.ndarray:
    """He (relu) or Xavier (tanh) normal weights, zero biases.

    ``out_scale`` shrinks the final layer, a common trick for policy heads.
    """
    if scheme == "auto":
        scheme = "he" if spec.activation == "relu" else "xavier"
    if scheme not in ("he", "xavier", "zeros"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for k, (o, i) in enumerate(spec.shapes):
        if scheme == "zeros":
            std = 0.0
        elif scheme == "he":
            std = np.sqrt(2.0 / i)
        else:
            std = np.sqrt(2.0 / (i + o))
        w = rng.normal(0.0, 1.0, size=(o, i)) * std
        if k == len(spec.shapes) - 1:
            w = w * out_scale
        layers.append((w, np.zeros(o)))
    return flatten(layers)


def identity_params(n: int) -> np.ndarray:
    """Parameters of a single ``n -> n`` linear layer computing the identity."""
    return flatten([(np.eye(n), np.zeros(n))])


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_step(params, grad, state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps_num: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("params, grad and Adam state must be congruent")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps_num), AdamState(m, v, t)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if max_norm > 0 and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


# --------------------------------------------------------------------------
# checkpoints


def _fmt(x) -> str:
    return format(float(x), ".17g")


def save_net(path, spec: NetSpec, params, extra: dict | None = None) -> None:
    """``NET`` header, spec line, optional ``key value...`` lines, flat params."""
    lines = ["NET", spec.line()]
    for key, val in (extra or {}).items():
        vals = np.atleast_1d(np.asarray(val, dtype=float))
        lines.append(f"EXTRA {key} " + " ".join(_fmt(x) for x in vals))
    lines.append("PARAMS " + " ".join(_fmt(x) for x in params))
    Path(path).write_text("\n".join(lines) + "\n")


def load_net(path) -> tuple[NetSpec, np.ndarray, dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "NET":
        raise ValueError(f"{path}: not a NET checkpoint")
    spec = NetSpec.parse(lines[1])
    extra, params = {}, None
    for ln in lines[2:]:
        toks = ln.split()
        if not toks:
            continue
        if toks[0] == "EXTRA":
            extra[toks[1]] = np.array([float(x) for x in toks[2:]])
        elif toks[0] == "PARAMS":
            params = np.array([float(x) for x in toks[1:]])
    if params is None or params.shape != (spec.n_params,):
        raise ValueError(f"{path}: parameter count does not match spec {spec.line()}")
    return spec, params, extra


@dataclass
class Net:
    """A spec bundled with its parameters; convenience for callers."""

    spec: NetSpec
    params: np.ndarray
    extra: dict = field(default_factory=dict)

    def __call__(self, x):
        return forward(self.spec, self.params, x)
