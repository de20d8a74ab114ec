"""Run configuration, experiment orchestration and result tables.

Config files are flat ``key = value`` text. Top-level keys name the run
(``algo``, ``env``, ``seed``, ``out``); prefixed keys fill the rest:

* ``train.*``  optimisation and algorithm fields of :class:`TrainConfig`
* ``net.*``    ``hidden`` (comma separated widths) and ``activation``
* ``sched.*``  budget and loss-weight schedule fields (``eps_target``, ``kappa_wst``, ...)
* ``eval.*``   ``episodes``, ``attacks`` (``kind:eps`` list), ``attack_steps``, ``checkpoint_every``
* ``env.*``    keyword arguments of the environment constructor

``#`` starts a comment. Unknown keys are errors.
"""

from __future__ import annotations

import ast
import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .agents import TrainConfig, make_env, vanilla_dqn_train, vanilla_ppo_train, wocar_dqn_train, wocar_ppo_train
from .agents.envs import ENV_NAMES, TabularEnv
from .approximator import Net, save_net
from .attacks_eval import ATTACK_KINDS, AttackSpec, evaluate

ALGOS = {
    "dqn": vanilla_dqn_train,
    "wocar-dqn": wocar_dqn_train,
    "ppo": vanilla_ppo_train,
    "wocar-ppo": wocar_ppo_train,
}

NET_KEYS = ("hidden", "activation")
SCHED_KEYS = ("eps_target", "eps_start_frac", "eps_end_frac", "kappa_wst", "kappa_shape", "kappa_reg", "reg_steps",
              "tabular_sets", "box_steps")
EVAL_KEYS = ("episodes", "attacks", "attack_steps", "checkpoint_every")


class ConfigError(ValueError):
    """A config file or override could not be resolved."""


class ExportError(ValueError):
    """A run or sweep directory has no usable results."""


@dataclass
class RunConfig:
    algo: str = "wocar-dqn"
    env: str = "gohome"
    seed: int = 0
    out: str = "runs/run"
    train: TrainConfig = field(default_factory=TrainConfig)
    env_kwargs: dict = field(default_factory=dict)
    episodes: int = 20
    attacks: tuple[AttackSpec, ...] = ()
    attack_steps: int = 10
    checkpoint_every: int = 1  # in log records

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}; known: {', '.join(ALGOS)}")
        if self.env not in ENV_NAMES:
            raise ConfigError(f"unknown env {self.env!r}; known: {', '.join(ENV_NAMES)}")
        if self.episodes < 1 or self.checkpoint_every < 1:
            raise ConfigError("eval.episodes and eval.checkpoint_every must be >= 1")

    def make_env(self):
        try:
            return make_env(self.env, **self.env_kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"env.* options rejected: {e}") from e

    def suite(self, env) -> tuple[AttackSpec, ...]:
        """Configured attacks, or a default pair sized to the env."""
        if self.attacks:
            return self.attacks
        if isinstance(env, TabularEnv):
            return (AttackSpec("random", 1.0), AttackSpec("tabular-bruteforce", 1.0))
        eps = self.train.eps_target
        return (AttackSpec("random", eps), AttackSpec("pgd", eps, self.attack_steps))

    def to_text(self) -> str:
        """Canonical config text; parsing it gives back an equal config."""
        lines = [f"algo = {self.algo}", f"env = {self.env}", f"seed = {self.seed}", f"out = {self.out}"]
        for f in fields(TrainConfig):
            val = getattr(self.train, f.name)
            if f.name in NET_KEYS:
                prefix = "net"
            elif f.name in SCHED_KEYS:
                prefix = "sched"
            else:
                prefix = "train"
            lines.append(f"{prefix}.{f.name} = {_show(val)}")
        lines.append(f"eval.episodes = {self.episodes}")
        lines.append(f"eval.attacks = {','.join(attack_label(a) for a in self.attacks)}")
        lines.append(f"eval.attack_steps = {self.attack_steps}")
        lines.append(f"eval.checkpoint_every = {self.checkpoint_every}")
        for k, v in sorted(self.env_kwargs.items()):
            lines.append(f"env.{k} = {_show(v)}")
        return "\n".join(lines) + "\n"

    def replace(self, **overrides) -> "RunConfig":
        """Apply ``key=value`` overrides written as in a config file."""
        return parse_config("".join(f"{k} = {v}\n" for k, v in overrides.items()), base=self)


def _show(val) -> str:
    if val is None:
        return "none"
    if isinstance(val, tuple):
        return ",".join(str(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val).lower() if isinstance(val, bool) else str(val)


def attack_label(a: AttackSpec) -> str:
    return f"{a.kind}:{a.eps!r}"


def _parse_attacks(text: str, steps: int) -> tuple[AttackSpec, ...]:
    out = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        kind, _, eps = item.partition(":")
        if kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack {kind!r}")
        try:
            out.append(AttackSpec(kind, float(eps) if eps else 0.0, steps))
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return tuple(out)


def _coerce(type_str: str, raw: str, key: str):
    """Convert ``raw`` to the type named by a dataclass annotation."""
    optional = "None" in type_str
    base = type_str.replace("| None", "").strip()
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base == "bool":
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if base.startswith("tuple"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type_str}") from None


def _literal(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Read key = value lines on top of ``base`` (defaults when omitted)."""
    base = base or RunConfig()
    top = {"algo": base.algo, "env": base.env, "seed": base.seed, "out": base.out}
    train = {f.name: getattr(base.train, f.name) for f in fields(TrainConfig)}
    types = {f.name: f.type for f in fields(TrainConfig)}
    ev = {"episodes": base.episodes, "attack_steps": base.attack_steps, "checkpoint_every": base.checkpoint_every}
    attacks_raw = None
    env_kwargs = dict(base.env_kwargs)

    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value")
        prefix, dot, name = key.partition(".")
        if not dot:
            if key not in top:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = _coerce("int", raw, key) if key == "seed" else raw
        elif prefix == "env":
            env_kwargs[name] = _literal(raw)
        elif prefix == "eval":
            if name not in EVAL_KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if name == "attacks":
                attacks_raw = raw
            else:
                ev[name] = _coerce("int", raw, key)
        elif prefix in ("train", "net", "sched"):
            expected = "net" if name in NET_KEYS else "sched" if name in SCHED_KEYS else "train"
            if name not in types or prefix != expected:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            train[name] = _coerce(types[name], raw, key)
        else:
            raise ConfigError(f"line {lineno}: unknown section {prefix!r}")

    try:
        train_cfg = TrainConfig(**train)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    attacks = base.attacks if attacks_raw is None else _parse_attacks(attacks_raw, ev["attack_steps"])
    if attacks_raw is None and ev["attack_steps"] != base.attack_steps:
        attacks = tuple(AttackSpec(a.kind, a.eps, ev["attack_steps"], a.seed) for a in attacks)
    return RunConfig(top["algo"], top["env"], top["seed"], top["out"], train_cfg, env_kwargs, ev["episodes"], attacks,
                     ev["attack_steps"], ev["checkpoint_every"])


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


# --------------------------------------------------------------------------
# runs


def version_hash() -> str:
    """Git-style blob hash of the package version string."""
    data = f"wocar {__version__}".encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _acting_net(state) -> Net:
    if hasattr(state, "policy"):
        return state.policy.net
    return state.acting.net


def _save_checkpoint(run_dir: Path, tag: str, state) -> Path:
    ck = run_dir / "checkpoints"
    ck.mkdir(exist_ok=True)
    net = _acting_net(state)
    extra = {"step": state.step}
    if getattr(state, "log_std", None) is not None:
        extra["log_std"] = state.log_std
    path = ck / f"{tag}.net"
    save_net(path, net.spec, net.params, extra)
    critic = getattr(state, "critic", None)
    if critic is not None:
        save_net(ck / f"{tag}.critic.net", critic.spec, critic.params, {"step": state.step})
    return path


def run_experiment(config: RunConfig) -> Path:
    """Train, checkpoint and evaluate one run; returns its directory.

    The directory holds ``config.txt`` (echo), ``meta.json`` (version hash,
    seed), ``metrics.jsonl``, ``checkpoints/`` and ``summary.json``.
    """
    env = config.make_env()
    suite = config.suite(env)
    run_dir = Path(config.out)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(config.to_text())
    except OSError as e:
        raise ConfigError(f"cannot write to {run_dir}: {e}") from e
    meta = {"version": __version__, "version_hash": version_hash(), "seed": config.seed, "algo": config.algo,
            "env": config.env}
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    metrics_path = run_dir / "metrics.jsonl"
    metrics_path.write_text("")
    count = [0]

    def on_log(rec, state):
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        count[0] += 1
        if count[0] % config.checkpoint_every == 0:
            _save_checkpoint(run_dir, f"step{rec['step']:08d}", state)

    t0 = time.perf_counter()
    state, metrics = ALGOS[config.algo](env, config.train, config.seed, on_log=on_log)
    train_time = time.perf_counter() - t0
    _save_checkpoint(run_dir, "final", state)

    net = _acting_net(state)
    eval_seed = config.seed + 10_000
    summary = {"natural_return": evaluate(net, env, AttackSpec("none"), config.episodes, eval_seed).mean,
               "attacks": {}}
    for spec in suite:
        rep = evaluate(net, env, spec, config.episodes, eval_seed)
        summary["attacks"][attack_label(spec)] = rep.mean
    if isinstance(env, TabularEnv):
        last = metrics[-1]
        summary["exact_natural_return"] = last["natural_return"]
        summary["worst_case_return"] = last["worst_eval_return"]
    else:
        summary["worst_case_return"] = min(summary["attacks"].values()) if suite else summary["natural_return"]
    summary["train_seconds"] = train_time
    summary["wall_seconds"] = time.perf_counter() - t0
    summary["steps"] = state.step
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return run_dir


def worker_count() -> int:
    raw = os.environ.get("WOCAR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"WOCAR_THREADS must be an integer, got {raw!r}") from None


def run_sweep(base: RunConfig, parameter: str, values, seeds, out) -> Path:
    """Run ``values x seeds`` and write ``aggregate.csv``.

    ``parameter`` is a config key (``sched.kappa_wst``); each run lands in
    ``out/<parameter>=<value>/seed<k>``. Runs fan out over ``WOCAR_THREADS``
    processes.
    """
    out = Path(out)
    configs = []
    for v in values:
        for s in seeds:
            cfg = base.replace(**{parameter: _show(v) if not isinstance(v, str) else v, "seed": s})
            cfg.out = str(out / f"{parameter}={_show(v)}" / f"seed{s}")
            configs.append((str(v), cfg))
    workers = min(worker_count(), len(configs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            dirs = list(pool.map(run_experiment, [c for _, c in configs]))
    else:
        dirs = [run_experiment(c) for _, c in configs]

    rows = {}
    for (v, _), d in zip(configs, dirs):
        summ = json.loads((d / "summary.json").read_text())
        rows.setdefault(v, []).append(summ)
    with (out / "aggregate.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([parameter, "runs", "mean_natural_return", "mean_worst_case_return", "median_natural_return",
                    "median_worst_case_return"])
        for v in (str(x) for x in values):
            nat = [r["natural_return"] for r in rows[v]]
            wc = [r["worst_case_return"] for r in rows[v]]
            w.writerow([v, len(nat), _num(np.mean(nat)), _num(np.mean(wc)), _num(np.median(nat)),
                        _num(np.median(wc))])
    return out


def _num(x) -> str:
    return format(float(x), ".17g")


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.is_file():
        raise ExportError(f"{run_dir}: no metrics.jsonl")
    records = []
    for i, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ExportError(f"{path}:{i}: corrupt record ({e.msg})") from None
    if not records:
        raise ExportError(f"{path}: no records")
    return records


def export_table(src, fmt: str = "csv") -> Path:
    """Flatten a run's metrics (or a sweep's aggregate) to ``metrics.<fmt>`` / ``aggregate.<fmt>``.

    Columns are ``step`` then the remaining keys sorted; floats carry 17
    significant digits, so parsing the table gives the logged values back.
    """
    if fmt not in ("csv", "tsv"):
        raise ExportError(f"unknown format {fmt!r}")
    src = Path(src)
    delim = "," if fmt == "csv" else "\t"
    agg = src / "aggregate.csv"
    if agg.is_file() and not (src / "metrics.jsonl").exists():
        rows = list(csv.reader(agg.read_text().splitlines()))
        if len(rows) < 2:
            raise ExportError(f"{agg}: no rows")
        dest = src / f"aggregate.{fmt}"
        if dest != agg:
            with dest.open("w", newline="") as fh:
                csv.writer(fh, delimiter=delim).writerows(rows)
        return dest
    records = read_metrics(src)
    cols = ["step"] + sorted({k for r in records for k in r} - {"step"})
    dest = src / f"metrics.{fmt}"
    with dest.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delim)
        w.writerow(cols)
        for r in records:
            w.writerow(["" if k not in r else _num(r[k]) if isinstance(r[k], float) else r[k] for k in cols])
    return dest
