"""Command-line entry point: ``wocar <command> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .agents import TrainingAborted, make_env
from .agents.envs import ENV_NAMES, TabularEnv
from .approximator import Net, load_net
from .attacks_eval import ATTACK_KINDS, AttackSpec, evaluate
from .harness import ALGOS, ConfigError, ExportError, RunConfig, export_table, load_config, parse_config, \
    run_experiment, run_sweep
from .mdp import load_mdp, load_policy
from .worst_attack import NonConvergenceError, natural_return, optimal_attacker, worst_attack_fixed_point, \
    worst_attack_state_value

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        over[key.strip()] = val.strip()
    for key in ("algo", "env", "seed", "out"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    return cfg.replace(**over) if over else cfg


def _run_dir_of(ckpt: Path) -> Path:
    return ckpt.parent.parent if ckpt.parent.name == "checkpoints" else ckpt.parent


def _load_victim(args):
    try:
        spec, params, _ = load_net(args.ckpt)
    except (OSError, ValueError) as e:
        raise ConfigError(str(e)) from e
    env_name, env_kwargs = args.env, {}
    cfg_path = _run_dir_of(Path(args.ckpt)) / "config.txt"
    if cfg_path.is_file():
        cfg = parse_config(cfg_path.read_text())
        env_name = env_name or cfg.env
        if env_name == cfg.env:
            env_kwargs = cfg.env_kwargs
    if env_name is None:
        raise ConfigError("--env is required when the checkpoint has no run config next to it")
    try:
        env = make_env(env_name, **env_kwargs)
    except KeyError as e:
        raise ConfigError(str(e)) from e
    return Net(spec, params), env


def cmd_train(args) -> int:
    run_dir = run_experiment(_base_config(args))
    print(json.dumps({"run_dir": str(run_dir), **json.loads((run_dir / "summary.json").read_text())}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    net, env = _load_victim(args)
    rep = evaluate(net, env, AttackSpec("none"), args.episodes, args.seed)
    print(json.dumps(rep.as_dict(), indent=2))
    return EXIT_OK


def cmd_attack(args) -> int:
    net, env = _load_victim(args)
    try:
        spec = AttackSpec(args.attack, args.eps, args.steps, args.seed)
        rep = evaluate(net, env, spec, args.episodes, args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    rec = {"ckpt": str(args.ckpt), **rep.as_dict()}
    print(json.dumps(rec, indent=2))
    with (_run_dir_of(Path(args.ckpt)) / "attacks.jsonl").open("a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_oracle(args) -> int:
    try:
        if args.mdp:
            mdp, perturb = load_mdp(args.mdp)
        else:
            env = make_env(args.env or "gohome")
            if not isinstance(env, TabularEnv):
                raise ConfigError("oracle needs a tabular environment")
            mdp, perturb = env.mdp, env.perturb
        policy = load_policy(args.policy)
        policy.check(mdp)
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(str(e)) from e
    q_low = worst_attack_fixed_point(mdp, policy, perturb)
    v_low = worst_attack_state_value(q_low, policy, perturb)
    _, h = optimal_attacker(mdp, policy, perturb)
    print(json.dumps({
        "natural_return": natural_return(mdp, policy),
        "worst_case_return": float(mdp.initial_dist @ v_low),
        "worst_state_values": [float(x) for x in v_low],
        "worst_q": [[float(x) for x in row] for row in q_low],
        "attacker_map": list(h.perturb_to),
    }, indent=2))
    return EXIT_OK


def cmd_bounds_check(args) -> int:
    from .bound_prop import ibp_bounds

    try:
        spec, params, _ = load_net(args.ckpt)
    except (OSError, ValueError) as e:
        raise ConfigError(str(e)) from e
    net = Net(spec, params)
    rng = np.random.default_rng(args.seed)
    violations, worst_width = 0, 0.0
    for _ in range(args.centers):
        s = rng.normal(size=spec.n_in)
        b = ibp_bounds(spec, params, s, args.eps)
        x = s + rng.uniform(-args.eps, args.eps, size=(args.samples, spec.n_in))
        z = net(x)
        violations += int(np.sum((z < b.lower - 1e-12) | (z > b.upper + 1e-12)))
        worst_width = max(worst_width, float(np.max(b.upper - b.lower)))
    print(json.dumps({"centers": args.centers, "samples": args.samples, "eps": args.eps,
                      "violations": violations, "max_width": worst_width}, indent=2))
    return EXIT_OK if violations == 0 else EXIT_NUMERIC


def cmd_sweep(args) -> int:
    base = _base_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not values or not seeds:
        raise ConfigError("--values and --seeds must be non-empty")
    out = run_sweep(base, args.param, values, seeds, args.out or base.out)
    print((out / "aggregate.csv").read_text(), end="")
    return EXIT_OK


def cmd_export(args) -> int:
    print(export_table(args.dir, args.format))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wocar", description="Worst-case-aware robust RL lab")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--algo", choices=sorted(ALGOS))
        sp.add_argument("--env", choices=ENV_NAMES)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train", help="train one run")
    run_opts(sp)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_train)

    for name, fn in (("eval", cmd_eval), ("attack", cmd_attack)):
        sp = sub.add_parser(name, help=f"{name} a checkpoint")
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--env", choices=ENV_NAMES)
        sp.add_argument("--episodes", type=int, default=20)
        sp.add_argument("--seed", type=int, default=0)
        if name == "attack":
            sp.add_argument("--attack", required=True, choices=ATTACK_KINDS)
            sp.add_argument("--eps", type=float, default=0.1)
            sp.add_argument("--steps", type=int, default=10)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("oracle", help="exact worst-attack values of a tabular policy")
    sp.add_argument("--mdp", help="MDP file (default: the built-in env)")
    sp.add_argument("--env", choices=ENV_NAMES)
    sp.add_argument("--policy", required=True)
    sp.set_defaults(fn=cmd_oracle)

    sp = sub.add_parser("bounds-check", help="sample-check interval bounds of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--eps", type=float, default=0.1)
    sp.add_argument("--centers", type=int, default=20)
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_bounds_check)

    sp = sub.add_parser("sweep", help="values x seeds grid over one config key")
    run_opts(sp)
    sp.add_argument("--param", required=True, help="config key, e.g. sched.kappa_wst")
    sp.add_argument("--values", required=True, help="comma separated")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("export", help="flatten metrics or a sweep aggregate to csv/tsv")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--format", choices=("csv", "tsv"), default="csv")
    sp.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ExportError) as e:
        print(f"wocar: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NonConvergenceError, FloatingPointError) as e:
        print(f"wocar: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
