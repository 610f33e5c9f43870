"""Command-line entry point: ``pacmdp <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .harness import ESTIMATORS, ExperimentConfig, emit_trace, run_experiment
from .lowerbound import (
    HardMdpSpec,
    bandit_phase_threshold,
    build_hard_mdp,
    chain_hard_mdps,
    hard_bandit_instance,
    simulate_learn_bandit,
)
from .mdp import load_mdp, mdp_to_dict, save_mdp, solve_optimal, split_to_two_support
from .ucrl import UcrlAgent, derive_constants


def _dump(obj, out=None):
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _write_mdp(mdp, out):
    if out:
        save_mdp(mdp, out)
    else:
        _dump(mdp_to_dict(mdp))


def cmd_constants(args):
    c = derive_constants(args.states, args.actions, args.epsilon, args.delta, args.gamma)
    _dump(c.as_dict(), args.out)


def cmd_solve(args):
    mdp = load_mdp(args.mdp)
    values, policy = solve_optimal(mdp, args.tolerance)
    _dump({"values": values.values.tolist(), "policy": list(policy.action_of)}, args.out)


def cmd_run_ucrl(args):
    config = ExperimentConfig.load(args.config)
    for name, value in (("steps", args.steps), ("seed", args.seed), ("m_override", args.m_override),
                        ("mistake_estimator", args.estimator), ("trace_path", args.out),
                        ("report_path", args.report)):
        if value is not None:
            setattr(config, name, value)
    config.__post_init__()
    rows, report = run_experiment(config)
    if config.trace_path:
        emit_trace(rows, report, config.trace_path, config.report_path)
    summary = {k: getattr(report, k) for k in (
        "total_steps", "mistake_count", "update_count", "delay_steps", "exploration_phase_count",
        "bound", "bound_respected", "seed", "m_effective")}
    _dump(summary)


def _spec(args, optimal_arm=None):
    return HardMdpSpec(args.actions, args.epsilon, args.gamma,
                       args.optimal_arm if optimal_arm is None else optimal_arm)


def cmd_hard_mdp(args):
    _write_mdp(build_hard_mdp(_spec(args)), args.out)


def cmd_chain(args):
    arms = None if args.optimal_arms is None else [int(a) for a in args.optimal_arms.split(",")]
    _write_mdp(chain_hard_mdps(_spec(args, 0), args.copies, arms, args.seed), args.out)


def cmd_split(args):
    mdp, state_map = split_to_two_support(load_mdp(args.mdp))
    _write_mdp(mdp, args.out)
    if args.map_out:
        _dump({str(k): v for k, v in state_map.items()}, args.map_out)


def cmd_learn_bandit(args):
    spec = _spec(args)
    bandit = hard_bandit_instance(spec.num_actions, spec.eps_star, spec.optimal_arm)
    mdp = build_hard_mdp(spec)
    constants = derive_constants(mdp.num_states, mdp.num_actions, args.pac_epsilon, args.delta, args.gamma)
    agent = UcrlAgent(mdp, constants, 0, args.m_override)
    rng = np.random.default_rng(args.seed)
    N = args.N
    if N is None:
        N = bandit_phase_threshold(spec.num_actions, spec.epsilon, spec.discount, args.delta, args.c1, args.c2)
    result = simulate_learn_bandit(agent, bandit, spec, int(N), rng)
    _dump({"best_arm": result.best_arm, "true_arm": spec.optimal_arm, "N": int(N),
           "votes": np.bincount(result.votes, minlength=spec.num_actions).tolist()}, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pacmdp", description="UCRL and lower-bound experiments on tabular MDPs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("constants", help="print every algorithm constant")
    p.add_argument("--states", type=int, required=True)
    p.add_argument("--actions", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_constants)

    p = sub.add_parser("solve", help="optimal value and policy of an MDP file")
    p.add_argument("mdp")
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("run-ucrl", help="run UCRL from a JSON experiment config")
    p.add_argument("config")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--m-override", type=float)
    p.add_argument("--estimator", choices=ESTIMATORS)
    p.add_argument("--out", help="trace CSV path")
    p.add_argument("--report", help="report JSON path (needs --out or trace_path)")
    p.set_defaults(func=cmd_run_ucrl)

    for name, func, helptext in (("hard-mdp", cmd_hard_mdp, "write the 4-state hard MDP"),
                                 ("chain", cmd_chain, "write a ring of hard MDP copies"),
                                 ("learn-bandit", cmd_learn_bandit, "bandit reduction with a UCRL agent")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--actions", type=int, default=2)
        p.add_argument("--epsilon", type=float, required=True, help="hard-MDP epsilon")
        p.add_argument("--gamma", type=float, required=True)
        p.add_argument("--out")
        p.set_defaults(func=func)
        if name == "chain":
            p.add_argument("--copies", type=int, required=True)
            p.add_argument("--optimal-arms", help="comma separated, one per copy")
            p.add_argument("--seed", type=int)
        else:
            p.add_argument("--optimal-arm", type=int, default=0)
        if name == "learn-bandit":
            p.add_argument("--N", type=int, help="phases per arm; default from c1, c2")
            p.add_argument("--c1", type=float, default=0.01)
            p.add_argument("--c2", type=float, default=1.0)
            p.add_argument("--delta", type=float, default=0.2)
            p.add_argument("--pac-epsilon", type=float, default=0.2, help="epsilon for the agent's constants")
            p.add_argument("--m-override", type=float, default=25.0)
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("split", help="convert an MDP file to two-support form")
    p.add_argument("mdp")
    p.add_argument("--out")
    p.add_argument("--map-out", help="where to write the original -> new state map")
    p.set_defaults(func=cmd_split)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"pacmdp {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
