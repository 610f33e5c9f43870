"""Experiment runner: UCRL runs, mistake counting, diagnostics and trace output."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .lowerbound import HardMdpSpec, build_hard_mdp, chain_hard_mdps
from .mdp import (
    OccupancyWeights,
    StationaryPolicy,
    TabularMdp,
    as_policy,
    evaluate_policy,
    load_mdp,
    solve_optimal,
    split_to_two_support,
)
from .ucrl import (
    TraceRow,
    UcrlAgent,
    UcrlConstants,
    VisitCounts,
    derive_constants,
    knownness,
    ucrl_step,
)

log = logging.getLogger(__name__)

ESTIMATORS = ("stationary_proxy", "monte_carlo_fork")

TRACE_FIELDS = [
    "t", "episode", "state", "action", "delay", "v_star", "v_pi_k", "v_optimistic",
    "v_estimate", "v_estimate_se", "mistake", "exploration_start",
]


@dataclass
class ExperimentConfig:
    """One UCRL run.

    ``mdp_source`` is either a path to an MDP file or a mapping with
    ``kind`` = ``"file"`` (key ``path``), ``"hard"`` or ``"chain"`` (keys
    ``num_actions``, ``epsilon``, ``optimal_arm``, and ``copies`` /
    ``arms_seed`` for chains). For generated MDPs ``discount`` is required;
    for files it must be omitted or agree with the file.
    """

    mdp_source: Any
    epsilon: float
    delta: float
    discount: Optional[float] = None
    steps: int = 1000
    seed: int = 0
    m_override: Optional[float] = None
    mistake_estimator: str = "stationary_proxy"
    rollout_count: int = 32
    rollout_depth: Optional[int] = None
    start_state: int = 0
    evi_tolerance: float = 1e-6
    trace_path: Optional[str] = None
    report_path: Optional[str] = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.mistake_estimator not in ESTIMATORS:
            raise ValueError(f"mistake_estimator must be one of {ESTIMATORS}")
        if self.rollout_count < 1:
            raise ValueError("rollout_count must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MistakeReport:
    total_steps: int
    mistake_count: int
    update_count: int
    delay_steps: int
    pending_delay_steps: int
    exploration_phase_count: int
    bound: float
    bound_respected: bool
    seed: int
    m_effective: float
    estimator: str
    max_estimate_se: float
    constants: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    episodes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_environment(config: ExperimentConfig) -> TabularMdp:
    src = config.mdp_source
    if isinstance(src, (str, Path)):
        src = {"kind": "file", "path": str(src)}
    kind = src.get("kind")
    if kind == "file":
        mdp = load_mdp(src["path"])
        if config.discount is not None and config.discount != mdp.discount:
            raise ValueError(f"config discount {config.discount} disagrees with file discount {mdp.discount}")
        return mdp
    if kind not in ("hard", "chain"):
        raise ValueError(f"unknown mdp_source kind {kind!r}")
    if config.discount is None:
        raise ValueError("discount is required for generated MDPs")
    spec = HardMdpSpec(int(src.get("num_actions", 2)), float(src["epsilon"]), config.discount,
                       int(src.get("optimal_arm", 0)))
    if kind == "hard":
        return build_hard_mdp(spec)
    return chain_hard_mdps(spec, int(src["copies"]), src.get("optimal_arms"), src.get("arms_seed"))


def _monte_carlo_value(agent: UcrlAgent, env: TabularMdp, rng: np.random.Generator,
                       count: int, depth: int) -> tuple[float, float]:
    """Mean and standard error of truncated discounted returns of forked agents."""
    gamma = env.discount
    returns = np.empty(count)
    for i in range(count):
        clone = agent.fork()
        total, scale = 0.0, 1.0
        for _ in range(depth):
            total += scale * env.rewards[clone.current_state]
            scale *= gamma
            ucrl_step(clone, env, rng)
        returns[i] = total
    se = float(returns.std(ddof=1) / math.sqrt(count)) if count > 1 else math.inf
    return float(returns.mean()), se


def run_experiment(config: ExperimentConfig) -> tuple[list[TraceRow], MistakeReport]:
    env = build_environment(config)
    start = config.start_state
    if not env.is_two_support:
        if env.satisfies_two_support():
            env = env.to_two_support()
        else:
            log.warning("environment has rows with more than two successors; splitting it")
            env, state_map = split_to_two_support(env)
            start = state_map[start]
    constants = derive_constants(env.num_states, env.num_actions, config.epsilon, config.delta, env.discount)
    agent = UcrlAgent(env, constants, start, config.m_override, config.evi_tolerance)
    return run_agent(agent, env, config, constants)


def run_agent(agent: UcrlAgent, env: TabularMdp, config: ExperimentConfig,
              constants: UcrlConstants) -> tuple[list[TraceRow], MistakeReport]:
    """Drive an already constructed agent for ``config.steps`` steps.

    ``config.mdp_source`` is only recorded; ``env`` is used as given.
    """
    rng = np.random.default_rng(config.seed)
    rollout_rng = np.random.default_rng([config.seed, 1])
    depth = config.rollout_depth if config.rollout_depth is not None else constants.H
    if config.mistake_estimator == "monte_carlo_fork" and depth < constants.H:
        raise ValueError(f"rollout_depth must be >= H = {constants.H}")
    v_star = solve_optimal(env, 1e-10)[0].values
    episode_values: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    rows = []
    max_se = 0.0
    for _ in range(config.steps):
        k, s = agent.episode, agent.current_state
        if k not in episode_values:
            episode_values = {k: (evaluate_policy(env, agent.policy).values, agent.optimistic_value.values)}
        v_pi, v_opt = episode_values[k]
        if config.mistake_estimator == "monte_carlo_fork":
            estimate, se = _monte_carlo_value(agent, env, rollout_rng, config.rollout_count, depth)
            max_se = max(max_se, se)
        else:
            estimate, se = float(v_pi[s]), 0.0
        row = ucrl_step(agent, env, rng)
        row.v_star = float(v_star[s])
        row.v_pi_k = float(v_pi[s])
        row.v_optimistic = float(v_opt[s])
        row.v_estimate = estimate
        row.v_estimate_se = se
        row.mistake = row.v_star - estimate > config.epsilon
        rows.append(row)

    starts = set(detect_exploration_phases(rows, config.epsilon, constants.H))
    for row in rows:
        row.exploration_start = row.t in starts

    bound = constants.H * (constants.U_max + constants.E_max)
    mistakes = sum(r.mistake for r in rows)
    pending = agent.constants.H - agent.delay_remaining if agent.phase == "delaying" else 0
    report = MistakeReport(
        total_steps=len(rows),
        mistake_count=mistakes,
        update_count=agent.num_updates,
        delay_steps=sum(r.delay for r in rows) - pending,
        pending_delay_steps=pending,
        exploration_phase_count=len(starts),
        bound=bound,
        bound_respected=mistakes <= bound,
        seed=config.seed,
        m_effective=agent.m,
        estimator=config.mistake_estimator,
        max_estimate_se=max_se,
        constants=constants.as_dict(),
        config=config.to_dict(),
        episodes=[dataclasses.asdict(e) for e in agent.episodes],
    )
    return rows, report


def detect_exploration_phases(rows: Sequence[TraceRow], epsilon: float, H: int) -> list[int]:
    """Starts t_i: not delaying, Ṽ^{π_k}(s_t) - V^{π_k}(s_t) >= ε/2, and t_i >= t_{i-1} + H."""
    starts: list[int] = []
    for row in rows:
        if row.delay or row.v_optimistic - row.v_pi_k < epsilon / 2.0:
            continue
        if not starts or row.t >= starts[-1] + H:
            starts.append(row.t)
    return starts


def iota_level(weight: float, constants: UcrlConstants) -> int:
    """The ι with w_ι <= weight < 2 w_ι, capped to the index set."""
    level = 0
    for iota in constants.iota_set:
        if constants.w_iota(iota) <= weight:
            level = iota
    return level


def partition_known_states(weights: OccupancyWeights, counts: VisitCounts, policy, constants: UcrlConstants,
                           m_override: Optional[float] = None) -> tuple[list[int], dict[tuple[int, int], list[int]]]:
    """Active set {s : w(s) > w_min} split into cells K(κ, ι)."""
    policy = as_policy(policy)
    active = [s for s, w in enumerate(weights.weights) if w > constants.w_min]
    cells: dict[tuple[int, int], list[int]] = {}
    for s in active:
        iota = iota_level(float(weights.weights[s]), constants)
        n = int(counts.n[s, policy[s]])
        kappa = knownness(iota, n, constants, m_override)
        cells.setdefault((kappa, iota), []).append(s)
    return active, cells


def expected_visits(env: TabularMdp, policy: StationaryPolicy, start_state: int, horizon: int,
                    samples: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo mean and standard error of visits to each state in ``horizon`` steps.

    Outside a delay phase the policy stays fixed for at least H steps, so
    these continuations only need the stationary policy.
    """
    actions = as_policy(policy, env).as_array()
    cdf = np.cumsum(env.P[np.arange(env.num_states), actions], axis=1)
    states = np.full(samples, start_state, dtype=np.intp)
    visits = np.zeros((samples, env.num_states))
    rows = np.arange(samples)
    for _ in range(horizon):
        visits[rows, states] += 1
        u = rng.random(samples)
        states = np.minimum((cdf[states] <= u[:, None]).sum(axis=1), env.num_states - 1)
    return visits.mean(axis=0), visits.std(axis=0, ddof=1) / math.sqrt(samples)


# -- output ----------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def emit_trace(rows: Sequence[TraceRow], report: Optional[MistakeReport], trace_path, report_path=None) -> None:
    """CSV trace (one row per step) and JSON report."""
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, name)) for name in TRACE_FIELDS])
    if report is not None and report_path is not None:
        Path(report_path).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- sweeps ----------------------------------------------------------------------

def _mistakes_for(config: ExperimentConfig) -> int:
    return run_experiment(config)[1].mistake_count


def mistake_sweep(base: ExperimentConfig, m_values: Sequence[float], seeds: Sequence[int],
                  workers: int = 1) -> dict[float, list[int]]:
    """Mistake counts per m_override over the given seeds."""
    configs = [dataclasses.replace(base, m_override=m, seed=seed, trace_path=None, report_path=None)
               for m in m_values for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            counts = list(pool.map(_mistakes_for, configs))
    else:
        counts = [_mistakes_for(c) for c in configs]
    out: dict[float, list[int]] = {}
    for c, n in zip(configs, counts):
        out.setdefault(c.m_override, []).append(n)
    return out
