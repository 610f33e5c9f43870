"""The four-state hard MDP, action weights, phases and the bandit reduction.

States are numbered ``ZERO, ONE, PLUS, MINUS = 0, 1, 2, 3``. State 0 is a
delaying state, state 1 hides a bandit (only there do actions matter), and
⊕ / ⊖ are nearly absorbing with reward 1 / 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Protocol, Sequence

import numpy as np

from .mdp import TabularMdp, TwoSupportTransition, sample_step

ZERO, ONE, PLUS, MINUS = 0, 1, 2, 3


@dataclass(frozen=True)
class HardMdpSpec:
    num_actions: int
    epsilon: float
    discount: float
    optimal_arm: int = 0

    def __post_init__(self):
        if self.num_actions < 2:
            raise ValueError("need at least two actions")
        if not 0 <= self.optimal_arm < self.num_actions:
            raise ValueError("optimal_arm out of range")
        if not 0.75 < self.discount < 1.0:
            raise ValueError("discount must lie in (3/4, 1)")
        if self.epsilon < 0.0 or self.eps_star > 0.5:
            raise ValueError(f"epsilon must lie in [0, 1/(32(1-γ))] = [0, {1 / (32 * (1 - self.discount))}]")

    @property
    def p(self) -> float:
        return 1.0 / (2.0 - self.discount)

    @property
    def q(self) -> float:
        return 2.0 - 1.0 / self.discount

    @property
    def eps_star(self) -> float:
        return 16.0 * self.epsilon * (1.0 - self.discount)

    def gap(self, action: int) -> float:
        return self.eps_star if action == self.optimal_arm else 0.0


def _hard_rows(spec: HardMdpSpec, offset: int, exit_to: int, optimal_arm: int):
    p, q, A = spec.p, spec.q, spec.num_actions
    z, one, plus, minus = offset + ZERO, offset + ONE, offset + PLUS, offset + MINUS
    gaps = [spec.eps_star if a == optimal_arm else 0.0 for a in range(A)]
    return [
        [TwoSupportTransition(z, one, p)] * A,
        [TwoSupportTransition(plus, minus, 0.5 + g) for g in gaps],
        [TwoSupportTransition(plus, exit_to, q)] * A,
        [TwoSupportTransition(minus, exit_to, q)] * A,
    ]


def build_hard_mdp(spec: HardMdpSpec) -> TabularMdp:
    return TabularMdp([0.0, 0.0, 1.0, 0.0], spec.discount, _hard_rows(spec, 0, ZERO, spec.optimal_arm))


def chain_hard_mdps(spec: HardMdpSpec, copies: int, optimal_arms: Optional[Sequence[int]] = None,
                    seed: Optional[int] = None) -> TabularMdp:
    """``copies`` hard MDPs in a ring: leaving ⊕/⊖ of copy i enters state 0 of copy i+1.

    Copy i occupies states ``4i .. 4i+3``. Optimal arms are taken from
    ``optimal_arms``, else drawn with ``seed``, else all ``spec.optimal_arm``.
    """
    if copies < 1:
        raise ValueError("copies must be >= 1")
    if optimal_arms is None:
        if seed is None:
            optimal_arms = [spec.optimal_arm] * copies
        else:
            optimal_arms = np.random.default_rng(seed).integers(spec.num_actions, size=copies).tolist()
    if len(optimal_arms) != copies:
        raise ValueError("need one optimal arm per copy")
    rows, rewards = [], []
    for i in range(copies):
        rows += _hard_rows(spec, 4 * i, 4 * ((i + 1) % copies), int(optimal_arms[i]))
        rewards += [0.0, 0.0, 1.0, 0.0]
    return TabularMdp(rewards, spec.discount, rows)


# -- geometric facts about the delaying state ------------------------------------

def phase_exit_mass(discount: float) -> float:
    """Σ_t p^t (1-p) γ^t by direct summation (equals 1/2)."""
    p = 1.0 / (2.0 - discount)
    ratio = p * discount
    terms = []
    term = 1.0 - p
    while term > 1e-20:
        terms.append(term)
        term *= ratio
    return math.fsum(terms)


def long_phase_probability(discount: float) -> float:
    """p^(1/(4(1-γ))), the chance of lingering in state 0 for a quarter horizon."""
    return (1.0 / (2.0 - discount)) ** (1.0 / (4.0 * (1.0 - discount)))


def suboptimality_gap_check(spec: HardMdpSpec, suboptimal_action: int) -> float:
    """V*(1) - V^π(1) for π playing ``suboptimal_action`` at state 1.

    Both values are evaluated in exact rational arithmetic on the binary
    values of the float inputs, so the result can be compared with 8ε
    without rounding slack.
    """
    if suboptimal_action == spec.optimal_arm or not 0 <= suboptimal_action < spec.num_actions:
        raise ValueError("suboptimal_action must be a valid action other than the optimal arm")
    gamma = Fraction(spec.discount)
    eps = Fraction(spec.epsilon)
    p = 1 / (2 - gamma)
    q = 2 - 1 / gamma
    eps_star = 16 * eps * (1 - gamma)

    def state_one_value(plus_prob):
        P = [
            [p, 1 - p, 0, 0],
            [0, 0, plus_prob, 1 - plus_prob],
            [1 - q, 0, q, 0],
            [1 - q, 0, 0, q],
        ]
        r = [0, 0, 1, 0]
        return _solve_exact([[(1 if i == j else 0) - gamma * P[i][j] for j in range(4)] for i in range(4)], r)[ONE]

    half = Fraction(1, 2)
    return float(state_one_value(half + eps_star) - state_one_value(half))


def _solve_exact(A, b):
    n = len(b)
    M = [[Fraction(x) for x in row] + [Fraction(b[i])] for i, row in enumerate(A)]
    for col in range(n):
        pivot = next(r for r in range(col, n) if M[r][col] != 0)
        M[col], M[pivot] = M[pivot], M[col]
        for r in range(n):
            if r != col and M[r][col] != 0:
                f = M[r][col] / M[col][col]
                M[r] = [x - f * y for x, y in zip(M[r], M[col])]
    return [M[i][n] / M[i][i] for i in range(n)]


def bandit_phase_threshold(num_actions: int, epsilon: float, discount: float, delta: float,
                           c1: float = 0.01, c2: float = 1.0) -> float:
    """c1 |A| / (ε²(1-γ)²) log(c2/δ). The defaults for c1, c2 are placeholders."""
    return c1 * num_actions / (epsilon**2 * (1.0 - discount) ** 2) * math.log(c2 / delta)


# -- bandits ---------------------------------------------------------------------

@dataclass(frozen=True)
class Bandit:
    arm_probs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "arm_probs", tuple(float(x) for x in self.arm_probs))
        if any(not 0.0 <= x <= 1.0 for x in self.arm_probs):
            raise ValueError("arm probabilities must lie in [0, 1]")

    @property
    def best_arm(self) -> int:
        return int(np.argmax(self.arm_probs))

    def pull(self, arm: int, rng: np.random.Generator) -> int:
        return int(rng.random() < self.arm_probs[arm])


def hard_bandit_instance(num_actions: int, epsilon: float, optimal_arm: int) -> Bandit:
    if not 0.0 <= epsilon <= 0.5:
        raise ValueError("epsilon must lie in [0, 1/2]")
    return Bandit(tuple(0.5 + epsilon if a == optimal_arm else 0.5 for a in range(num_actions)))


# -- history policies ---------------------------------------------------------------

class HistoryPolicy(Protocol):
    """A deterministic map from state histories to actions, queried incrementally.

    The policy holds its history; ``observe`` appends a state and ``action``
    returns the action for the current history. ``fork`` returns an
    independent copy for counterfactual queries.
    """

    def action(self) -> int: ...

    def observe(self, state: int) -> object: ...

    def fork(self) -> "HistoryPolicy": ...


class FunctionPolicy:
    """History policy given by a function of the full state tuple."""

    def __init__(self, fn, history: Sequence[int] = (ZERO,)):
        self.fn = fn
        self.history = list(history)

    def action(self) -> int:
        return int(self.fn(tuple(self.history)))

    def observe(self, state: int) -> None:
        self.history.append(int(state))

    def fork(self) -> "FunctionPolicy":
        return FunctionPolicy(self.fn, self.history)

    @property
    def current_state(self) -> int:
        return self.history[-1]


def weight_horizon(spec: HardMdpSpec, tail_tol: float) -> int:
    """Number of series terms needed for a tail below ``tail_tol``."""
    p, gamma = spec.p, spec.discount
    ratio = p * gamma
    return max(1, math.ceil(math.log(tail_tol * (1.0 - ratio) / (1.0 - p)) / math.log(ratio)))


def action_weights(policy: HistoryPolicy, history: Optional[Sequence[int]], spec: HardMdpSpec,
                   tail_tol: float = 1e-9) -> np.ndarray:
    """w(a) = Σ_k p^k (1-p) γ^k 1{π(h 0^k 1) = a}, truncated with tail <= ``tail_tol``.

    ``policy`` must already have observed ``history`` (which ends in state 0);
    pass ``history=None`` to skip that check. The policy is not modified.
    """
    if tail_tol <= 0:
        raise ValueError("tail_tol must be positive")
    if history is not None and (len(history) == 0 or history[-1] != ZERO):
        raise ValueError("history must end in state 0")
    if getattr(policy, "current_state", ZERO) != ZERO:
        raise ValueError("policy is not currently in state 0")
    p, gamma = spec.p, spec.discount
    weights = np.zeros(spec.num_actions)
    probe = policy.fork()
    coef = 1.0 - p
    for _ in range(weight_horizon(spec, tail_tol)):
        query = probe.fork()
        query.observe(ONE)
        weights[query.action()] += coef
        coef *= p * gamma
        probe.observe(ZERO)
    return weights


def suboptimal_weight(weights, optimal_arm: int) -> float:
    return float(np.sum(weights) - weights[optimal_arm])


# -- phases ------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseRecord:
    index: int
    start: int
    end: int
    length: int
    long_phase: bool        # X_i
    weighted_phase: bool    # A_i
    suboptimal_weight: float


def phase_statistics(state_trace: Sequence[int], suboptimal_weights: Optional[Sequence[float]],
                     spec: HardMdpSpec) -> list[PhaseRecord]:
    """Split a hard-MDP trace into maximal runs in state 0 that end in a move to 1.

    Times are 1-based; phase i spans ``start..end``. A trailing run with no
    move to state 1 is not a phase.
    """
    gamma = spec.discount
    long_len = 1.0 / (4.0 * (1.0 - gamma))
    weighted_len = 1.0 / (16.0 * (1.0 - gamma))
    trace = list(state_trace)
    records = []
    i = 0
    n = len(trace)
    while i < n and trace[i] != ZERO:
        i += 1
    while i < n:
        j = i + 1
        while j < n and trace[j] != ONE:
            j += 1
        if j >= n:
            break
        length = j - i
        idx = len(records)
        weight = math.nan
        if suboptimal_weights is not None and idx < len(suboptimal_weights):
            weight = float(suboptimal_weights[idx])
        records.append(PhaseRecord(
            index=idx + 1, start=i + 1, end=j, length=length,
            long_phase=length >= long_len,
            weighted_phase=length >= weighted_len and weight >= 0.25,
            suboptimal_weight=weight,
        ))
        i = j + 1
        while i < n and not (trace[i] == ZERO and trace[i - 1] != ZERO):
            i += 1
    return records


# -- bandit reduction ----------------------------------------------------------------

@dataclass
class LearnBanditResult:
    best_arm: int
    votes: list[int] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)
    states: list[int] = field(default_factory=list)


def simulate_learn_bandit(policy: HistoryPolicy, bandit: Bandit, spec: HardMdpSpec, N: int,
                          rng: np.random.Generator, tail_tol: float = 1e-9) -> LearnBanditResult:
    """Run ``policy`` on the hard MDP with state-1 outcomes drawn from ``bandit``.

    At every phase start the action weights are recorded and the arm with the
    largest weight gets a vote; after 2N visits to state 1 the majority arm
    is returned. Ties go to the lowest arm index.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if len(bandit.arm_probs) != spec.num_actions:
        raise ValueError("bandit and spec disagree on the number of arms")
    mdp = build_hard_mdp(spec)
    result = LearnBanditResult(best_arm=-1)
    state, prev = ZERO, None
    result.states.append(state)
    pulls = 0
    while True:
        if state == ZERO and prev != ZERO:
            w = action_weights(policy, None, spec, tail_tol)
            result.weights.append(w)
            result.votes.append(int(np.argmax(w)))
        a = policy.action()
        if state == ONE:
            nxt = PLUS if bandit.pull(a, rng) else MINUS
            pulls += 1
            if pulls == 2 * N:
                break
        else:
            nxt = sample_step(mdp, state, a, rng)
        policy.observe(nxt)
        prev, state = state, nxt
        result.states.append(state)
    tally = np.bincount(result.votes, minlength=spec.num_actions)
    result.best_arm = int(np.argmax(tally))
    return result


def learn_bandit(policy: HistoryPolicy, bandit: Bandit, spec: HardMdpSpec, N: int,
                 rng: np.random.Generator, tail_tol: float = 1e-9) -> int:
    return simulate_learn_bandit(policy, bandit, spec, N, rng, tail_tol).best_arm
