"""Finite discounted MDPs with state rewards, solved exactly.

Transitions are stored per (state, action) either as a dense distribution
or as a :class:`TwoSupportTransition`; a dense ``(S, A, S)`` array is always
materialised for the linear algebra.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

PROB_TOL = 1e-12


@dataclass(frozen=True)
class TwoSupportTransition:
    """All mass on ``plus_state`` (w.p. ``plus_prob``) and ``minus_state``."""

    plus_state: int
    minus_state: int
    plus_prob: float

    def __post_init__(self):
        if not 0.0 <= self.plus_prob <= 1.0:
            raise ValueError(f"plus_prob {self.plus_prob} outside [0, 1]")


@dataclass(frozen=True)
class StationaryPolicy:
    action_of: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "action_of", tuple(int(a) for a in self.action_of))

    def __getitem__(self, state: int) -> int:
        return self.action_of[state]

    def __len__(self) -> int:
        return len(self.action_of)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.action_of, dtype=np.intp)


@dataclass(frozen=True)
class ValueVector:
    """Values of a policy. ``moment_order`` d bounds entries by (1/(1-γ))^(d+1)."""

    values: np.ndarray
    moment_order: int = 0

    def __getitem__(self, state):
        return self.values[state]

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class OccupancyWeights:
    """Expected discounted visits to (s, π(s)) starting from ``start_state``."""

    start_state: int
    weights: np.ndarray

    def __getitem__(self, state):
        return self.weights[state]


@dataclass(frozen=True)
class MomentStack:
    values_by_order: dict[int, ValueVector] = field(default_factory=dict)
    variances_by_order: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def orders(self) -> tuple[int, ...]:
        return tuple(sorted(self.values_by_order))


class TabularMdp:
    """A finite MDP ``(S, A, p, r, γ)`` with rewards on states.

    ``transitions[s][a]`` is either a probability vector over states or a
    :class:`TwoSupportTransition`.
    """

    def __init__(self, rewards, discount: float, transitions: Sequence[Sequence]):
        rewards = np.asarray(rewards, dtype=float)
        if rewards.ndim != 1 or rewards.size == 0:
            raise ValueError("rewards must be a non-empty 1-d array")
        if np.any(rewards < 0.0) or np.any(rewards > 1.0):
            raise ValueError("rewards must lie in [0, 1]")
        discount = float(discount)
        if not 0.0 < discount < 1.0:
            raise ValueError(f"discount must be in (0, 1), got {discount}")
        num_states = rewards.size
        if len(transitions) != num_states:
            raise ValueError("transitions must have one entry per state")
        num_actions = len(transitions[0])
        if num_actions == 0:
            raise ValueError("need at least one action")

        dense = np.zeros((num_states, num_actions, num_states))
        rows = []
        for s, per_action in enumerate(transitions):
            if len(per_action) != num_actions:
                raise ValueError(f"state {s} has {len(per_action)} actions, expected {num_actions}")
            row = []
            for a, tr in enumerate(per_action):
                if isinstance(tr, TwoSupportTransition):
                    for idx in (tr.plus_state, tr.minus_state):
                        if not 0 <= idx < num_states:
                            raise ValueError(f"successor {idx} of ({s}, {a}) out of range")
                    dense[s, a, tr.plus_state] += tr.plus_prob
                    dense[s, a, tr.minus_state] += 1.0 - tr.plus_prob
                    row.append(tr)
                else:
                    vec = np.asarray(tr, dtype=float)
                    if vec.shape != (num_states,):
                        raise ValueError(f"transition ({s}, {a}) has shape {vec.shape}")
                    if np.any(vec < 0.0) or abs(vec.sum() - 1.0) > PROB_TOL:
                        raise ValueError(f"transition ({s}, {a}) is not a distribution")
                    dense[s, a] = vec
                    row.append(vec.copy())
            rows.append(tuple(row))

        self.rewards = rewards
        self.rewards.setflags(write=False)
        self.discount = discount
        self.num_states = num_states
        self.num_actions = num_actions
        self.transitions = tuple(rows)
        self.P = dense
        self.P.setflags(write=False)
        self._cdf = None
        self._two_support = all(isinstance(tr, TwoSupportTransition) for row in rows for tr in row)
        self._pairs = None

    # -- constructors -------------------------------------------------

    @classmethod
    def from_dense(cls, P, rewards, discount: float) -> "TabularMdp":
        P = np.asarray(P, dtype=float)
        return cls(rewards, discount, [[P[s, a] for a in range(P.shape[1])] for s in range(P.shape[0])])

    @classmethod
    def from_two_support(cls, plus_states, minus_states, plus_probs, rewards, discount) -> "TabularMdp":
        plus_states = np.asarray(plus_states)
        minus_states = np.asarray(minus_states)
        plus_probs = np.asarray(plus_probs, dtype=float)
        S, A = plus_states.shape
        transitions = [
            [TwoSupportTransition(int(plus_states[s, a]), int(minus_states[s, a]), float(plus_probs[s, a]))
             for a in range(A)]
            for s in range(S)
        ]
        return cls(rewards, discount, transitions)

    # -- two-support view ---------------------------------------------

    @property
    def is_two_support(self) -> bool:
        return self._two_support

    def satisfies_two_support(self) -> bool:
        """True if every (s, a) reaches at most two states."""
        return bool(np.all((self.P > 0.0).sum(axis=2) <= 2))

    def to_two_support(self) -> "TabularMdp":
        """Re-express rows with at most two successors as two-support transitions."""
        if self.is_two_support:
            return self
        if not self.satisfies_two_support():
            raise ValueError("some (state, action) has more than two successors")
        transitions = []
        for s, row in enumerate(self.transitions):
            new_row = []
            for a, tr in enumerate(row):
                if isinstance(tr, TwoSupportTransition):
                    new_row.append(tr)
                    continue
                support = np.flatnonzero(tr > 0.0)
                if support.size == 2:
                    new_row.append(TwoSupportTransition(int(support[0]), int(support[1]), float(tr[support[0]])))
                else:
                    only = int(support[0])
                    new_row.append(TwoSupportTransition(only, only, 1.0))
            transitions.append(new_row)
        return TabularMdp(self.rewards, self.discount, transitions)

    def _pair_arrays(self):
        if not self._two_support:
            raise ValueError("MDP is not in two-support form; see split_to_two_support")
        if self._pairs is None:
            plus = np.array([[tr.plus_state for tr in row] for row in self.transitions], dtype=np.intp)
            minus = np.array([[tr.minus_state for tr in row] for row in self.transitions], dtype=np.intp)
            probs = np.array([[tr.plus_prob for tr in row] for row in self.transitions], dtype=float)
            for arr in (plus, minus, probs):
                arr.setflags(write=False)
            self._pairs = (plus, minus, probs)
        return self._pairs

    @property
    def plus_states(self) -> np.ndarray:
        return self._pair_arrays()[0]

    @property
    def minus_states(self) -> np.ndarray:
        return self._pair_arrays()[1]

    @property
    def plus_probs(self) -> np.ndarray:
        return self._pair_arrays()[2]

    def with_plus_probs(self, plus_probs) -> "TabularMdp":
        """Same skeleton (rewards, γ, successor pairs) with new plus-probabilities."""
        return TabularMdp.from_two_support(
            self.plus_states, self.minus_states, np.clip(plus_probs, 0.0, 1.0), self.rewards, self.discount
        )

    def policy_matrix(self, policy) -> np.ndarray:
        actions = as_policy(policy, self).as_array()
        return self.P[np.arange(self.num_states), actions]

    def __repr__(self) -> str:
        return f"TabularMdp(S={self.num_states}, A={self.num_actions}, γ={self.discount})"


def as_policy(policy, mdp: TabularMdp | None = None) -> StationaryPolicy:
    if not isinstance(policy, StationaryPolicy):
        policy = StationaryPolicy(tuple(np.asarray(policy).ravel()))
    if mdp is not None:
        if len(policy) != mdp.num_states:
            raise ValueError(f"policy covers {len(policy)} states, MDP has {mdp.num_states}")
        arr = policy.as_array()
        if np.any(arr < 0) or np.any(arr >= mdp.num_actions):
            raise ValueError("policy selects an action out of range")
    return policy


# -- exact solution ------------------------------------------------------

def evaluate_policy(mdp: TabularMdp, policy, reward_override=None, moment_order: int = 0) -> ValueVector:
    """Solve ``(I - γ P_π) V = r`` directly."""
    P_pi = mdp.policy_matrix(policy)
    if reward_override is None:
        rewards = mdp.rewards
    else:
        rewards = np.asarray(reward_override, dtype=float)
        if rewards.shape != (mdp.num_states,):
            raise ValueError(f"reward_override has shape {rewards.shape}, expected ({mdp.num_states},)")
        upper = (1.0 / (1.0 - mdp.discount)) ** moment_order
        if np.any(rewards < -1e-12) or np.any(rewards > upper * (1 + 1e-9)):
            raise ValueError(f"reward_override outside [0, {upper}]")
    A = np.eye(mdp.num_states) - mdp.discount * P_pi
    return ValueVector(np.linalg.solve(A, rewards), moment_order)


def greedy_policy(mdp: TabularMdp, values) -> StationaryPolicy:
    """Greedy policy, ties (up to rounding) broken toward the lowest action."""
    Q = mdp.P @ np.asarray(values, dtype=float)
    best = Q.max(axis=1, keepdims=True)
    return StationaryPolicy(tuple(np.argmax(Q >= best - 1e-12 * np.maximum(1.0, np.abs(best)), axis=1)))


def solve_optimal(mdp: TabularMdp, tolerance: float = 1e-8) -> tuple[ValueVector, StationaryPolicy]:
    """Value iteration, then exact evaluation of the greedy policy.

    The returned value V satisfies V <= V* and V* - V <= tolerance.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    gamma = mdp.discount
    stop = tolerance * (1.0 - gamma) / (2.0 * gamma)
    V = np.zeros(mdp.num_states)
    while True:
        V_next = mdp.rewards + gamma * (mdp.P @ V).max(axis=1)
        done = np.max(np.abs(V_next - V)) <= stop
        V = V_next
        if done:
            break
    policy = greedy_policy(mdp, V)
    return evaluate_policy(mdp, policy), policy


def occupancy_weights(mdp: TabularMdp, policy, start_state: int) -> OccupancyWeights:
    """Row ``start_state`` of ``(I - γ P_π)^{-1}``."""
    P_pi = mdp.policy_matrix(policy)
    e = np.zeros(mdp.num_states)
    e[start_state] = 1.0
    # w^T (I - γ P_π) = e^T
    w = np.linalg.solve((np.eye(mdp.num_states) - mdp.discount * P_pi).T, e)
    return OccupancyWeights(int(start_state), w)


def local_variance(mdp: TabularMdp, policy, value) -> np.ndarray:
    """Variance of V(s') for s' ~ p_{s,π(s)}, clamped at zero."""
    V = np.asarray(getattr(value, "values", value), dtype=float)
    if V.shape != (mdp.num_states,):
        raise ValueError("value has the wrong dimension")
    P_pi = mdp.policy_matrix(policy)
    return np.maximum(P_pi @ (V * V) - (P_pi @ V) ** 2, 0.0)


def moment_orders(beta: int) -> tuple[int, ...]:
    """Orders 0, 2, 6, 14, ... up to the first one >= beta."""
    orders = [0]
    while orders[-1] < beta:
        orders.append(2 * orders[-1] + 2)
    return tuple(orders)


def moment_values(mdp: TabularMdp, policy, orders) -> MomentStack:
    """Higher moments: V_d from reward r_d, σ_d² its local variance, r_{2d+2} = σ_d²."""
    orders = sorted(set(int(d) for d in orders))
    if not orders or orders[0] != 0:
        raise ValueError("moment orders must start at 0")
    for d in orders[1:]:
        if d % 2 or (d - 2) // 2 not in orders:
            raise ValueError(f"order {d} has no predecessor (d-2)/2 in the set")
    rewards = {0: mdp.rewards}
    stack = MomentStack()
    bound = 1.0 / (1.0 - mdp.discount)
    for d in orders:
        r_d = np.minimum(rewards[d], bound**d)
        V_d = evaluate_policy(mdp, policy, r_d, moment_order=d)
        V_d = ValueVector(np.clip(V_d.values, 0.0, bound ** (d + 1)), d)
        var_d = np.minimum(local_variance(mdp, policy, V_d), bound ** (2 * d + 2))
        stack.values_by_order[d] = V_d
        stack.variances_by_order[d] = var_d
        rewards[2 * d + 2] = var_d
    return stack


def value_difference_decomposition(mdp_a: TabularMdp, mdp_b: TabularMdp, policy, start_state: int) -> tuple[float, float]:
    """Both sides of V_a(s) - V_b(s) = γ Σ_s' w_a(s') (p_a - p_b)_{s',π} · V_b."""
    if (mdp_a.num_states, mdp_a.num_actions) != (mdp_b.num_states, mdp_b.num_actions):
        raise ValueError("MDPs have different state/action spaces")
    if mdp_a.discount != mdp_b.discount or not np.array_equal(mdp_a.rewards, mdp_b.rewards):
        raise ValueError("MDPs differ outside their transitions")
    V_a = evaluate_policy(mdp_a, policy).values
    V_b = evaluate_policy(mdp_b, policy).values
    w_a = occupancy_weights(mdp_a, policy, start_state).weights
    diff = (mdp_a.policy_matrix(policy) - mdp_b.policy_matrix(policy)) @ V_b
    lhs = float(V_a[start_state] - V_b[start_state])
    rhs = float(mdp_a.discount * w_a @ diff)
    return lhs, rhs


# -- simulation ----------------------------------------------------------

def sample_step(mdp: TabularMdp, state: int, action: int, rng: np.random.Generator) -> int:
    """Draw s' ~ p_{s,a} using exactly one uniform from ``rng``."""
    u = rng.random()
    tr = mdp.transitions[state][action]
    if isinstance(tr, TwoSupportTransition):
        return tr.plus_state if u < tr.plus_prob else tr.minus_state
    if mdp._cdf is None:
        mdp._cdf = np.cumsum(mdp.P, axis=2)
    cdf = mdp._cdf[state, action]
    return int(min(np.searchsorted(cdf, u, side="right"), mdp.num_states - 1))


# -- two-support transform ------------------------------------------------

def split_to_two_support(mdp: TabularMdp) -> tuple[TabularMdp, dict[int, int]]:
    """Route every (s, a) through a binary tree so each row has two successors.

    All trees have depth D = ceil(log2(max out-degree)) and the discount
    becomes γ^(1/D), so values at original states are unchanged. Original
    states keep their indices; tree nodes (reward 0) and, if padding is
    needed, a reward-0 absorbing sink are appended.
    """
    identity = {s: s for s in range(mdp.num_states)}
    if mdp.is_two_support:
        return mdp, identity
    if mdp.satisfies_two_support():
        return mdp.to_two_support(), identity

    S, A = mdp.num_states, mdp.num_actions
    max_degree = int((mdp.P > 0.0).sum(axis=2).max())
    depth = math.ceil(math.log2(max_degree))
    width = 2**depth

    rewards = list(mdp.rewards)
    rows: list[list] = [[None] * A for _ in range(S)]
    sink = None

    def new_node():
        rewards.append(0.0)
        rows.append([None] * A)
        return len(rows) - 1

    def get_sink():
        nonlocal sink
        if sink is None:
            sink = new_node()
            rows[sink] = [TwoSupportTransition(sink, sink, 1.0)] * A
        return sink

    def branch(left, right):
        # left/right: (node or state index or None, mass)
        (ln, lm), (rn, rm) = left, right
        total = lm + rm
        if total <= 0.0:
            return TwoSupportTransition(get_sink(), get_sink(), 1.0)
        ln = get_sink() if ln is None else ln
        rn = get_sink() if rn is None else rn
        return TwoSupportTransition(ln, rn, min(1.0, lm / total))

    for s in range(S):
        for a in range(A):
            probs = mdp.P[s, a]
            support = [int(x) for x in np.flatnonzero(probs > 0.0)]
            level = [(x, float(probs[x])) for x in support] + [(None, 0.0)] * (width - len(support))
            # Build the tree bottom-up; the last pairing is the row of s itself.
            while len(level) > 2:
                nxt = []
                for i in range(0, len(level), 2):
                    node = new_node()
                    tr = branch(level[i], level[i + 1])
                    rows[node] = [tr] * A
                    nxt.append((node, level[i][1] + level[i + 1][1]))
                level = nxt
            rows[s][a] = branch(level[0], level[1])

    split = TabularMdp(np.array(rewards), mdp.discount ** (1.0 / depth), rows)
    return split, identity


# -- random instances ----------------------------------------------------

def random_mdp(num_states: int, num_actions: int, discount: float, rng: np.random.Generator,
               max_successors: int | None = None) -> TabularMdp:
    """Dirichlet rows, optionally restricted to a random support of given size."""
    k = num_states if max_successors is None else min(max_successors, num_states)
    P = np.zeros((num_states, num_actions, num_states))
    for s in range(num_states):
        for a in range(num_actions):
            support = rng.choice(num_states, size=k, replace=False)
            P[s, a, support] = rng.dirichlet(np.ones(k))
    P /= P.sum(axis=2, keepdims=True)
    return TabularMdp.from_dense(P, rng.random(num_states), discount)


def random_two_support_mdp(num_states: int, num_actions: int, discount: float,
                           rng: np.random.Generator) -> TabularMdp:
    plus = rng.integers(num_states, size=(num_states, num_actions))
    minus = (plus + rng.integers(1, num_states, size=plus.shape)) % num_states if num_states > 1 else plus
    return TabularMdp.from_two_support(plus, minus, rng.random(plus.shape), rng.random(num_states), discount)


# -- file format ---------------------------------------------------------

def mdp_to_dict(mdp: TabularMdp) -> dict:
    transitions = []
    for row in mdp.transitions:
        out = []
        for tr in row:
            if isinstance(tr, TwoSupportTransition):
                out.append({"plus": tr.plus_state, "minus": tr.minus_state, "p": tr.plus_prob})
            else:
                out.append({"dense": [float(x) for x in tr]})
        transitions.append(out)
    return {
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "discount": mdp.discount,
        "rewards": [float(r) for r in mdp.rewards],
        "transitions": transitions,
    }


def mdp_from_dict(data: Mapping) -> TabularMdp:
    rows = []
    for row in data["transitions"]:
        out = []
        for tr in row:
            if "dense" in tr:
                out.append(np.asarray(tr["dense"], dtype=float))
            else:
                out.append(TwoSupportTransition(int(tr["plus"]), int(tr["minus"]), float(tr["p"])))
        rows.append(out)
    mdp = TabularMdp(data["rewards"], data["discount"], rows)
    if mdp.num_states != data["num_states"] or mdp.num_actions != data["num_actions"]:
        raise ValueError("declared num_states/num_actions disagree with the transition table")
    return mdp


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp), indent=1) + "\n")


def load_mdp(path) -> TabularMdp:
    return mdp_from_dict(json.loads(Path(path).read_text()))
