"""UCRL with Bernstein confidence sets for two-support MDPs.

The agent acts greedily in an optimistic model chosen from the set of MDPs
whose plus-probabilities are consistent with the observed counts. Models are
only recomputed when the knownness of some (state, action) pair would
change, and every recomputation is preceded by a delay of ``H`` steps under
the outgoing policy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .confidence import radius
from .mdp import (
    StationaryPolicy,
    TabularMdp,
    ValueVector,
    evaluate_policy,
    greedy_policy,
    sample_step,
    solve_optimal,
)

ACTING = "acting"
DELAYING = "delaying"


def z_progression(a: float) -> tuple[int, ...]:
    """{z_i = 2^i - 2 : i = 1 .. first i with z_i >= a}."""
    out = []
    i = 1
    while True:
        z = 2**i - 2
        out.append(z)
        if z >= a:
            return tuple(out)
        i += 1


@dataclass(frozen=True)
class UcrlConstants:
    epsilon: float
    delta: float
    discount: float
    num_states: int
    num_actions: int
    w_min: float
    iota_max: int
    kappa_set: tuple[int, ...]
    iota_set: tuple[int, ...]
    beta: int
    d_set: tuple[int, ...]
    H: int
    delta1: float
    L1: float
    m: float
    N: float
    U_max: int
    E_max: float

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    @property
    def num_kappa_iota(self) -> int:
        return len(self.kappa_set) * len(self.iota_set)

    def w_iota(self, iota: int) -> float:
        return 2.0**iota * self.w_min

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def derive_constants(num_states: int, num_actions: int, epsilon: float, delta: float,
                     discount: float) -> UcrlConstants:
    """All constants of the algorithm and its analysis, natural logs throughout."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must be in (0, 1)")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    if not 0.0 < discount < 1.0:
        raise ValueError("discount must be in (0, 1)")
    if num_states < 1 or num_actions < 1:
        raise ValueError("need at least one state and one action")
    S, A, eps, gamma = num_states, num_actions, epsilon, discount
    horizon = 1.0 / (1.0 - gamma)

    w_min = eps * (1.0 - gamma) / (4.0 * S)
    iota_max = math.ceil(math.log(8.0 * S / (eps * (1.0 - gamma) ** 2)) / math.log(2.0))
    kappa_set = z_progression(S)
    iota_set = tuple(range(iota_max + 1))
    beta = math.ceil(math.log(horizon) / (2.0 * math.log(2.0)))
    d_set = z_progression(beta)
    H = math.ceil(horizon * math.log(8.0 * S / (eps * (1.0 - gamma))))
    KI = len(kappa_set) * len(iota_set)
    delta1 = delta / (2.0 * (S * A) ** 2 * KI)
    L1 = math.log(2.0 / delta1)
    m = 20.0 * L1 * KI * len(d_set) ** 2 / (eps**2 * (1.0 - gamma) ** (2.0 + 2.0 / beta))
    N = 6.0 * S * A * m
    return UcrlConstants(
        epsilon=eps, delta=delta, discount=gamma, num_states=S, num_actions=A,
        w_min=w_min, iota_max=iota_max, kappa_set=kappa_set, iota_set=iota_set,
        beta=beta, d_set=d_set, H=H, delta1=delta1, L1=L1, m=m, N=N,
        U_max=S * A * KI, E_max=4.0 * N * KI,
    )


def knownness(iota: int, n: int, constants: UcrlConstants, m_override: Optional[float] = None) -> int:
    """Largest z in 𝒦 with z <= n / (w_ι m)."""
    m = constants.m if m_override is None else m_override
    level = n / (constants.w_iota(iota) * m)
    return max(z for z in constants.kappa_set if z <= level)


def _next_change_count(n: int, constants: UcrlConstants, m: float) -> float:
    """Smallest count c > n at which knownness changes for some ι (inf if never)."""
    best = math.inf
    for iota in constants.iota_set:
        scale = constants.w_iota(iota) * m
        for z in constants.kappa_set[1:]:
            if z <= n / scale:
                continue
            c = max(n + 1, math.ceil(z * scale))
            # agree exactly with the comparison used by knownness()
            while z > c / scale:
                c += 1
            while c - 1 > n and z <= (c - 1) / scale:
                c -= 1
            if c < best:
                best = c
    return best


# -- model class -----------------------------------------------------------

_BISECT_TOL = 1e-12


def feasible_interval(p_hat: float, n: int, L1: float) -> tuple[float, float]:
    """The set {p̃ : |p̃ - p̂| <= radius(p̃, n)} as an interval.

    radius(·, n) is concave, so the constraint holds on a single interval
    around p̂; each endpoint is found by bisection.
    """
    if n == 0:
        return 0.0, 1.0

    def slack_up(x):
        return radius(x, n, L1) - (x - p_hat)

    def slack_down(x):
        return radius(x, n, L1) - (p_hat - x)

    if slack_up(1.0) >= 0.0:
        hi = 1.0
    else:
        good, bad = p_hat, 1.0
        while bad - good > _BISECT_TOL:
            mid = 0.5 * (good + bad)
            if slack_up(mid) >= 0.0:
                good = mid
            else:
                bad = mid
        hi = good
    if slack_down(0.0) >= 0.0:
        lo = 0.0
    else:
        good, bad = p_hat, 0.0
        while good - bad > _BISECT_TOL:
            mid = 0.5 * (good + bad)
            if slack_down(mid) >= 0.0:
                good = mid
            else:
                bad = mid
        lo = good
    return lo, hi


@dataclass
class VisitCounts:
    """``n`` counts folded in at updates; ``v`` counts since the last update."""

    n: np.ndarray
    n_triple: np.ndarray
    v: np.ndarray
    v_triple: np.ndarray

    @classmethod
    def zeros(cls, num_states: int, num_actions: int) -> "VisitCounts":
        return cls(
            np.zeros((num_states, num_actions), dtype=np.int64),
            np.zeros((num_states, num_actions, num_states), dtype=np.int64),
            np.zeros((num_states, num_actions), dtype=np.int64),
            np.zeros((num_states, num_actions, num_states), dtype=np.int64),
        )

    def copy(self) -> "VisitCounts":
        return VisitCounts(self.n.copy(), self.n_triple.copy(), self.v.copy(), self.v_triple.copy())


@dataclass(frozen=True)
class ModelClass:
    """Per-pair empirical plus-probabilities and their feasible intervals."""

    p_hat: np.ndarray
    counts: np.ndarray
    L1: float
    plus_states: np.ndarray
    minus_states: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def from_counts(cls, skeleton: TabularMdp, n: np.ndarray, n_triple: np.ndarray, L1: float) -> "ModelClass":
        plus, minus = skeleton.plus_states, skeleton.minus_states
        S, A = plus.shape
        n_plus = n_triple[np.arange(S)[:, None], np.arange(A)[None, :], plus]
        p_hat = n_plus / np.maximum(1, n)
        lo = np.empty_like(p_hat)
        hi = np.empty_like(p_hat)
        for s in range(S):
            for a in range(A):
                lo[s, a], hi[s, a] = feasible_interval(float(p_hat[s, a]), int(n[s, a]), L1)
        return cls(p_hat, np.asarray(n).copy(), L1, plus, minus, lo, hi)

    def sample_member(self, skeleton: TabularMdp, rng: np.random.Generator) -> TabularMdp:
        """A member of the class with p̃ uniform on each feasible interval."""
        return skeleton.with_plus_probs(rng.uniform(self.lo, self.hi))


def extended_value_iteration(model: ModelClass, mdp_skeleton: TabularMdp,
                             tolerance: float = 1e-6) -> tuple[TabularMdp, ValueVector, StationaryPolicy]:
    """Jointly optimise actions and plus-probabilities over the model class.

    For each pair the optimistic p̃ is the interval endpoint that favours the
    better of the two successors. Returns the optimistic MDP, the exact value
    of the greedy policy in it, and that policy.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    gamma = mdp_skeleton.discount
    plus, minus = model.plus_states, model.minus_states
    r = mdp_skeleton.rewards[:, None]
    stop = tolerance * (1.0 - gamma) / (2.0 * gamma)

    def backup(V):
        Vp, Vm = V[plus], V[minus]
        p_tilde = np.where(Vp >= Vm, model.hi, model.lo)
        return r + gamma * (p_tilde * Vp + (1.0 - p_tilde) * Vm), p_tilde

    V = np.zeros(mdp_skeleton.num_states)
    while True:
        Q, _ = backup(V)
        V_next = Q.max(axis=1)
        done = np.max(np.abs(V_next - V)) <= stop
        V = V_next
        if done:
            break
    _, p_tilde = backup(V)
    optimistic = mdp_skeleton.with_plus_probs(p_tilde)
    policy = greedy_policy(optimistic, V)
    return optimistic, evaluate_policy(optimistic, policy), policy


def model_membership_check(true_mdp: TabularMdp, model: ModelClass) -> bool:
    """Whether the true plus-probabilities satisfy every interval constraint."""
    if not (np.array_equal(true_mdp.plus_states, model.plus_states)
            and np.array_equal(true_mdp.minus_states, model.minus_states)):
        raise ValueError("true MDP and model class use different successor pairs")
    p_true = true_mdp.plus_probs
    S, A = p_true.shape
    for s in range(S):
        for a in range(A):
            n = int(model.counts[s, a])
            p = float(p_true[s, a])
            if abs(p - model.p_hat[s, a]) > radius(p, n, model.L1):
                return False
    return True


# -- agent -------------------------------------------------------------------

@dataclass
class EpisodeLog:
    episode_index: int
    steps: int = 0
    delay_steps: int = 0
    update_trigger: Optional[tuple] = None
    useful_visits: Optional[list] = None


@dataclass
class TraceRow:
    """One time-step. Value columns are filled in by the experiment harness."""

    t: int
    episode: int
    state: int
    action: int
    delay: bool
    v_star: float = math.nan
    v_pi_k: float = math.nan
    v_optimistic: float = math.nan
    v_estimate: float = math.nan
    v_estimate_se: float = 0.0
    mistake: bool = False
    exploration_start: bool = False


class UcrlAgent:
    """Mutable state of one UCRL run (counts, episode, optimistic model, policy).

    Also usable as a history policy: :meth:`action` gives the action at the
    current state and :meth:`observe` feeds the next state.
    """

    def __init__(self, skeleton: TabularMdp, constants: UcrlConstants, start_state: int = 0,
                 m_override: Optional[float] = None, evi_tolerance: float = 1e-6,
                 initial_model: Optional[TabularMdp] = None):
        if not skeleton.is_two_support:
            raise ValueError("UCRL needs a two-support MDP; apply split_to_two_support first")
        self.skeleton = skeleton
        self.constants = constants
        self.m = constants.m if m_override is None else float(m_override)
        self.evi_tolerance = evi_tolerance
        S, A = skeleton.num_states, skeleton.num_actions
        self.counts = VisitCounts.zeros(S, A)
        self.episode = 1
        self.t = 1
        self.current_state = int(start_state)
        self.phase = ACTING
        self.delay_remaining = 0
        self.num_updates = 0
        self.episodes: list[EpisodeLog] = [EpisodeLog(1)]
        self._pending_trigger = None
        self._plus = skeleton.plus_states
        if initial_model is None:
            self._plan()
        else:
            self.model = ModelClass.from_counts(skeleton, self.counts.n, self.counts.n_triple, constants.L1)
            self.optimistic_mdp = initial_model
            self.optimistic_value, self.policy = solve_optimal(initial_model, evi_tolerance)
        self._thresholds = np.full((S, A), _next_change_count(0, constants, self.m), dtype=float)

    # planning ---------------------------------------------------------------

    def _plan(self):
        self.model = ModelClass.from_counts(self.skeleton, self.counts.n, self.counts.n_triple, self.constants.L1)
        self.optimistic_mdp, self.optimistic_value, self.policy = extended_value_iteration(
            self.model, self.skeleton, self.evi_tolerance)
        self._actions = self.policy.action_of

    @property
    def policy(self) -> StationaryPolicy:
        return self._policy

    @policy.setter
    def policy(self, value: StationaryPolicy):
        self._policy = value
        self._actions = value.action_of

    def _knownness_changes(self, s: int, a: int) -> list[int]:
        n = int(self.counts.n[s, a])
        nv = n + int(self.counts.v[s, a])
        return [i for i in self.constants.iota_set
                if knownness(i, nv, self.constants, self.m) != knownness(i, n, self.constants, self.m)]

    def update(self):
        """Fold ``v`` into ``n``, replan, and start the next episode."""
        c = self.counts
        log = self.episodes[-1]
        log.update_trigger = self._pending_trigger
        log.useful_visits = self._useful_visits()
        c.n += c.v
        c.n_triple += c.v_triple
        c.v[:] = 0
        c.v_triple[:] = 0
        self.episode += 1
        self.num_updates += 1
        self._plan()
        S, A = c.n.shape
        for s in range(S):
            for a in range(A):
                self._thresholds[s, a] = _next_change_count(int(c.n[s, a]), self.constants, self.m)
        self.phase = ACTING
        self._pending_trigger = None
        self.episodes.append(EpisodeLog(self.episode))

    def _useful_visits(self) -> list[list[int]]:
        """Visits this episode, by (κ, ι) level of the visited pair."""
        K, I = self.constants.kappa_set, self.constants.iota_set
        table = [[0] * len(I) for _ in K]
        visited = np.argwhere(self.counts.v > 0)
        for s, a in visited:
            for j, iota in enumerate(I):
                kappa = knownness(iota, int(self.counts.n[s, a]), self.constants, self.m)
                table[K.index(kappa)][j] += int(self.counts.v[s, a])
        return table

    # history-policy interface -------------------------------------------------

    def action(self) -> int:
        return self._actions[self.current_state]

    act = action

    def observe(self, next_state: int) -> bool:
        """Record the transition taken from the current state.

        Returns True if that step was a delay step.
        """
        s = self.current_state
        a = self._actions[s]
        c = self.counts
        c.v[s, a] += 1
        c.v_triple[s, a, next_state] += 1
        self.t += 1
        self.current_state = int(next_state)
        log = self.episodes[-1]
        if self.phase == ACTING:
            log.steps += 1
            if c.n[s, a] + c.v[s, a] >= self._thresholds[s, a]:
                self._pending_trigger = (s, a, tuple(self._knownness_changes(s, a)))
                self.phase = DELAYING
                self.delay_remaining = self.constants.H
            return False
        log.delay_steps += 1
        self.delay_remaining -= 1
        if self.delay_remaining == 0:
            self.update()
        return True

    def fork(self) -> "UcrlAgent":
        """Independent copy; immutable pieces (models, constants) are shared."""
        other = object.__new__(UcrlAgent)
        other.__dict__.update(self.__dict__)
        other.counts = self.counts.copy()
        other._thresholds = self._thresholds.copy()
        other.episodes = [EpisodeLog(**e.__dict__) for e in self.episodes[-1:]]
        return other


def ucrl_step(agent: UcrlAgent, env: TabularMdp, rng: np.random.Generator) -> TraceRow:
    """Advance the agent one time-step in ``env``."""
    if not env.is_two_support:
        raise ValueError("environment is not two-support; apply split_to_two_support first")
    s = agent.current_state
    a = agent.action()
    t, k = agent.t, agent.episode
    delay = agent.phase == DELAYING
    agent.observe(sample_step(env, s, a, rng))
    return TraceRow(t, k, s, a, delay)
