import json

import numpy as np
import pytest

from pacmdp.harness import (
    TRACE_FIELDS,
    ExperimentConfig,
    build_environment,
    detect_exploration_phases,
    emit_trace,
    expected_visits,
    iota_level,
    mistake_sweep,
    partition_known_states,
    read_trace,
    run_agent,
    run_experiment,
)
from pacmdp.lowerbound import HardMdpSpec, build_hard_mdp
from pacmdp.mdp import OccupancyWeights, evaluate_policy, occupancy_weights, random_mdp, save_mdp, solve_optimal
from pacmdp.ucrl import TraceRow, UcrlAgent, VisitCounts, derive_constants, knownness, ucrl_step

HARD = {"kind": "hard", "num_actions": 2, "epsilon": 0.15625, "optimal_arm": 1}


def config(**kw):
    base = dict(mdp_source=HARD, epsilon=0.2, delta=0.2, discount=0.8, steps=3000, seed=0, m_override=50)
    base.update(kw)
    return ExperimentConfig(**base)


# -- config --------------------------------------------------------------------------------

def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        config(steps=-1)
    with pytest.raises(ValueError):
        config(mistake_estimator="guess")
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"mdp_source": HARD, "epsilon": 0.2, "delta": 0.2, "bogus": 1})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(config().to_dict()))
    assert ExperimentConfig.load(path) == config()


def test_build_environment_variants(tmp_path):
    assert build_environment(config()).num_states == 4
    chain = config(mdp_source={"kind": "chain", "num_actions": 2, "epsilon": 0.1, "copies": 3, "arms_seed": 1})
    assert build_environment(chain).num_states == 12
    mdp = random_mdp(3, 2, 0.9, np.random.default_rng(0))
    save_mdp(mdp, tmp_path / "m.json")
    assert build_environment(config(mdp_source=str(tmp_path / "m.json"), discount=None)).discount == 0.9
    with pytest.raises(ValueError):
        build_environment(config(mdp_source=str(tmp_path / "m.json"), discount=0.8))
    with pytest.raises(ValueError):
        build_environment(config(discount=None))
    with pytest.raises(ValueError):
        build_environment(config(mdp_source={"kind": "maze"}))


def test_rollout_depth_must_cover_horizon():
    with pytest.raises(ValueError):
        run_experiment(config(mistake_estimator="monte_carlo_fork", rollout_depth=3, steps=5))


# -- runs ------------------------------------------------------------------------------------

def test_true_model_agent_makes_no_mistakes():
    env = build_hard_mdp(HardMdpSpec(2, 0.15625, 0.8, 1))
    c = derive_constants(4, 2, 0.2, 0.2, 0.8)
    # with an enormous m no knownness level ever changes, so the agent keeps π*
    agent = UcrlAgent(env, c, 0, 1e15, initial_model=env)
    rows, report = run_agent(agent, env, config(m_override=1e15), c)
    assert report.mistake_count == 0 and report.update_count == 0
    assert all(r.v_pi_k == pytest.approx(r.v_star, abs=1e-9) for r in rows)


@pytest.mark.parametrize("m", [25, 200])
def test_delay_steps_equal_h_times_updates(m):
    rows, report = run_experiment(config(m_override=m, steps=20_000, seed=4))
    H = report.constants["H"]
    assert report.delay_steps == H * report.update_count
    assert report.pending_delay_steps == sum(r.delay for r in rows) - report.delay_steps
    assert 0 <= report.pending_delay_steps < H
    assert report.update_count <= report.constants["U_max"]
    assert report.bound == H * (report.constants["U_max"] + report.constants["E_max"])
    assert report.bound_respected


def test_mistake_flags_match_offline_replay():
    cfg = config(steps=4000, seed=9)
    rows, report = run_experiment(cfg)
    env = build_environment(cfg)
    c = derive_constants(4, 2, cfg.epsilon, cfg.delta, 0.8)
    agent = UcrlAgent(env, c, 0, cfg.m_override)
    rng = np.random.default_rng(cfg.seed)
    policies = {}
    for _ in range(cfg.steps):
        policies.setdefault(agent.episode, agent.policy)
        ucrl_step(agent, env, rng)
    v_star = solve_optimal(env, 1e-12)[0].values
    values = {k: evaluate_policy(env, pi).values for k, pi in policies.items()}
    for row in rows:
        v = values[row.episode][row.state]
        assert row.v_pi_k == pytest.approx(v, abs=1e-9)
        assert row.mistake == (v_star[row.state] - v > cfg.epsilon)
    assert report.mistake_count == sum(r.mistake for r in rows)


def test_auto_split_warns(caplog, tmp_path):
    mdp = random_mdp(4, 2, 0.9, np.random.default_rng(1), max_successors=3)
    save_mdp(mdp, tmp_path / "m.json")
    with caplog.at_level("WARNING"):
        rows, report = run_experiment(config(mdp_source=str(tmp_path / "m.json"), steps=500, discount=None))
    assert "splitting" in caplog.text
    assert report.constants["num_states"] > 4
    assert all(r.state < report.constants["num_states"] for r in rows)


def test_monte_carlo_estimator_runs_and_reports_error():
    cfg = config(steps=60, mistake_estimator="monte_carlo_fork", rollout_count=8)
    rows, report = run_experiment(cfg)
    assert report.max_estimate_se > 0 and report.estimator == "monte_carlo_fork"
    for r in rows:
        assert r.mistake == (r.v_star - r.v_estimate > cfg.epsilon)
        # truncated at depth H, so the rollout mean sits within a few errors of V^π_k
        assert r.v_estimate <= r.v_pi_k + 6 * max(r.v_estimate_se, 1e-3)
    # a rerun is identical
    rows2, _ = run_experiment(cfg)
    assert [r.v_estimate for r in rows] == [r.v_estimate for r in rows2]


# -- exploration phases ------------------------------------------------------------------------

def synthetic(qualifying, T, delay=()):
    rows = []
    for t in range(1, T + 1):
        gap = 0.5 if t in qualifying else 0.0
        rows.append(TraceRow(t, 1, 0, 0, t in delay, 1.0, 1.0, 1.0 + gap))
    return rows


def test_phases_none_when_values_agree():
    assert detect_exploration_phases(synthetic(set(), 50), 0.2, 5) == []


def test_phases_single():
    assert detect_exploration_phases(synthetic({7}, 50), 0.2, 5) == [7]


def test_phases_hand_trace():
    H = 6
    q = set(range(10, 10 + 3 * H))
    got = detect_exploration_phases(synthetic({10, 10 + H, 10 + 2 * H + 1}, 60), 0.2, H)
    assert got == [10, 10 + H, 10 + 2 * H + 1]
    # every step qualifying gives starts exactly H apart
    assert detect_exploration_phases(synthetic(q, 60), 0.2, H) == [10, 16, 22]


def test_phases_skip_delay_and_boundary():
    rows = synthetic({3, 4}, 10, delay={3})
    assert detect_exploration_phases(rows, 0.2, 5) == [4]
    rows = synthetic({2}, 5)
    rows[1].v_optimistic = rows[1].v_pi_k + 0.1  # exactly ε/2
    assert detect_exploration_phases(rows, 0.2, 5) == [2]


def test_phases_on_real_run():
    rows, report = run_experiment(config(steps=20_000, seed=2))
    H = report.constants["H"]
    starts = [r.t for r in rows if r.exploration_start]
    assert len(starts) == report.exploration_phase_count > 0
    assert all(b - a >= H for a, b in zip(starts, starts[1:]))
    by_t = {r.t: r for r in rows}
    assert not any(by_t[t].delay for t in starts)


# -- partition -----------------------------------------------------------------------------

def test_partition_empty_and_fresh():
    c = derive_constants(4, 2, 0.1, 0.1, 0.9)
    counts = VisitCounts.zeros(4, 2)
    low = OccupancyWeights(0, np.full(4, c.w_min))
    active, cells = partition_known_states(low, counts, [0] * 4, c)
    assert active == [] and cells == {}
    mdp = random_mdp(4, 2, 0.9, np.random.default_rng(0))
    w = occupancy_weights(mdp, [0] * 4, 0)
    active, cells = partition_known_states(w, counts, [0] * 4, c)
    assert active and all(k == 0 for k, _ in cells)


def test_iota_assignment_threshold_scan():
    c = derive_constants(4, 2, 0.1, 0.1, 0.9)
    w = OccupancyWeights(0, np.array([2 * c.w_min, 5 * c.w_min, 0.0, 1e6]))
    active, cells = partition_known_states(w, VisitCounts.zeros(4, 2), [0] * 4, c)
    assert active == [0, 1, 3]
    thresholds = [c.w_iota(i) for i in c.iota_set]
    expected = {}
    for s in active:
        level = max(i for i, th in zip(c.iota_set, thresholds) if th <= w.weights[s])
        expected[s] = level
    assert expected == {0: 1, 1: 2, 3: c.iota_max}
    got = {s: iota for (_, iota), states in cells.items() for s in states}
    assert got == expected


def test_partition_is_partition_on_run():
    cfg = config(steps=5000, seed=3)
    env = build_environment(cfg)
    c = derive_constants(4, 2, cfg.epsilon, cfg.delta, 0.8)
    agent = UcrlAgent(env, c, 0, cfg.m_override)
    rng = np.random.default_rng(0)
    for step in range(cfg.steps):
        ucrl_step(agent, env, rng)
        if step % 250 == 0:
            w = occupancy_weights(env, agent.policy, agent.current_state)
            active, cells = partition_known_states(w, agent.counts, agent.policy, c, cfg.m_override)
            flat = [s for states in cells.values() for s in states]
            assert sorted(flat) == sorted(active) and len(set(flat)) == len(flat)
            for (kappa, iota), states in cells.items():
                assert kappa in c.kappa_set and iota in c.iota_set
                for s in states:
                    n = int(agent.counts.n[s, agent.policy[s]])
                    assert knownness(iota, n, c, cfg.m_override) == kappa
                    assert iota == iota_level(float(w.weights[s]), c)


# -- visit lower bound spot check --------------------------------------------------------------

def test_expected_visits_cover_half_weight():
    cfg = config(steps=3000, seed=5)
    rows, report = run_experiment(cfg)
    env = build_environment(cfg)
    c = derive_constants(4, 2, cfg.epsilon, cfg.delta, 0.8)
    starts = {r.t for r in rows if r.exploration_start}
    assert starts
    agent = UcrlAgent(env, c, 0, cfg.m_override)
    rng = np.random.default_rng(cfg.seed)
    mc_rng = np.random.default_rng(123)
    checked = 0
    for _ in range(cfg.steps):
        if agent.t in starts:
            w = occupancy_weights(env, agent.policy, agent.current_state).weights
            mean, se = expected_visits(env, agent.policy, agent.current_state, c.H, 10_000, mc_rng)
            for s in range(env.num_states):
                if w[s] >= c.w_min:
                    assert mean[s] >= w[s] / 2 - 3 * se[s]
                    checked += 1
            if checked > 40:
                break
        ucrl_step(agent, env, rng)
    assert checked > 0


def test_expected_visits_deterministic_chain():
    mdp = build_hard_mdp(HardMdpSpec(2, 0.0, 0.9))
    mean, se = expected_visits(mdp, [0] * 4, 0, 1, 100, np.random.default_rng(0))
    assert mean[0] == 1 and mean.sum() == 1


# -- output ------------------------------------------------------------------------------------

def test_empty_run_header_only(tmp_path):
    rows, report = run_experiment(config(steps=0))
    emit_trace(rows, report, tmp_path / "t.csv", tmp_path / "r.json")
    assert (tmp_path / "t.csv").read_text() == ",".join(TRACE_FIELDS) + "\n"
    assert json.loads((tmp_path / "r.json").read_text())["total_steps"] == 0


def test_identical_configs_byte_identical(tmp_path):
    for name in ("a", "b"):
        rows, report = run_experiment(config(steps=2000, seed=11))
        emit_trace(rows, report, tmp_path / f"{name}.csv", tmp_path / f"{name}.json")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_trace_roundtrip_recount(tmp_path):
    rows, report = run_experiment(config(steps=3000, seed=12))
    emit_trace(rows, report, tmp_path / "t.csv", tmp_path / "r.json")
    parsed = read_trace(tmp_path / "t.csv")
    assert len(parsed) == 3000 and list(parsed[0]) == TRACE_FIELDS
    rep = json.loads((tmp_path / "r.json").read_text())
    assert sum(int(r["mistake"]) for r in parsed) == rep["mistake_count"] == report.mistake_count
    assert rep["seed"] == 12 and rep["constants"]["H"] == 34
    # 12 significant digits
    v = parsed[0]["v_star"]
    assert len(v.replace(".", "").lstrip("0")) <= 12
    assert float(v) == pytest.approx(rows[0].v_star, rel=1e-11)


def test_sweep_workers_agree():
    base = config(steps=3000)
    a = mistake_sweep(base, [25, 100], [0, 1], workers=1)
    b = mistake_sweep(base, [25, 100], [0, 1], workers=2)
    assert a == b and set(a) == {25, 100} and all(len(v) == 2 for v in a.values())
