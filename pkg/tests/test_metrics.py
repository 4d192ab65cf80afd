import io
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import open_map
from rdpp import agents as ag
from rdpp import metrics as mx
from rdpp.errors import EmptyWindow, MalformedCsv
from rdpp.gridworld import trajectory_from_cells
from rdpp.observers import BoltzmannObserver, GoalPosterior
from rdpp.protocol import RdppConfig, run_rdpp


@pytest.fixture(scope="module")
def g5():
    return open_map(5, 5, (0, 4), [(4, 4), (4, 0)])


def straight(grid, n=4):
    return trajectory_from_cells([(x, 4) for x in range(n + 1)], goal=grid.true_goal)


def record(traj, p_true, k, n_goals=2, steps=None):
    probs = np.full(n_goals, (1 - p_true) / (n_goals - 1))
    probs[0] = p_true
    if steps is None:
        steps = np.tile(probs, (max(len(traj), 1), 1))
    return ag.make_record(SimpleNamespace(n_goals=n_goals, true_goal_index=0, rewards=_Rewards),
                          traj, traj, GoalPosterior(probs), k, steps)


class _Rewards:
    step_cost = -1.0
    goal_reward = 100.0


def metric_row(**kw):
    base = dict(run_id="r", seed=0, agent="naive", episode=1, p_true=0.5, cost_ratio=1.5,
                steps_after_ldp=2, reached_goal=True, traj_len=6)
    return mx.MetricRow(**{**base, **kw})


# ---------------------------------------------------------------- LDP

def test_ldp_true_goal_always_leads():
    p = np.array([[0.6, 0.4]] * 5)
    assert mx.last_deceptive_point(p, 0) == 0
    assert mx.steps_after_ldp(p, 0) == 5


def test_ldp_true_goal_never_leads():
    p = np.array([[0.3, 0.7]] * 5)
    assert mx.steps_after_ldp(p, 0) == 0


def test_ldp_hand_fixture():
    # the true goal takes the lead only at t = T - 3 (T = 8)
    p = np.array([[0.4, 0.6]] * 5 + [[0.8, 0.2]] * 3)
    assert mx.last_deceptive_point(p, 0) == 5
    assert mx.steps_after_ldp(p, 0) == 3


def test_ldp_ties_count_as_deceptive_for_higher_index():
    p = np.array([[0.5, 0.5]] * 3)
    assert mx.steps_after_ldp(p, 1) == 0
    assert mx.steps_after_ldp(p, 0) == 3


def test_ldp_dominance_rule_is_stricter():
    p = np.array([[0.5, 0.5], [0.9, 0.1]])
    assert mx.steps_after_ldp(p, 0, "argmax") == 2
    assert mx.steps_after_ldp(p, 0, "dominance") == 1
    with pytest.raises(ValueError):
        mx.steps_after_ldp(p, 0, "other")


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_ldp_and_steps_after_sum_to_length(T, n, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(n), size=T)
    t = mx.last_deceptive_point(p, 0)
    assert 0 <= t <= T
    assert t + mx.steps_after_ldp(p, 0) == T


# ---------------------------------------------------------------- curves and belief

def test_deceptiveness_curve_uniform(g5):
    recs = [record(straight(g5), 0.5, k) for k in range(1, 8)]
    p, smooth = mx.deceptiveness_curve(recs)
    assert len(p) == 7
    np.testing.assert_allclose(p, 0.5)
    np.testing.assert_allclose(smooth, 0.5)


def test_windowed_mean_is_trailing():
    np.testing.assert_allclose(mx.windowed_mean([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])


def test_belief_along_path(g5):
    obs = BoltzmannObserver(g5)
    one = mx.belief_along_path(trajectory_from_cells([(0, 4), (1, 4)]), obs, 0)
    assert one.shape == (1,)
    traj = straight(g5)
    b = mx.belief_along_path(traj, obs, 0)
    assert len(b) == len(traj) and np.all((b >= 0) & (b <= 1))
    final = obs.predict_steps(traj)[-1]
    assert b[-1] == final.max()


def test_honest_agent_is_recognised(grid15, pretrained15):
    observer, _, _ = pretrained15
    recs = run_rdpp(RdppConfig(grid15, K=40, agent="honest", observer="learnable"), observer)
    p, _ = mx.deceptiveness_curve(recs)
    assert p[-20:].mean() > 0.6


# ---------------------------------------------------------------- metric rows

def test_metric_rows_fields(g5):
    traj = straight(g5)
    rows = mx.metric_rows([record(traj, 0.25, 3)], g5, "run", 7, "am")
    r = rows[0]
    assert (r.run_id, r.seed, r.agent, r.episode) == ("run", 7, "am", 3)
    assert r.cost_ratio == 1.0 and r.traj_len == 4 and r.reached_goal
    assert r.steps_after_ldp == 0


@pytest.mark.parametrize("kw", [dict(p_true=1.2), dict(cost_ratio=0.5), dict(steps_after_ldp=9)])
def test_metric_row_invariants(kw):
    with pytest.raises(ValueError):
        metric_row(**kw)


def test_summarize_groups_by_episode():
    rows = [metric_row(seed=s, episode=e, p_true=0.1 * (s + 1)) for s in range(3) for e in (1, 2)]
    out = mx.summarize(rows)
    assert [o["episode"] for o in out] == [1, 2]
    assert out[0]["n_seeds"] == 3
    assert out[0]["p_true_mean"] == pytest.approx(0.2)
    assert out[0]["p_true_std"] == pytest.approx(np.std([0.1, 0.2, 0.3]))


# ---------------------------------------------------------------- heatmaps

def test_heatmap_straight_line(g5):
    heat = mx.visit_heatmap([record(straight(g5), 0.5, 1)], g5, (1, 1))
    expected = np.zeros((5, 5), dtype=int)
    expected[4, :4] = 1
    np.testing.assert_array_equal(heat.counts, expected)
    assert heat.support == {(x, 4) for x in range(4)}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=10))
def test_heatmap_mass_conservation(g5, lengths):
    recs = [record(straight(g5, n), 0.5, k) for k, n in enumerate(lengths, start=1)]
    heat = mx.visit_heatmap(recs, g5, (1, len(recs)))
    assert heat.total == sum(lengths)


@pytest.mark.parametrize("window", [(5, 9), (3, 2)])
def test_heatmap_empty_window(g5, window):
    with pytest.raises(EmptyWindow):
        mx.visit_heatmap([record(straight(g5), 0.5, 1)], g5, window)


@pytest.mark.parametrize("K, expected", [(100, [(1, 25), (26, 50), (51, 75), (76, 100)]),
                                         (1, [(1, 1)]), (6, [(1, 2), (3, 3), (4, 4), (5, 6)])])
def test_quarter_windows(K, expected):
    assert mx.quarter_windows(K) == expected


def test_heatmap_svg_structure(g5):
    heat = mx.visit_heatmap([record(straight(g5), 0.5, 1)], g5, (1, 1))
    svg = mx.heatmap_svg(heat, g5)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<rect") == 25
    assert "stroke-dasharray" in svg
    assert svg == mx.heatmap_svg(heat, g5)


# ---------------------------------------------------------------- path features

def test_features_two_waypoints(g5):
    f = mx.path_features(straight(g5), 2, g5)
    np.testing.assert_allclose(f, [0, 4 / 5, 4 / 5, 4 / 5])


def test_features_evenly_spaced():
    g = open_map(11, 3, (0, 1), [(10, 1), (0, 0)])
    traj = trajectory_from_cells([(x, 1) for x in range(11)], goal=(10, 1))
    f = mx.path_features(traj, 5, g).reshape(-1, 2)
    np.testing.assert_allclose(f[:, 0] * 11, [0, 2.5, 5, 7.5, 10])
    np.testing.assert_allclose(f[:, 1], 1 / 3)


def test_features_identical_paths(g5):
    a = mx.path_features(straight(g5), 6, g5)
    b = mx.path_features(straight(g5), 6, g5)
    assert np.linalg.norm(a - b) == 0.0


def test_features_need_two_waypoints(g5):
    with pytest.raises(ValueError):
        mx.path_features(straight(g5), 1, g5)


def test_feature_csv_layout(g5):
    buf = io.StringIO()
    rows = mx.feature_rows([record(straight(g5), 0.5, 1)], g5, "r", 0, n_waypoints=3)
    mx.write_features(rows, buf, 3)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "run_id,seed,episode,f0,f1,f2,f3,f4,f5"
    assert len(lines[1].split(",")) == 9


# ---------------------------------------------------------------- CSV round trip

rows_strategy = st.lists(st.builds(
    lambda seed, ep, p, extra, T, sal, reached: metric_row(
        seed=seed, episode=ep, p_true=p, cost_ratio=1.0 + extra, traj_len=T,
        steps_after_ldp=min(sal, T), reached_goal=reached),
    st.integers(0, 99), st.integers(1, 400), st.floats(0, 1), st.floats(0, 10),
    st.integers(0, 200), st.integers(0, 200), st.booleans()), max_size=20)


@settings(max_examples=100, deadline=None)
@given(rows_strategy)
def test_metrics_csv_round_trip(rows):
    text = mx.metrics_to_string(rows)
    parsed = mx.read_metrics(io.StringIO(text))
    assert parsed == rows
    assert mx.metrics_to_string(parsed) == text


@pytest.mark.parametrize("text, line", [
    ("a,b\n", 1),
    ("# note\n" + ",".join(mx.METRIC_FIELDS) + "\nr,0,naive,1,0.5\n", 3),
    (",".join(mx.METRIC_FIELDS) + "\nr,0,naive,1,0.5,1.0,0,1,3\nr,x,naive,1,0.5,1.0,0,1,3\n", 3),
    (",".join(mx.METRIC_FIELDS) + "\nr,0,naive,1,1.5,1.0,0,1,3\n", 2),
    (",".join(mx.METRIC_FIELDS) + "\nr,0,naive,1,0.5,1.0,0,yes,3\n", 2),
    ("", 1),
])
def test_malformed_csv_names_line(text, line):
    with pytest.raises(MalformedCsv, match=f"line {line}:"):
        mx.read_metrics(io.StringIO(text))
