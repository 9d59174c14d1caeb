import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from rlprune.compress import CostModel, model_cost, synthetic_latency_table
from rlprune.data import Dataset
from rlprune.env import (
    FEATURES, BudgetTracker, CompressionEnv, EpisodeOutcome, RewardSpec, bound_action, reward, reward_value,
)
from rlprune.errors import InfeasibleBudget
from rlprune.nn import toy_convnet


@pytest.fixture(scope="module")
def net():
    return toy_convnet(seed=0)


@pytest.fixture(scope="module")
def val():
    rng = np.random.default_rng(0)
    return Dataset(rng.normal(size=(40, 1, 16, 16)), np.arange(40) % 10, "val")


# -- Algorithm 1 on separable costs ---------------------------------------------


def test_bound_action_hand_examples():
    tracker = BudgetTracker([40, 30, 30], alpha=0.5, a_max=0.8)
    assert tracker.w_all == 100
    assert bound_action(0.1, tracker) == pytest.approx(0.1)  # duty 2 -> 2/40 < 0.1
    assert tracker.w_reduced == pytest.approx(4)
    a = bound_action(0.2, tracker)  # duty = 50 - 24 - 4 = 22
    assert a == pytest.approx(22 / 30)


def test_bound_action_without_duty():
    for alpha in (0.0, None):
        tracker = BudgetTracker([40, 30, 30], alpha=alpha, a_max=0.8)
        for raw in (0.0, 0.3, 0.8):
            assert bound_action(raw, tracker) == raw
    tracker = BudgetTracker([40, 30, 30], alpha=0.0, a_max=0.8)
    assert bound_action(0.95, tracker) == 0.8


def test_bound_action_infeasible():
    tracker = BudgetTracker([40, 30, 30], alpha=0.9, a_max=0.8)
    assert not tracker.feasible()
    with pytest.raises(InfeasibleBudget):
        bound_action(0.5, tracker)


costs_st = st.lists(st.floats(1.0, 1000.0), min_size=1, max_size=8)


@settings(max_examples=300, deadline=None)
@given(costs=costs_st, alpha=st.floats(0.0, 0.8), data=st.data())
def test_budget_guarantee_for_any_raw_sequence(costs, alpha, data):
    tracker = BudgetTracker(costs, alpha=alpha, a_max=0.8)
    raws = data.draw(st.lists(st.floats(0, 1), min_size=len(costs), max_size=len(costs)))
    for raw in raws:
        a = bound_action(raw, tracker)
        assert 0 <= a <= 0.8 + 1e-9
    assert tracker.w_reduced >= alpha * tracker.w_all - 1e-9 * tracker.w_all
    assert tracker.w_reduced <= tracker.w_all


@settings(max_examples=300, deadline=None)
@given(costs=costs_st, alpha=st.floats(0.0, 0.8), data=st.data())
def test_no_over_constraint(costs, alpha, data):
    raws = data.draw(st.lists(st.floats(0, 0.8), min_size=len(costs), max_size=len(costs)))
    assume(sum(r * c for r, c in zip(raws, costs)) >= alpha * sum(costs) + 1e-9)
    tracker = BudgetTracker(costs, alpha=alpha, a_max=0.8)
    for raw in raws:
        assert bound_action(raw, tracker) == pytest.approx(raw, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(costs=costs_st, alpha=st.floats(0.0, 0.8), data=st.data())
def test_tracker_bookkeeping(costs, alpha, data):
    tracker = BudgetTracker(costs, alpha=alpha)
    raws = data.draw(st.lists(st.floats(0, 1), min_size=len(costs), max_size=len(costs)))
    rest, reduced = tracker.w_rest, tracker.w_reduced
    for raw in raws[:-1]:
        bound_action(raw, tracker)
        assert tracker.w_rest <= rest
        assert tracker.w_reduced >= reduced
        rest, reduced = tracker.w_rest, tracker.w_reduced


# -- environment -------------------------------------------------------------------


def test_reset_properties(net, val):
    env = CompressionEnv(net, val, CostModel("flops"), prune="channel", alpha=0.5)
    s1 = env.reset()
    s2 = env.reset()
    np.testing.assert_array_equal(s1, s2)
    assert s1.shape == (11,)
    assert s1[FEATURES.index("t")] == 0
    assert s1[FEATURES.index("reduced")] == 0
    assert s1[FEATURES.index("a_prev")] == 0
    report = model_cost(net, CostModel("flops"))
    expected = (report.total - report.per_layer[0].flops) / report.total
    assert s1[FEATURES.index("rest")] == pytest.approx(expected, abs=1e-12)


def test_embedding_normalization(net, val):
    env = CompressionEnv(net, val, CostModel("flops"), prune="fine", alpha=None)
    env.reset()
    states = []
    for t in range(env.T):
        states.append(env.state)
        env.step(0.8 if t == 1 else 0.1)
    states = np.array(states)
    assert states[-1, FEATURES.index("t")] == 1.0
    assert states[2, FEATURES.index("a_prev")] == pytest.approx(0.8, abs=1e-3)
    flops = [r.flops for r in model_cost(net, CostModel("flops")).per_layer]
    assert states[int(np.argmax(flops)), FEATURES.index("flops")] == 1.0
    dense = [i for i, s in enumerate(env.layer_specs) if s.kind == "dense"]
    for i in dense:
        for f in ("h", "w", "stride", "k"):
            assert states[i, FEATURES.index(f)] == pytest.approx(1.0 / env._max[FEATURES.index(f)])


def test_done_and_no_further_steps(net, val):
    env = CompressionEnv(net, val, prune="channel", alpha=0.0)
    env.reset()
    for t in range(env.T):
        state, done = env.step(0.0)
        assert done == (t == env.T - 1)
    np.testing.assert_array_equal(state, 0)
    with pytest.raises(RuntimeError):
        env.step(0.0)
    out = env.outcome()
    assert len(out.actions) == env.T
    for a, b in zip(out.net.weighted_layers, net.weighted_layers):
        assert a.weight.tobytes() == b.weight.tobytes()
    assert out.cost_ratio == 1.0


@pytest.mark.parametrize("prune", ["fine", "channel"])
@pytest.mark.parametrize("kind", ["params", "flops"])
def test_random_episodes_meet_budget(net, val, prune, kind):
    rng = np.random.default_rng(1)
    for alpha in (0.3, 0.5, 0.7):
        env = CompressionEnv(net, val, CostModel(kind), prune=prune, alpha=alpha)
        for _ in range(50):
            env.reset()
            for a in rng.random(env.T):
                env.step(a)
            ratio = model_cost(env.net, CostModel(kind), baseline=net).ratio_vs_baseline
            assert ratio <= 1 - alpha + 1e-12
            # tracker bookkeeping equals a from-scratch recomputation
            assert env.tracker.reduced_fraction() == pytest.approx(1 - ratio, abs=1e-12)


def test_channel_accounting_is_exact_for_latency(net, val):
    table = synthetic_latency_table(net)
    model = CostModel("latency", table)
    env = CompressionEnv(net, val, model, prune="channel", alpha=0.4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        env.reset()
        for a in rng.random(env.T):
            env.step(a)
        assert env.tracker.current_cost == pytest.approx(model_cost(env.net, model).total, rel=1e-12)
        assert env.tracker.current_cost <= 0.6 * env.tracker.w_all * (1 + 1e-9)


def test_state_bounds_over_many_episodes(net, val):
    rng = np.random.default_rng(2)
    envs = [CompressionEnv(net, val, CostModel(k), prune=p, alpha=a)
            for p in ("fine", "channel") for k in ("params", "flops") for a in (None, 0.5)]
    count = 0
    for i in range(2400):
        env = envs[i % len(envs)]
        s = env.reset()
        done = False
        reduced = 0.0
        while not done:
            assert np.all((s >= 0) & (s <= 1))
            assert s[FEATURES.index("reduced")] >= reduced - 1e-12
            reduced = s[FEATURES.index("reduced")]
            s, done = env.step(rng.random())
        count += 1
    assert count == 2400


def test_infeasible_alpha_fails_at_construction(net, val):
    with pytest.raises(InfeasibleBudget):
        CompressionEnv(net, val, CostModel("flops"), prune="channel", alpha=0.95)
    with pytest.raises(InfeasibleBudget):
        CompressionEnv(net, val, CostModel("params"), prune="fine", alpha=0.95, a_max=0.8, a_max_dense=0.8)


def test_fine_mode_uses_dense_cap(net, val):
    env = CompressionEnv(net, val, CostModel("params"), prune="fine", alpha=None)
    out = env.run_policy([1.0] * env.T)
    dense = [i for i, s in enumerate(env.layer_specs) if s.kind == "dense"]
    for i in range(env.T):
        cap = 0.98 if i in dense else 0.8
        n = env.layer_specs[i].weight_count
        assert out.actions[i] == math.floor(cap * n + 1e-9) / n


def test_state_mask_zeroes_features(net, val):
    mask = np.ones(11)
    mask[[0, 8]] = 0
    env = CompressionEnv(net, val, prune="channel", alpha=0.5, state_mask=mask)
    env.reset()
    s, _ = env.step(0.3)
    s, _ = env.step(0.3)
    assert s[0] == 0 and s[8] == 0
    assert s[1] > 0


def test_reward_subset_is_fixed(net, val):
    env = CompressionEnv(net, val, prune="channel", alpha=0.5, reward_subset=15, subset_seed=3)
    other = CompressionEnv(net, val, prune="channel", alpha=0.5, reward_subset=15, subset_seed=3)
    assert len(env.val) == 15
    assert env.val.images.tobytes() == other.val.images.tobytes()
    a = env.run_policy([0.2] * env.T)
    b = env.run_policy([0.2] * env.T)
    assert a.val_acc == b.val_acc


# -- rewards -------------------------------------------------------------------------


def test_reward_examples():
    assert reward_value(0.864, 1e6, 1e6, "r_err") == pytest.approx(-0.136)
    assert reward_value(1.0, 12345, 77, "r_flops") == 0.0
    assert reward_value(0.9, 5, 10 ** 6, "r_param") == pytest.approx(-0.1 * math.log(1e6))
    assert reward_value(0.9, 5, 10 ** 6, "r_param") == pytest.approx(-1.38155, abs=1e-5)
    with pytest.raises(ValueError):
        reward_value(0.5, 1, 100, "r_flops")
    with pytest.raises(ValueError):
        RewardSpec("r_latency")


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 5000), data=st.data(), size=st.integers(2, 10 ** 8))
def test_reward_monotone_in_accuracy(n, data, size):
    # accuracies are correct-counts over a validation split
    k2 = data.draw(st.integers(1, n))
    k1 = data.draw(st.integers(0, k2 - 1))
    a1, a2 = k1 / n, k2 / n
    for kind in ("r_err", "r_flops", "r_param"):
        assert reward_value(a1, size, size, kind) < reward_value(a2, size, size, kind)


def test_reward_from_outcome(net, val):
    report = model_cost(net, CostModel("flops"))
    out = EpisodeOutcome([0.0] * 6, [0.0] * 6, 0.75, report, 0.0)
    assert reward(out, RewardSpec("r_flops")) == pytest.approx(-0.25 * math.log(report.totals["flops"]))
