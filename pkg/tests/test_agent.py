import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlprune.agent import (
    Adam, AgentConfig, Critic, DDPGAgent, RandomAgent, ReplayBuffer, clip_by_global_norm, run_bandit,
    sigma_schedule, truncated_normal,
)
from rlprune.errors import FormatError


# -- exploration -------------------------------------------------------------------


def test_truncated_normal_bounds_and_mean():
    rng = np.random.default_rng(0)
    samples = np.array([truncated_normal(rng, 0.5, 0.5) for _ in range(100_000)])
    assert samples.min() >= 0 and samples.max() <= 1
    high = np.array([truncated_normal(rng, 0.9, 0.5) for _ in range(20_000)])
    assert high.mean() < 0.9


@settings(max_examples=100, deadline=None)
@given(mean=st.floats(-2, 3), seed=st.integers(0, 1000))
def test_sigma_zero_is_clamped_mean(mean, seed):
    rng = np.random.default_rng(seed)
    assert truncated_normal(rng, mean, 0.0) == min(max(mean, 0.0), 1.0)


def test_act_is_deterministic_at_sigma_zero():
    agent = DDPGAgent(seed=1)
    s = np.linspace(0, 1, 11)
    assert agent.act(s, 0.0) == agent.mu(s)
    assert 0 < agent.mu(s) < 1
    assert abs(agent.mu(s) - 0.5) < 0.01  # near-zero final layer: sigmoid midpoint
    with pytest.raises(ValueError):
        agent.act(s, -0.1)


def test_sigma_schedule():
    assert sigma_schedule(0, 100) == 0.5
    assert sigma_schedule(99, 100) == 0.5
    assert sigma_schedule(100, 100) == 0.5
    assert sigma_schedule(200, 100) == pytest.approx(0.5 * 0.98 ** 100)
    assert sigma_schedule(200, 100) == pytest.approx(0.0663, abs=1e-4)
    sig = [sigma_schedule(e, 100) for e in range(100, 400)]
    assert all(a > b for a, b in zip(sig, sig[1:]))


# -- replay --------------------------------------------------------------------


def test_replay_fifo_and_sampling():
    buf = ReplayBuffer(5, 2)
    for i in range(7):
        buf.add(np.full(2, i), i / 10, -i, np.zeros(2), False)
    assert len(buf) == 5
    order = buf.oldest()
    np.testing.assert_array_equal(buf.s[order, 0], [2, 3, 4, 5, 6])
    s, a, r, s2, done = buf.sample(np.random.default_rng(0), 5)
    assert sorted(s[:, 0]) == [2, 3, 4, 5, 6]  # without replacement
    with pytest.raises(ValueError):
        buf.add(np.zeros(2), 1.5, 0, np.zeros(2), True)


def test_store_episode_modes():
    agent = DDPGAgent(seed=0)
    steps = [(np.full(11, t / 6), 0.1 * t, np.full(11, (t + 1) / 6)) for t in range(6)]
    agent.store_episode(steps, -0.3)
    assert len(agent.buffer) == 6
    np.testing.assert_array_equal(agent.buffer.r[:6, 0], -0.3)
    np.testing.assert_array_equal(agent.buffer.done[:6, 0], [0, 0, 0, 0, 0, 1])

    sparse = DDPGAgent(config=AgentConfig(reward_mode="terminal-only"), seed=0)
    sparse.store_episode(steps, -0.3)
    np.testing.assert_array_equal(sparse.buffer.r[:6, 0], [0, 0, 0, 0, 0, -0.3])


def test_buffer_evicts_oldest_episode_steps():
    agent = DDPGAgent(seed=0)
    steps = lambda k: [(np.full(11, k), 0.5, np.zeros(11)) for _ in range(6)]
    for k in range(334):  # 2004 transitions
        agent.store_episode(steps(k / 1000), -k)
    assert len(agent.buffer) == 2000
    # episode 0 (reward 0) lost its 4 oldest steps; the oldest survivor is its 5th
    assert agent.buffer.r[agent.buffer.oldest()[0], 0] == 0
    assert np.count_nonzero(agent.buffer.r[:, 0] == 0) == 2
    assert agent.buffer.r[agent.buffer.oldest()[-1], 0] == -333


# -- targets and critic ----------------------------------------------------------


def test_targets_arithmetic():
    agent = DDPGAgent(seed=0)
    agent.baseline = -0.12
    s2 = np.zeros((1, 11))
    y = agent.targets(np.array([[-0.1]]), s2, np.array([[1.0]]))
    assert y[0, 0] == pytest.approx(0.02)
    q_next = float(agent.critic_target.forward(s2, agent.actor_target.forward(s2))[0, 0])
    agent.critic_target.l3.b[...] += 0.05 - q_next  # make Q_target(s', mu'(s')) = 0.05
    y = agent.targets(np.array([[-0.1]]), s2, np.array([[0.0]]))
    assert y[0, 0] == pytest.approx(0.07)


def test_critic_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    agent = DDPGAgent(config=AgentConfig(hidden=16), seed=3)
    for layer in agent.critic.layers:  # give the output layer real weight
        layer.W[...] = rng.normal(scale=0.5, size=layer.W.shape)
    s = rng.random((8, 11))
    a = rng.random((8, 1))
    y = rng.normal(size=(8, 1))
    _, grads = agent.critic_loss_and_grads(s, a, y)
    worst = 0.0
    eps = 1e-5
    for p, g in zip(agent.critic.params(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in rng.choice(flat.size, size=min(25, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            up, _ = agent.critic_loss_and_grads(s, a, y)
            flat[i] = old - eps
            down, _ = agent.critic_loss_and_grads(s, a, y)
            flat[i] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(num - gflat[i]) / max(abs(num) + abs(gflat[i]), 1e-8))
    assert worst < 1e-3


def test_action_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    critic = Critic(rng, 11, 16)
    s, a = rng.random((4, 11)), rng.random((4, 1))
    q, cache = critic.forward(s, a, cache=True)
    _, da = critic.backward(np.ones_like(q), cache)
    eps = 1e-6
    num = (critic.forward(s, a + eps) - critic.forward(s, a - eps)) / (2 * eps)
    np.testing.assert_allclose(da, num, rtol=1e-4, atol=1e-10)


def test_update_needs_a_full_batch():
    agent = DDPGAgent(seed=0)
    agent.store_episode([(np.zeros(11), 0.5, np.zeros(11))] * 10, -1.0)
    assert agent.update() is None
    agent.store_episode([(np.zeros(11), 0.5, np.zeros(11))] * 60, -1.0)
    out = agent.update()
    assert out is not None and all(np.isfinite(out))
    assert agent.num_updates == 1


def test_gradient_clipping():
    grads = [np.full(3, 10.0), np.full(1, 10.0)]
    clipped, norm = clip_by_global_norm(grads, 10.0)
    assert norm == pytest.approx(20.0)
    assert np.sqrt(sum((g ** 2).sum() for g in clipped)) == pytest.approx(10.0)


def test_adam_descends_quadratic():
    x = np.array([3.0, -2.0])
    opt = Adam([x], lr=0.1)
    for _ in range(500):
        opt.step([2 * x])
    assert np.abs(x).max() < 1e-2


# -- soft update -------------------------------------------------------------------


def _gap(agent):
    return [t - o for t, o in zip(agent.actor_target.params() + agent.critic_target.params(),
                                  agent.actor.params() + agent.critic.params())]


def test_soft_update_endpoints_and_geometric_rate():
    agent = DDPGAgent(seed=0)
    for p in agent.actor.params() + agent.critic.params():
        p += 0.1
    before = [g.copy() for g in _gap(agent)]
    agent.soft_update(0.0)
    for b, g in zip(before, _gap(agent)):
        np.testing.assert_array_equal(b, g)
    agent.soft_update(0.01)
    agent.soft_update(0.01)
    for b, g in zip(before, _gap(agent)):
        np.testing.assert_allclose(b - g, (1 - 0.99 ** 2) * b, atol=1e-12)
    agent.soft_update(1.0)
    for g in _gap(agent):
        np.testing.assert_array_equal(g, 0)


# -- random agent, baseline, checkpoint ----------------------------------------------


def test_random_agent_shares_sampling_path():
    a, r = DDPGAgent(seed=5), RandomAgent(seed=5)
    states = np.random.default_rng(0).random((6, 11))
    assert [a.act(s, 0.5) for s in states] == [r.act(s, 0.5) for s in states]
    snapshot = [p.copy() for p in r.actor.params()]
    r.store_episode([(states[0], 0.5, states[1])] * 100, -1.0)
    assert r.update() is None and len(r.buffer) == 0
    for p, q in zip(snapshot, r.actor.params()):
        np.testing.assert_array_equal(p, q)


def test_baseline_ema():
    agent = DDPGAgent(seed=0)
    agent.observe_episode_reward(-1.0)
    assert agent.baseline == -1.0
    agent.observe_episode_reward(0.0)
    assert agent.baseline == pytest.approx(-0.95)


def test_checkpoint_roundtrip(tmp_path):
    agent = DDPGAgent(config=AgentConfig(hidden=32, tau=0.05), seed=2)
    agent.store_episode([(np.random.default_rng(i).random(11), 0.3, np.zeros(11)) for i in range(70)], -0.4)
    agent.observe_episode_reward(-0.4)
    agent.update()
    path = tmp_path / "agent.amcw"
    agent.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"AMCW"
    back = DDPGAgent.load(path)
    assert back.config == agent.config
    assert back.baseline == agent.baseline and back.num_updates == 1
    s = np.linspace(0, 1, 11)
    assert back.mu(s) == pytest.approx(agent.mu(s), rel=1e-5)  # float32 storage
    for net_a, net_b in zip(agent._nets(), back._nets()):
        for p, q in zip(net_a.params(), net_b.params()):
            np.testing.assert_array_equal(p.astype(np.float32), q)
    (tmp_path / "cut.amcw").write_bytes(raw[:-20])
    with pytest.raises((FormatError, ValueError)):
        DDPGAgent.load(tmp_path / "cut.amcw")


def test_config_validation():
    for bad in (dict(tau=0), dict(gamma=1.5), dict(sigma0=0), dict(reward_mode="dense")):
        with pytest.raises(ValueError):
            AgentConfig(**bad)


@pytest.mark.parametrize("seed", [0, 1])
def test_bandit_converges(seed):
    assert abs(run_bandit(seed) - 0.7) <= 0.05
