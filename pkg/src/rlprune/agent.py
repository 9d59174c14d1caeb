"""DDPG actor-critic for a scalar action in [0, 1].

Exploration draws from a normal truncated to [0, 1] around the actor's
output. Every transition of an episode carries that episode's terminal
reward, and targets subtract a moving-average reward baseline before
bootstrapping with gamma = 1 by default.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from ._io import atomic_write_bytes
from .errors import FormatError, NumericError
from .nn import WEIGHT_MAGIC, WEIGHT_VERSION, read_weight_arrays

AGENT_SECTION = b"AGNT"


@dataclass
class AgentConfig:
    hidden: int = 300
    tau: float = 0.01
    gamma: float = 1.0
    batch: int = 64
    buffer_size: int = 2000
    sigma0: float = 0.5
    sigma_decay: float = 0.98
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    baseline_ema_decay: float = 0.95
    grad_clip: float = 10.0
    reward_mode: str = "broadcast"  # or "terminal-only"
    updates_per_step: int = 1

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if self.reward_mode not in ("broadcast", "terminal-only"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")


def truncated_normal(rng, mean, sigma, low=0.0, high=1.0):
    """Rejection sample from N(mean, sigma^2) restricted to [low, high]."""
    if sigma == 0:
        return float(min(max(mean, low), high))
    while True:
        x = rng.normal(mean, sigma)
        if low <= x <= high:
            return float(x)


def sigma_schedule(episode, explore, sigma0=0.5, decay=0.98):
    """Constant ``sigma0`` while exploring, then ``sigma0 * decay**k`` for the k-th exploit episode."""
    if episode < explore:
        return sigma0
    return sigma0 * decay ** (episode - explore)


# ---------------------------------------------------------------------------
# tiny MLP pieces


def _uniform(rng, fan_in, shape, scale=None):
    bound = 1.0 / np.sqrt(fan_in) if scale is None else scale
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, rng, n_in, n_out, scale=None):
        self.W = _uniform(rng, n_in, (n_in, n_out), scale)
        self.b = _uniform(rng, n_in, (n_out,), scale)

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        return x @ self.W + self.b

    def backward(self, x, dout):
        return dout @ self.W.T, [x.T @ dout, dout.sum(axis=0)]


class Actor:
    """state -> 300 -> 300 -> sigmoid."""

    def __init__(self, rng, state_dim=11, hidden=300):
        self.l1 = Linear(rng, state_dim, hidden)
        self.l2 = Linear(rng, hidden, hidden)
        self.l3 = Linear(rng, hidden, 1, scale=3e-3)
        self.layers = [self.l1, self.l2, self.l3]

    def params(self):
        return [p for l in self.layers for p in l.params()]

    def forward(self, s, cache=False):
        z1 = self.l1.forward(s)
        h1 = np.maximum(z1, 0)
        z2 = self.l2.forward(h1)
        h2 = np.maximum(z2, 0)
        z3 = self.l3.forward(h2)
        a = 1.0 / (1.0 + np.exp(-z3))
        return (a, (s, z1, h1, z2, h2, a)) if cache else a

    def backward(self, da, cache):
        s, z1, h1, z2, h2, a = cache
        dz3 = da * a * (1 - a)
        dh2, g3 = self.l3.backward(h2, dz3)
        dh1, g2 = self.l2.backward(h1, dh2 * (z2 > 0))
        _, g1 = self.l1.backward(s, dh1 * (z1 > 0))
        return g1 + g2 + g3


class Critic:
    """state -> 300; concat(hidden, action) -> 300 -> linear Q."""

    def __init__(self, rng, state_dim=11, hidden=300):
        self.l1 = Linear(rng, state_dim, hidden)
        self.l2 = Linear(rng, hidden + 1, hidden)
        self.l3 = Linear(rng, hidden, 1, scale=3e-3)
        self.layers = [self.l1, self.l2, self.l3]

    def params(self):
        return [p for l in self.layers for p in l.params()]

    def forward(self, s, a, cache=False):
        z1 = self.l1.forward(s)
        h1 = np.maximum(z1, 0)
        x2 = np.concatenate([h1, a], axis=1)
        z2 = self.l2.forward(x2)
        h2 = np.maximum(z2, 0)
        q = self.l3.forward(h2)
        return (q, (s, z1, x2, z2, h2)) if cache else q

    def backward(self, dq, cache):
        """Parameter gradients and dQ/da."""
        s, z1, x2, z2, h2 = cache
        dh2, g3 = self.l3.backward(h2, dq)
        dx2, g2 = self.l2.backward(x2, dh2 * (z2 > 0))
        dh1, da = dx2[:, :-1], dx2[:, -1:]
        _, g1 = self.l1.backward(s, dh1 * (z1 > 0))
        return g1 + g2 + g3, da


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def _copy_into(dst, src):
    for d, s in zip(dst.params(), src.params()):
        d[...] = s


# ---------------------------------------------------------------------------
# replay


class ReplayBuffer:
    """FIFO ring buffer of ``(s, a, r, s_next, terminal)``."""

    def __init__(self, capacity, state_dim):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, 1))
        self.r = np.zeros((capacity, 1))
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros((capacity, 1))
        self.size = 0
        self.head = 0
        self.total_added = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, terminal):
        if not 0 <= a <= 1:
            raise ValueError("stored actions must lie in [0, 1]")
        i = self.head
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, float(terminal)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def sample(self, rng, n):
        idx = rng.choice(self.size, size=n, replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx]

    def oldest(self):
        """Index order from oldest to newest entry."""
        start = self.head if self.size == self.capacity else 0
        return [(start + k) % self.capacity for k in range(self.size)]


# ---------------------------------------------------------------------------
# agent


class DDPGAgent:
    learns = True

    def __init__(self, state_dim=11, config=None, seed=0):
        self.config = config or AgentConfig()
        cfg = self.config
        self.state_dim = state_dim
        init_ss, noise_ss, replay_ss = np.random.SeedSequence(seed).spawn(3)
        init = np.random.default_rng(init_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.replay_rng = np.random.default_rng(replay_ss)
        self.actor = Actor(init, state_dim, cfg.hidden)
        self.critic = Critic(init, state_dim, cfg.hidden)
        self.actor_target = Actor(init, state_dim, cfg.hidden)
        self.critic_target = Critic(init, state_dim, cfg.hidden)
        _copy_into(self.actor_target, self.actor)
        _copy_into(self.critic_target, self.critic)
        self.actor_opt = Adam(self.actor.params(), cfg.lr_actor)
        self.critic_opt = Adam(self.critic.params(), cfg.lr_critic)
        self.buffer = ReplayBuffer(cfg.buffer_size, state_dim)
        self.baseline = None
        self.num_updates = 0

    def mu(self, state):
        s = np.asarray(state, dtype=float).reshape(1, -1)
        return float(self.actor.forward(s)[0, 0])

    def act(self, state, sigma):
        """Sample TN(mu(s), sigma^2, 0, 1); ``sigma = 0`` gives the clipped mean."""
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        return truncated_normal(self.noise_rng, self.mu(state), sigma)

    # -- replay and baseline ---------------------------------------------------

    def store_episode(self, transitions, R):
        """Write ``(s, a, s_next)`` steps with reward R; the last one is terminal."""
        last = len(transitions) - 1
        for i, (s, a, s2) in enumerate(transitions):
            r = R if (self.config.reward_mode == "broadcast" or i == last) else 0.0
            self.buffer.add(s, a, r, s2, i == last)

    def observe_episode_reward(self, R):
        decay = self.config.baseline_ema_decay
        self.baseline = R if self.baseline is None else decay * self.baseline + (1 - decay) * R

    # -- learning -------------------------------------------------------------

    def targets(self, r, s2, done):
        b = 0.0 if self.baseline is None else self.baseline
        q_next = self.critic_target.forward(s2, self.actor_target.forward(s2))
        return r - b + self.config.gamma * (1.0 - done) * q_next

    def critic_loss_and_grads(self, s, a, y):
        q, cache = self.critic.forward(s, a, cache=True)
        diff = q - y
        loss = float(np.mean(diff ** 2))
        grads, _ = self.critic.backward(2.0 * diff / len(diff), cache)
        return loss, grads

    def update(self):
        """One DDPG step on a uniform minibatch; returns ``(critic_loss, actor_objective)``."""
        cfg = self.config
        if len(self.buffer) < cfg.batch:
            return None
        s, a, r, s2, done = self.buffer.sample(self.replay_rng, cfg.batch)
        y = self.targets(r, s2, done)
        critic_loss, grads = self.critic_loss_and_grads(s, a, y)
        if not np.isfinite(critic_loss):
            raise NumericError(f"non-finite critic loss after {self.num_updates} updates")
        grads, _ = clip_by_global_norm(grads, cfg.grad_clip)
        self.critic_opt.step(grads)

        mu, acache = self.actor.forward(s, cache=True)
        q, ccache = self.critic.forward(s, mu, cache=True)
        objective = float(q.mean())
        _, dq_da = self.critic.backward(-np.ones_like(q) / len(q), ccache)
        agrads = self.actor.backward(dq_da, acache)
        agrads, _ = clip_by_global_norm(agrads, cfg.grad_clip)
        self.actor_opt.step(agrads)

        self.soft_update(cfg.tau)
        self.num_updates += 1
        return critic_loss, objective

    def soft_update(self, tau):
        if not 0 <= tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        for tgt, src in ((self.actor_target, self.actor), (self.critic_target, self.critic)):
            for pt, ps in zip(tgt.params(), src.params()):
                pt *= 1.0 - tau
                pt += tau * ps

    # -- checkpoint -----------------------------------------------------------

    def _nets(self):
        return [self.actor, self.critic, self.actor_target, self.critic_target]

    def to_bytes(self):
        layers = [l for net in self._nets() for l in net.layers]
        parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(layers))]
        for l in layers:
            n_in, n_out = l.W.shape
            parts.append(struct.pack("<4I", n_out, n_in, 1, 1))
            parts.append(np.ascontiguousarray(l.W.T, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(l.b, dtype="<f4").tobytes())
        header = json.dumps({"config": asdict(self.config), "baseline": self.baseline,
                             "state_dim": self.state_dim, "num_updates": self.num_updates}).encode()
        parts += [AGENT_SECTION, struct.pack("<I", len(header)), header]
        return b"".join(parts)

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            buf = fh.read()
        arrays, pos = read_weight_arrays(buf)
        if buf[pos:pos + 4] != AGENT_SECTION or len(buf) < pos + 8:
            raise FormatError("agent checkpoint lacks its header section")
        (length,) = struct.unpack_from("<I", buf, pos + 4)
        meta = json.loads(buf[pos + 8:pos + 8 + length].decode())
        agent = cls(meta["state_dim"], AgentConfig(**meta["config"]))
        layers = [l for net in agent._nets() for l in net.layers]
        if len(layers) != len(arrays):
            raise FormatError("agent checkpoint has the wrong number of layers")
        for l, (dims, w, b) in zip(layers, arrays):
            if (dims[1], dims[0]) != l.W.shape:
                raise FormatError("agent checkpoint layer shape mismatch")
            l.W[...] = w.reshape(dims[0], dims[1]).T
            l.b[...] = b
        agent.baseline = meta["baseline"]
        agent.num_updates = meta["num_updates"]
        return agent


class RandomAgent(DDPGAgent):
    """Same sampling path as :class:`DDPGAgent` with a frozen, untrained actor."""

    learns = False

    def update(self):
        return None

    def store_episode(self, transitions, R):
        pass


def run_bandit(seed=0, episodes=300, explore=100, optimum=0.7, updates_per_step=5, state_dim=11):
    """One-step bandit with reward ``-(a - optimum)^2``; returns the final deterministic action.

    A learning sanity check: each episode is a single step from a fixed state.
    """
    agent = DDPGAgent(state_dim, AgentConfig(updates_per_step=updates_per_step), seed=seed)
    s = np.full(state_dim, 0.5)
    terminal = np.zeros(state_dim)
    for ep in range(episodes):
        a = agent.act(s, sigma_schedule(ep, explore, agent.config.sigma0, agent.config.sigma_decay))
        if ep >= explore:
            for _ in range(updates_per_step):
                agent.update()
        R = -(a - optimum) ** 2
        agent.store_episode([(s, a, terminal)], R)
        agent.observe_episode_reward(R)
    return agent.mu(s)
