"""DQN referee that nudges learning rates and the aux-loss weight once per round."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import AdamW, MlpStack, Module

LR_MIN, LR_MAX = 1e-6, 1.0
N_ACTIONS = 7
ACTION_NAMES = ("noop", "eta_g_up", "eta_g_down", "eta_d_up", "eta_d_down", "aux_up", "aux_down")
INVERSE_ACTION = {0: 0, 1: 2, 2: 1, 3: 4, 4: 3, 5: 6, 6: 5}


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


def observation(metrics, eta_g, eta_d):
    """8-vector the referee sees; every entry is bounded."""
    return np.array([
        metrics.d_acc_real,
        metrics.d_acc_fake,
        math.tanh(metrics.L_G),
        math.tanh(metrics.L_D),
        math.tanh(metrics.L_FM),
        math.log10(eta_g) / 6 + 1,
        math.log10(eta_d) / 6 + 1,
        min(max(metrics.quality, 0.0), 1.0),
    ], dtype=np.float64)


def apply_action(action, eta_g, eta_d, lambda_aux, lr_min=LR_MIN, lr_max=LR_MAX):
    """Return the adjusted ``(eta_g, eta_d, lambda_aux)`` after clamping."""
    def lr(x):
        return min(max(x, lr_min), lr_max)
    if action == 1:
        eta_g = lr(eta_g * 1.2)
    elif action == 2:
        eta_g = lr(eta_g / 1.2)
    elif action == 3:
        eta_d = lr(eta_d * 1.2)
    elif action == 4:
        eta_d = lr(eta_d / 1.2)
    elif action == 5:
        lambda_aux = min(max(lambda_aux * 1.5, 0.0), 1.0)
    elif action == 6:
        lambda_aux = min(max(lambda_aux / 1.5, 0.0), 1.0)
    elif action != 0:
        raise ValueError(f"unknown action {action}")
    return eta_g, eta_d, lambda_aux


def compute_reward(prev, curr, balance_point=0.7):
    """Quality gain, minus distance of D accuracy from the balance point,
    plus a small bonus when the generator loss fell; clipped to [-1, 1]."""
    r = (curr.quality - prev.quality) - 0.5 * abs(curr.d_acc - balance_point) \
        + 0.1 * float(np.sign(prev.L_G - curr.L_G))
    return float(min(max(r, -1.0), 1.0))


def quality_only_reward(prev, curr):
    return float(min(max(curr.quality - prev.quality, -1.0), 1.0))


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform sampling without replacement."""

    def __init__(self, capacity=10000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items = [None] * capacity
        self._start = 0
        self._size = 0

    def __len__(self):
        return self._size

    def __getitem__(self, i):
        if not 0 <= i < self._size:
            raise IndexError(i)
        return self._items[(self._start + i) % self.capacity]

    def items(self):
        return [self[i] for i in range(self._size)]

    def append(self, t):
        if self._size < self.capacity:
            self._items[(self._start + self._size) % self.capacity] = t
            self._size += 1
        else:
            self._items[self._start] = t
            self._start = (self._start + 1) % self.capacity

    def sample(self, batch, rng):
        if batch > self._size:
            raise ValueError(f"cannot draw {batch} from {self._size} transitions")
        idx = rng.choice(self._size, size=batch, replace=False)
        return [self[int(i)] for i in idx]


def store_and_sample(buffer, t, batch, rng, warmup=500):
    """Append ``t``; return a uniform batch, or ``[]`` until ``warmup`` transitions exist."""
    buffer.append(t)
    if len(buffer) < max(warmup, batch):
        return []
    return buffer.sample(batch, rng)


class QNetwork(Module):
    """Online/target MLP pair with its optimizer and update counter."""

    def __init__(self, rng, sizes=(8, 64, 64, N_ACTIONS), lr=1e-3, gamma=0.95, sync_every=200):
        self.online = MlpStack(list(sizes), rng, ["relu"] * (len(sizes) - 2) + ["none"])
        self._target = copy.deepcopy(self.online)
        self._opt = AdamW(self.online.parameters(), lr=lr, weight_decay=0.0)
        self._gamma = gamma
        self._sync_every = sync_every
        self._updates = 0

    @property
    def target(self):
        return self._target

    @property
    def optimizer(self):
        return self._opt

    @property
    def gamma(self):
        return self._gamma

    @property
    def updates(self):
        return self._updates

    @updates.setter
    def updates(self, n):
        self._updates = int(n)

    def q_values(self, states, target=False):
        net = self._target if target else self.online
        with T.no_grad():
            return net(T.tensor(np.atleast_2d(states))).data.astype(np.float64)

    def target_state(self):
        return self._target.state_dict()

    def load_target_state(self, state):
        self._target.load_state_dict(state)


def select_action(obs, qnet, epsilon, rng):
    """Epsilon-greedy; greedy ties go to the lowest action id."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must be in [0, 1]")
    n = qnet.online.layers[-1].weight.shape[0]
    if rng.random() < epsilon:
        return int(rng.integers(n))
    return int(np.argmax(qnet.q_values(obs)[0]))


def dqn_update(qnet, batch, lr=None):
    """One step on the mean squared TD error; returns the pre-step loss."""
    if not batch:
        raise ValueError("empty batch")
    s = np.stack([t.state for t in batch])
    a = np.array([t.action for t in batch])
    r = np.array([t.reward for t in batch], dtype=np.float64)
    s2 = np.stack([t.next_state for t in batch])
    done = np.array([t.done for t in batch], dtype=np.float64)
    y = r + (1 - done) * qnet.gamma * qnet.q_values(s2, target=True).max(axis=1)
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite TD target")
    if lr is not None:
        qnet.optimizer.lr = lr
    qnet.optimizer.zero_grad()
    q = qnet.online(T.tensor(s))
    diff = q[np.arange(len(batch)), a] - T.tensor(y)
    loss = T.mean(diff * diff)
    loss.backward()
    qnet.optimizer.step()
    qnet.updates += 1
    if qnet.updates % qnet._sync_every == 0:
        sync_target(qnet)
    return float(loss.data)


def td_targets(qnet, batch):
    r = np.array([t.reward for t in batch], dtype=np.float64)
    done = np.array([t.done for t in batch], dtype=np.float64)
    s2 = np.stack([t.next_state for t in batch])
    return r + (1 - done) * qnet.gamma * qnet.q_values(s2, target=True).max(axis=1)


def sync_target(qnet):
    qnet.load_target_state(qnet.online.state_dict())


def epsilon_at(rnd, total, eps_start=1.0, eps_end=0.05, decay_frac=0.5):
    span = max(decay_frac * total, 1)
    if rnd >= span:
        return eps_end
    return max(eps_end, eps_start - (eps_start - eps_end) * rnd / span)


@dataclass
class BalanceConfig:
    batch: int = 64
    warmup: int = 500
    capacity: int = 10000
    gamma: float = 0.95
    lr: float = 1e-3
    sync_every: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5
    reward: str = "shaped"         # shaped | quality
    lr_min: float = LR_MIN
    lr_max: float = LR_MAX


class Balancer:
    """Round-level referee: observe, learn from the previous transition, act."""

    def __init__(self, cfg, rng, net_rng):
        self.cfg = cfg
        self.rng = rng
        self.qnet = QNetwork(net_rng, lr=cfg.lr, gamma=cfg.gamma, sync_every=cfg.sync_every)
        self.buffer = ReplayBuffer(cfg.capacity)
        self.prev_obs = None
        self.prev_action = None
        self.prev_metrics = None

    def reward(self, prev, curr):
        return quality_only_reward(prev, curr) if self.cfg.reward == "quality" else compute_reward(prev, curr)

    def step(self, state, metrics, done):
        """Returns ``(action, reward, epsilon, td_loss)`` and mutates ``state``'s knobs."""
        obs = observation(metrics, state.eta_g, state.eta_d)
        reward = 0.0
        td = float("nan")
        if self.prev_obs is not None:
            reward = self.reward(self.prev_metrics, metrics)
            t = Transition(self.prev_obs, self.prev_action, reward, obs, done)
            batch = store_and_sample(self.buffer, t, self.cfg.batch, self.rng, self.cfg.warmup)
            if batch:
                td = dqn_update(self.qnet, batch)
        eps = epsilon_at(state.round, state.total_rounds, self.cfg.eps_start, self.cfg.eps_end,
                         self.cfg.eps_decay_frac)
        if len(self.buffer) < max(self.cfg.warmup, self.cfg.batch):
            eps = 1.0       # the untrained net's argmax would be one fixed action
        action = 0
        if not done:
            action = select_action(obs, self.qnet, eps, self.rng)
            state.eta_g, state.eta_d, state.lambda_aux = apply_action(
                action, state.eta_g, state.eta_d, state.lambda_aux, self.cfg.lr_min, self.cfg.lr_max)
        self.prev_obs, self.prev_action, self.prev_metrics = obs, action, metrics
        return action, reward, eps, td
