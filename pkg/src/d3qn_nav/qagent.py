"""DQN, double DQN and dueling double DQN over the branched action space.

The network predicts Q-values for the 2 linear-velocity actions and the 5
angular-velocity actions in parallel. Each branch gets its own TD target
built from the shared scalar reward.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import neuro
from .errors import ConfigError, TrainingError, UsageError
from .geom_sim import N_ANGULAR, N_LINEAR, ActionPair
from .neuro import NetParams, conv1d, dense, relu

VARIANTS = ("dqn", "ddqn", "d3qn")
PRESETS = ("table", "dense", "linear")
N_Q = N_LINEAR + N_ANGULAR


class QOutput(NamedTuple):
    q_linear: np.ndarray
    q_angular: np.ndarray


class DuelingHeads(NamedTuple):
    value: np.ndarray
    adv_linear: np.ndarray
    adv_angular: np.ndarray


@dataclass
class AgentConfig:
    variant: str = "d3qn"
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_horizon: int = 20_000
    sync_period: int = 2_000
    batch_size: int = 64
    warmup: int = 1_000
    buffer_capacity: int = 50_000
    lr: float = 1e-4
    huber_delta: float = 1.0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if not (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1):
            raise ConfigError("epsilon bounds must lie in [0, 1]")
        for name in ("eps_horizon", "sync_period", "batch_size", "buffer_capacity"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.warmup < self.batch_size:
            raise ConfigError("warmup must be at least one batch")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------
# Network presets
# ----------------------------------------------------------------------


def network_layout(preset: str, variant: str, input_size: int, stack_k: int = 1):
    """Return ``(trunk, heads)`` for a preset.

    ``table`` mirrors the three-conv / 512-unit dueling layout on a 1D scan,
    ``dense`` is a cheap MLP, ``linear`` has no hidden layer at all.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if preset == "table":
        length = input_size // stack_k
        l1 = neuro.conv_out_len(length, 10, 4)
        l2 = neuro.conv_out_len(l1, 4, 2)
        l3 = neuro.conv_out_len(l2, 3, 1)
        if l3 < 1:
            raise ConfigError(f"scan of {length} rays is too short for the table preset")
        trunk = [conv1d(10, stack_k, 32, 4), relu(), conv1d(4, 32, 64, 2), relu(),
                 conv1d(3, 64, 64, 1), relu()]
        feat, hidden = 64 * l3, 512
    elif preset == "dense":
        trunk = [dense(input_size, 128), relu(), dense(128, 128), relu()]
        feat, hidden = 128, 64
    elif preset == "linear":
        trunk, feat, hidden = [], input_size, 0
    else:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")

    def stream(n_out):
        if hidden == 0:
            return [dense(feat, n_out)]
        return [dense(feat, hidden), relu(), dense(hidden, n_out)]

    if variant == "d3qn":
        heads = [("advantage", stream(N_Q)), ("value", stream(1))]
    else:
        heads = [("q", stream(N_Q))]
    return trunk, heads


def build_network(preset, variant, input_size, rng=None, stack_k: int = 1) -> NetParams:
    trunk, heads = network_layout(preset, variant, input_size, stack_k)
    return neuro.init_params(input_size, trunk, heads, rng=rng)


# ----------------------------------------------------------------------
# Q-value plumbing
# ----------------------------------------------------------------------


def dueling_combine(heads: DuelingHeads) -> QOutput:
    """``Q_b(a) = V + A_b(a) - mean(A_b)``, mean taken per branch."""
    v = np.asarray(heads.value)
    al = np.asarray(heads.adv_linear)
    aa = np.asarray(heads.adv_angular)
    if v.ndim and v.ndim == al.ndim - 1:
        v = v[..., None]
    return QOutput(
        v + (al - al.mean(axis=-1, keepdims=True)),
        v + (aa - aa.mean(axis=-1, keepdims=True)),
    )


def split_output(out: np.ndarray, variant: str) -> QOutput:
    """Turn raw network output (batch, width) into per-branch Q-values."""
    if variant == "d3qn":
        heads = DuelingHeads(out[:, N_Q : N_Q + 1], out[:, :N_LINEAR], out[:, N_LINEAR:N_Q])
        return dueling_combine(heads)
    return QOutput(out[:, :N_LINEAR], out[:, N_LINEAR:N_Q])


def q_batch(params: NetParams, obs: np.ndarray, variant: str):
    out, tape = neuro.forward(params, np.asarray(obs).reshape(-1, params.input_size))
    return split_output(out, variant), tape


def select_action(q: QOutput, epsilon: float, rng: np.random.Generator) -> ActionPair:
    """Per-branch epsilon-greedy; greedy ties go to the lowest index."""
    idx = []
    for branch in (q.q_linear, q.q_angular):
        if epsilon > 0 and rng.random() < epsilon:
            idx.append(int(rng.integers(len(branch))))
        else:
            idx.append(int(np.argmax(branch)))
    return ActionPair(*idx)


def epsilon_at(global_step: int, start: float = 1.0, end: float = 0.05, horizon: int = 20_000) -> float:
    if global_step < 0:
        raise UsageError("global_step must be >= 0")
    frac = min(global_step / horizon, 1.0)
    return start + frac * (end - start)


def branch_targets(reward, terminal, q_next_online, q_next_target, gamma: float, variant: str):
    """TD targets for one branch.

    dqn bootstraps with the target net's max; ddqn/d3qn pick the action with
    the online net and evaluate it with the target net. Terminal rows get the
    bare reward.
    """
    reward = np.asarray(reward, dtype=np.float64)
    terminal = np.asarray(terminal, dtype=bool)
    q_next_target = np.asarray(q_next_target, dtype=np.float64)
    if variant == "dqn":
        boot = q_next_target.max(axis=-1)
    else:
        best = np.argmax(np.asarray(q_next_online), axis=-1)
        boot = np.take_along_axis(q_next_target, best[..., None], axis=-1)[..., 0]
    return np.where(terminal, reward, reward + gamma * boot)


# ----------------------------------------------------------------------
# Replay
# ----------------------------------------------------------------------


class Transition(NamedTuple):
    obs: np.ndarray
    action: ActionPair
    reward: float
    next_obs: np.ndarray
    terminal: bool


class Batch(NamedTuple):
    obs: np.ndarray
    lin: np.ndarray
    ang: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)

    @classmethod
    def from_transitions(cls, items) -> "Batch":
        return cls(
            np.stack([t.obs for t in items]).astype(np.float32),
            np.array([t.action[0] for t in items], dtype=np.int64),
            np.array([t.action[1] for t in items], dtype=np.int64),
            np.array([t.reward for t in items], dtype=np.float64),
            np.stack([t.next_obs for t in items]).astype(np.float32),
            np.array([t.terminal for t in items], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored column-wise."""

    def __init__(self, capacity: int, obs_size: int) -> None:
        self.capacity = capacity
        self.obs_size = obs_size
        self.obs = np.zeros((capacity, obs_size), dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_size), dtype=np.float32)
        self.lin = np.zeros(capacity, dtype=np.int64)
        self.ang = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity, dtype=np.float64)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        i = self.cursor
        if len(t.obs) != self.obs_size or len(t.next_obs) != self.obs_size:
            raise UsageError("observation length does not match the buffer")
        self.obs[i] = t.obs
        self.next_obs[i] = t.next_obs
        self.lin[i], self.ang[i] = t.action
        self.reward[i] = t.reward
        self.terminal[i] = t.terminal
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        """Uniform sample of ``n`` distinct stored transitions."""
        if n > self.size:
            raise UsageError(f"cannot sample {n} transitions from a buffer holding {self.size}")
        idx = rng.choice(self.size, size=n, replace=False)
        return self.take(idx)

    def take(self, idx) -> Batch:
        return Batch(self.obs[idx], self.lin[idx], self.ang[idx], self.reward[idx],
                     self.next_obs[idx], self.terminal[idx])

    def ordered_indices(self) -> np.ndarray:
        """Indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.cursor) % self.capacity

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity, "size": self.size, "cursor": self.cursor,
            "obs": self.obs[: self.size], "next_obs": self.next_obs[: self.size],
            "lin": self.lin[: self.size], "ang": self.ang[: self.size],
            "reward": self.reward[: self.size], "terminal": self.terminal[: self.size],
        }

    def load_state_dict(self, d: dict) -> None:
        n = int(d["size"])
        if int(d["capacity"]) != self.capacity:
            raise UsageError("replay capacity mismatch")
        for name in ("obs", "next_obs", "lin", "ang", "reward", "terminal"):
            getattr(self, name)[:n] = d[name]
        self.size, self.cursor = n, int(d["cursor"])


# ----------------------------------------------------------------------
# Agent
# ----------------------------------------------------------------------


def double_q_targets(batch: Batch, online: NetParams, target: NetParams, gamma: float, variant: str):
    """Per-branch targets ``(y_linear, y_angular)`` for a batch."""
    q_tgt, _ = q_batch(target, batch.next_obs, variant)
    if variant == "dqn":
        q_onl = q_tgt
    else:
        q_onl, _ = q_batch(online, batch.next_obs, variant)
    y_lin = branch_targets(batch.reward, batch.terminal, q_onl.q_linear, q_tgt.q_linear, gamma, variant)
    y_ang = branch_targets(batch.reward, batch.terminal, q_onl.q_angular, q_tgt.q_angular, gamma, variant)
    return y_lin, y_ang


def huber(x: np.ndarray, delta: float) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))


def td_loss_grad(q: QOutput, batch: Batch, y_lin, y_ang, delta: float):
    """Huber loss averaged over transitions and both branches.

    Returns ``(loss, mean_abs_td, grad_q_linear, grad_q_angular)``; the
    gradients are zero everywhere except at the actions taken.
    """
    n = len(batch)
    rows = np.arange(n)
    td_lin = q.q_linear[rows, batch.lin].astype(np.float64) - y_lin
    td_ang = q.q_angular[rows, batch.ang].astype(np.float64) - y_ang
    loss = (huber(td_lin, delta).sum() + huber(td_ang, delta).sum()) / (2 * n)
    g_lin = np.zeros(q.q_linear.shape)
    g_ang = np.zeros(q.q_angular.shape)
    g_lin[rows, batch.lin] = np.clip(td_lin, -delta, delta) / (2 * n)
    g_ang[rows, batch.ang] = np.clip(td_ang, -delta, delta) / (2 * n)
    td_abs = 0.5 * (np.abs(td_lin).mean() + np.abs(td_ang).mean())
    return float(loss), float(td_abs), g_lin, g_ang


def q_grad_to_output_grad(g_lin: np.ndarray, g_ang: np.ndarray, variant: str) -> np.ndarray:
    """Back-propagate dL/dQ through the (optional) dueling combination."""
    if variant != "d3qn":
        return np.concatenate([g_lin, g_ang], axis=1)
    d_adv_lin = g_lin - g_lin.mean(axis=1, keepdims=True)
    d_adv_ang = g_ang - g_ang.mean(axis=1, keepdims=True)
    d_value = g_lin.sum(axis=1, keepdims=True) + g_ang.sum(axis=1, keepdims=True)
    return np.concatenate([d_adv_lin, d_adv_ang, d_value], axis=1)


class QAgent:
    """Online/target networks, Adam state, replay buffer and exploration RNGs."""

    def __init__(
        self,
        config: AgentConfig,
        input_size: int,
        preset: str = "dense",
        seed: Optional[int] = 0,
        stack_k: int = 1,
    ) -> None:
        self.config = config
        self.variant = config.variant
        self.preset = preset
        self.input_size = input_size
        init_ss, explore_ss, replay_ss = np.random.SeedSequence(seed).spawn(3)
        self.online = build_network(preset, self.variant, input_size, np.random.default_rng(init_ss), stack_k)
        self.target = neuro.clone_params(self.online)
        self.adam = neuro.AdamState.for_params(self.online, lr=config.lr)
        self.buffer = ReplayBuffer(config.buffer_capacity, input_size)
        self.explore_rng = np.random.default_rng(explore_ss)
        self.replay_rng = np.random.default_rng(replay_ss)
        self.global_step = 0
        self.n_updates = 0
        self.next_sync = config.sync_period
        self.metadata: dict = {}

    # -- acting ---------------------------------------------------------

    @property
    def epsilon(self) -> float:
        c = self.config
        return epsilon_at(self.global_step, c.eps_start, c.eps_end, c.eps_horizon)

    def q_values(self, obs: np.ndarray, params: Optional[NetParams] = None) -> QOutput:
        q, _ = q_batch(self.online if params is None else params, obs, self.variant)
        return QOutput(q.q_linear[0], q.q_angular[0])

    def act(self, obs: np.ndarray, epsilon: Optional[float] = None) -> ActionPair:
        eps = self.epsilon if epsilon is None else epsilon
        return select_action(self.q_values(obs), eps, self.explore_rng)

    # -- learning -------------------------------------------------------

    def observe(self, t: Transition) -> None:
        self.buffer.push(t)

    def ready(self) -> bool:
        return len(self.buffer) >= self.config.warmup

    def sample(self) -> Batch:
        return self.buffer.sample(self.config.batch_size, self.replay_rng)

    def train_step(self, batch: Batch) -> dict:
        c = self.config
        y_lin, y_ang = double_q_targets(batch, self.online, self.target, c.gamma, self.variant)
        q, tape = q_batch(self.online, batch.obs, self.variant)
        loss, td_abs, g_lin, g_ang = td_loss_grad(q, batch, y_lin, y_ang, c.huber_delta)
        if not math.isfinite(loss):
            ys = np.concatenate([y_lin, y_ang])
            raise TrainingError(
                f"non-finite loss at update {self.n_updates}: "
                f"max|Q|={np.abs(q.q_angular).max():.3g}, "
                f"non-finite targets={int((~np.isfinite(ys)).sum())}/{ys.size}, "
                f"params digest {self.online.digest()[:12]}"
            )
        grads, _ = neuro.backward(self.online, tape, q_grad_to_output_grad(g_lin, g_ang, self.variant))
        neuro.adam_step(self.online, grads, self.adam)
        self.n_updates += 1
        return {"loss": loss, "td_abs": td_abs}

    def sync_target(self) -> None:
        neuro.copy_into(self.target, self.online)
        self.next_sync += self.config.sync_period

    def maybe_sync(self) -> bool:
        if self.global_step >= self.next_sync:
            self.sync_target()
            return True
        return False
