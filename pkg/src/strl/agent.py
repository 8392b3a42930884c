"""DDPG: behaviour/target actor and critic, replay buffer, updates."""
from __future__ import annotations

import copy
import hashlib
import random
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .tensor import DTYPE


class InsufficientData(Exception):
    """Replay buffer holds fewer experiences than the requested batch."""


@dataclass(frozen=True)
class Experience:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray


class ReplayBuffer:
    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[Experience] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def store(self, exp: Experience) -> None:
        self._items.append(exp)

    def sample(self, m: int, rng: random.Random) -> list[Experience]:
        """Uniform draw of ``m`` distinct experiences."""
        if len(self._items) < m:
            raise InsufficientData(f"buffer has {len(self._items)} < {m} experiences")
        return [self._items[i] for i in rng.sample(range(len(self._items)), m)]


@dataclass
class DdpgConfig:
    gamma: float = 0.6
    rho: float = 0.2
    eta_mu: float = 1e-3
    eta_q: float = 1e-3
    batch_size: int = 32
    epsilon: float = 0.5
    epsilon_final: float = 0.05
    replay_capacity: int = 10_000
    optimizer: str = "adam"

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must be in (0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


def _optim(params, lr: float, kind: str) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=lr) if kind == "adam" else torch.optim.SGD(params, lr=lr)


def param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _stack(arrays) -> torch.Tensor:
    return torch.as_tensor(np.stack(arrays), dtype=DTYPE)


class Ddpg:
    """Four networks plus optimiser state.

    ``actor(states, train, generator)`` must map a batch of states to a batch
    of actions and ``critic(states, actions)`` to a batch of Q values.
    """

    def __init__(self, actor: nn.Module, critic: nn.Module, config: DdpgConfig = DdpgConfig(),
                 seed: int = 0):
        self.config = config
        self.actor = actor
        self.critic = critic
        self.target_actor = copy.deepcopy(actor)
        self.target_critic = copy.deepcopy(critic)
        for p in list(self.target_actor.parameters()) + list(self.target_critic.parameters()):
            p.requires_grad_(False)
        self.actor_opt = _optim(actor.parameters(), config.eta_mu, config.optimizer)
        self.critic_opt = _optim(critic.parameters(), config.eta_q, config.optimizer)
        self.buffer = ReplayBuffer(config.replay_capacity)
        self.rng = random.Random(seed)
        self.dropout_gen = torch.Generator().manual_seed(seed)
        self.epsilon = config.epsilon
        self.updates = 0

    # -- acting ----------------------------------------------------------

    def select_action(self, state: np.ndarray, epsilon: float | None = None,
                      seed: int | None = None) -> np.ndarray:
        """Deterministic policy plus ``epsilon``-scaled Gaussian noise (seeded)."""
        eps = self.epsilon if epsilon is None else epsilon
        if eps < 0:
            raise ValueError("epsilon must be non-negative")
        with torch.no_grad():
            a = self.actor(torch.as_tensor(state, dtype=DTYPE), False, None).numpy().copy()
        if eps > 0:
            a = a + eps * np.random.default_rng(seed).standard_normal(a.shape)
        return a

    # -- learning --------------------------------------------------------

    def bellman_targets(self, rewards: torch.Tensor, next_states: torch.Tensor) -> torch.Tensor:
        """y = r + gamma * Q_target(s', mu_target(s')), without gradient tracking."""
        with torch.no_grad():
            next_a = self.target_actor(next_states, False, None)
            return rewards + self.config.gamma * self.target_critic(next_states, next_a)

    def critic_update(self, batch: Sequence[Experience]) -> float:
        if not batch:
            raise ValueError("critic_update needs a non-empty batch")
        s = _stack([e.state for e in batch])
        a = _stack([e.action for e in batch])
        r = torch.as_tensor([e.reward for e in batch], dtype=DTYPE)
        y = self.bellman_targets(r, _stack([e.next_state for e in batch]))
        loss = ((self.critic(s, a) - y) ** 2).mean()
        self.critic_opt.zero_grad()
        loss.backward()
        self.critic_opt.step()
        return float(loss.detach())

    def actor_update(self, batch: Sequence[Experience], train: bool = True) -> float:
        """One ascent step on mean Q(s, mu(s)); critic parameters are left untouched."""
        if not batch:
            raise ValueError("actor_update needs a non-empty batch")
        s = _stack([e.state for e in batch])
        critic_params = list(self.critic.parameters())
        flags = [p.requires_grad for p in critic_params]
        for p in critic_params:
            p.requires_grad_(False)
        try:
            q = self.critic(s, self.actor(s, train, self.dropout_gen)).mean()
            self.actor_opt.zero_grad()
            (-q).backward()
            self.actor_opt.step()
        finally:
            for p, f in zip(critic_params, flags):
                p.requires_grad_(f)
        return float(q.detach())

    def soft_update(self) -> None:
        rho = self.config.rho
        with torch.no_grad():
            for net, target in ((self.actor, self.target_actor), (self.critic, self.target_critic)):
                for p, tp in zip(net.parameters(), target.parameters()):
                    tp.lerp_(p, rho)

    def learn(self) -> tuple[float, float] | None:
        """Sample a batch and run critic, actor and target updates; None if the buffer is short."""
        try:
            batch = self.buffer.sample(self.config.batch_size, self.rng)
        except InsufficientData:
            return None
        lc = self.critic_update(batch)
        la = self.actor_update(batch)
        self.soft_update()
        self.updates += 1
        return lc, la

    def set_episode(self, episode: int, total: int) -> None:
        """Linear epsilon decay from the initial to the final value across training."""
        c = self.config
        frac = episode / max(1, total - 1)
        self.epsilon = c.epsilon + (c.epsilon_final - c.epsilon) * frac

    # -- persistence -----------------------------------------------------

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, net in (("actor", self.actor), ("critic", self.critic),
                            ("target_actor", self.target_actor), ("target_critic", self.target_critic)):
            for k, v in net.state_dict().items():
                out[f"{prefix}/{k}"] = v.to(DTYPE)
        for prefix, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            for idx, st in opt.state_dict()["state"].items():
                for k, v in st.items():
                    out[f"{prefix}/{idx}/{k}"] = torch.as_tensor(v, dtype=DTYPE).reshape(-1) if k == "step" else v
        return out

    def load_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for prefix, net in (("actor", self.actor), ("critic", self.critic),
                            ("target_actor", self.target_actor), ("target_critic", self.target_critic)):
            sd = net.state_dict()
            net.load_state_dict({k: tensors[f"{prefix}/{k}"].to(sd[k].dtype) for k in sd})
        for prefix, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            sd = opt.state_dict()
            state: dict = {}
            for key, v in tensors.items():
                if key.startswith(prefix + "/"):
                    _, idx, name = key.split("/", 2)
                    state.setdefault(int(idx), {})[name] = (
                        torch.tensor(float(v.reshape(-1)[0]), dtype=torch.float32) if name == "step" else v)
            sd["state"] = state
            opt.load_state_dict(sd)


def train_episode(env, ddpg: Ddpg, arrivals, steps: int, seed: int, plan_fn: Callable,
                  offset: int = 0, learn: bool = True) -> list:
    """Run ``steps`` interaction steps; returns the per-step metrics.

    ``plan_fn(action) -> RoutingPlan`` converts node scores into routes.
    """
    metrics = []
    state = env.observe_state()
    for i in range(steps):
        action = ddpg.select_action(state, seed=seed * 1_000_003 + i)
        m = env.step(plan_fn(action), arrivals.at(offset + i))
        next_state = env.observe_state()
        ddpg.buffer.store(Experience(state, action, m.reward, next_state))
        if learn:
            ddpg.learn()
        metrics.append(m)
        state = next_state
    return metrics
