"""Actor-critic trained purely on imagined latent rollouts of the world model."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from segdreamer.errors import ConfigError, NumericalError, ShapeError
from segdreamer.worldmodel import LatentState, WorldModel


@dataclass
class AgentConfig:
    horizon: int = 15
    gamma: float = 0.997
    lambda_: float = 0.95
    entropy_scale: float = 3e-4
    critic_ema_decay: float = 0.98
    actor_dist: str = "tanh_gaussian"
    hidden_dim: int = 256
    actor_lr: float = 3e-5
    critic_lr: float = 3e-5
    grad_clip: float = 100.0
    return_norm_decay: float = 0.99
    min_std: float = 0.1
    max_std: float = 1.0

    def validate(self) -> "AgentConfig":
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"agent.gamma: must lie in (0, 1), got {self.gamma}")
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ConfigError(f"agent.lambda_: must lie in [0, 1], got {self.lambda_}")
        if self.horizon < 1:
            raise ConfigError(f"agent.horizon: must be >= 1, got {self.horizon}")
        if self.actor_dist != "tanh_gaussian":
            raise ConfigError(f"agent.actor_dist: only 'tanh_gaussian' is supported, got {self.actor_dist!r}")
        if not 0.0 <= self.critic_ema_decay < 1.0:
            raise ConfigError(f"agent.critic_ema_decay: must lie in [0, 1), got {self.critic_ema_decay}")
        return self


@dataclass
class ImaginedRollout:
    states: torch.Tensor  # (H+1, N, D) model states
    actions: torch.Tensor  # (H, N, A) squashed actions
    raw_actions: torch.Tensor  # (H, N, A) pre-tanh samples
    rewards: torch.Tensor  # (H, N) reward head on the state each action leads to
    continues: torch.Tensor  # (H, N) continue probability of that state
    values: torch.Tensor  # (H+1, N) slow-critic values

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


def lambda_returns(rewards, continues, values, gamma: float, lambda_: float) -> torch.Tensor:
    """R_t = r_t + gamma c_t ((1 - lambda) v_{t+1} + lambda R_{t+1}), with R_H = v_H."""
    rewards, continues, values = map(torch.as_tensor, (rewards, continues, values))
    H = rewards.shape[0]
    if continues.shape != rewards.shape or values.shape[0] != H + 1 or values.shape[1:] != rewards.shape[1:]:
        raise ShapeError(
            f"lambda_returns needs rewards/continues of length H and values of length H+1; "
            f"got {tuple(rewards.shape)}, {tuple(continues.shape)}, {tuple(values.shape)}"
        )
    out = []
    ret = values[H]
    for t in reversed(range(H)):
        ret = rewards[t] + gamma * continues[t] * ((1.0 - lambda_) * values[t + 1] + lambda_ * ret)
        out.append(ret)
    return torch.stack(out[::-1])


def discount_weights(continues: torch.Tensor, gamma: float) -> torch.Tensor:
    """Weight of imagined state t: product of gamma * continue over the steps before it."""
    ones = torch.ones_like(continues[:1])
    return torch.cumprod(torch.cat([ones, gamma * continues[:-1]]), 0)


def percentile_range(x, low: float = 5.0, high: float = 95.0) -> float:
    x = np.asarray(torch.as_tensor(x).detach().cpu(), dtype=np.float64).ravel()
    lo, hi = np.percentile(x, [low, high])
    return float(hi - lo)


class ReturnNormalizer:
    """Running 5th/95th percentile of imagined returns; the scale never drops below 1."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.low: Optional[float] = None
        self.high: Optional[float] = None

    def update(self, returns) -> float:
        x = np.asarray(torch.as_tensor(returns).detach().cpu(), dtype=np.float64).ravel()
        lo, hi = np.percentile(x, [5.0, 95.0])
        if self.low is None:
            self.low, self.high = float(lo), float(hi)
        else:
            self.low = self.decay * self.low + (1 - self.decay) * float(lo)
            self.high = self.decay * self.high + (1 - self.decay) * float(hi)
        return self.scale

    @property
    def raw_scale(self) -> float:
        return 0.0 if self.low is None else self.high - self.low

    @property
    def scale(self) -> float:
        return max(1.0, self.raw_scale)


def _mlp(inp: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(inp, hidden), nn.LayerNorm(hidden), nn.SiLU(),
        nn.Linear(hidden, hidden), nn.LayerNorm(hidden), nn.SiLU(),
        nn.Linear(hidden, out),
    )


class TanhGaussianActor(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, hidden: int, min_std: float, max_std: float):
        super().__init__()
        self.net = _mlp(state_dim, hidden, 2 * action_dim)
        self.min_std, self.max_std = min_std, max_std

    def forward(self, x: torch.Tensor):
        mean, raw_std = self.net(x).chunk(2, -1)
        std = (self.max_std - self.min_std) * torch.sigmoid(raw_std + 2.0) + self.min_std
        return mean, std

    def sample(self, x: torch.Tensor, generator: Optional[torch.Generator] = None):
        mean, std = self(x)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        raw = mean + std * noise
        return torch.tanh(raw), raw

    def greedy(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self(x)[0])

    def log_prob(self, x: torch.Tensor, raw: torch.Tensor) -> torch.Tensor:
        mean, std = self(x)
        dist = torch.distributions.Normal(mean, std)
        squash = torch.log(1.0 - torch.tanh(raw).pow(2) + 1e-6)
        return (dist.log_prob(raw) - squash).sum(-1)

    def entropy(self, x: torch.Tensor) -> torch.Tensor:
        """Entropy of the Gaussian before squashing."""
        _, std = self(x)
        return (0.5 + 0.5 * np.log(2 * np.pi) + torch.log(std)).sum(-1)


class Critic(nn.Module):
    def __init__(self, state_dim: int, hidden: int):
        super().__init__()
        self.net = _mlp(state_dim, hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)[..., 0]


class ActorCritic(nn.Module):
    def __init__(self, config: AgentConfig, state_dim: int, action_dim: int):
        super().__init__()
        self.config = config.validate()
        self.actor = TanhGaussianActor(state_dim, action_dim, config.hidden_dim, config.min_std, config.max_std)
        self.critic = Critic(state_dim, config.hidden_dim)
        self.slow_critic = copy.deepcopy(self.critic).requires_grad_(False)
        self.normalizer = ReturnNormalizer(config.return_norm_decay)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), config.actor_lr, eps=1e-5)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), config.critic_lr, eps=1e-5)

    @torch.no_grad()
    def act(self, x: torch.Tensor, greedy: bool = False, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return self.actor.greedy(x) if greedy else self.actor.sample(x, generator)[0]

    @torch.no_grad()
    def imagine(self, world_model: WorldModel, start: LatentState, horizon: Optional[int] = None,
                generator: Optional[torch.Generator] = None) -> ImaginedRollout:
        """Roll the prior dynamics forward from ``start`` (flattened to N states)."""
        horizon = self.config.horizon if horizon is None else horizon
        if horizon < 1:
            raise ConfigError(f"agent.horizon: must be >= 1, got {horizon}")
        c = world_model.config
        state = LatentState(start.h.reshape(-1, c.det_dim), start.z.reshape(-1, c.stoch_groups, c.stoch_classes))
        states, actions, raws, rewards, conts = [state.x], [], [], [], []
        for _ in range(horizon):
            action, raw = self.actor.sample(state.x.to(self._dtype), generator)
            state = world_model.img_step(state, action, generator)
            x = state.x
            states.append(x), actions.append(action), raws.append(raw)
            rewards.append(world_model.reward(x)), conts.append(torch.sigmoid(world_model.cont_logit(x)))
        states_t = torch.stack(states).to(self._dtype)
        return ImaginedRollout(
            states=states_t, actions=torch.stack(actions), raw_actions=torch.stack(raws),
            rewards=torch.stack(rewards).to(self._dtype), continues=torch.stack(conts).to(self._dtype),
            values=self.slow_critic(states_t),
        )

    @property
    def _dtype(self) -> torch.dtype:
        return self.critic.net[0].weight.dtype

    def losses(self, rollout: ImaginedRollout):
        """Actor and critic losses for one rollout, without stepping optimisers."""
        cfg = self.config
        returns = lambda_returns(rollout.rewards, rollout.continues, rollout.values, cfg.gamma, cfg.lambda_)
        weights = discount_weights(rollout.continues, cfg.gamma).detach()
        x = rollout.states[:-1].detach()

        value = self.critic(x)
        critic_loss = (0.5 * weights * (value - returns.detach()).pow(2)).mean()

        scale = self.normalizer.update(returns)
        advantage = ((returns - value.detach()) / scale).detach()
        logp = self.actor.log_prob(x, rollout.raw_actions.detach())
        entropy = self.actor.entropy(x)
        policy_term = (weights * logp * advantage).mean()
        entropy_term = cfg.entropy_scale * (weights * entropy).mean()
        actor_loss = -(policy_term + entropy_term)
        metrics = {
            "actor_loss": actor_loss.detach(), "critic_loss": critic_loss.detach(),
            "entropy": entropy.detach().mean(), "entropy_term": entropy_term.detach(),
            "return_mean": returns.detach().mean(), "return_scale": torch.tensor(scale),
            "advantage_mean": advantage.mean(), "imag_reward": rollout.rewards.mean(),
        }
        return actor_loss, critic_loss, metrics

    def update(self, rollout: ImaginedRollout) -> dict[str, float]:
        actor_loss, critic_loss, metrics = self.losses(rollout)
        for name in ("actor_loss", "critic_loss"):
            if not torch.isfinite(metrics[name]):
                raise NumericalError(name)
        self.actor_opt.zero_grad(set_to_none=True)
        actor_loss.backward()
        nn.utils.clip_grad_norm_(self.actor.parameters(), self.config.grad_clip)
        self.actor_opt.step()
        self.critic_opt.zero_grad(set_to_none=True)
        critic_loss.backward()
        nn.utils.clip_grad_norm_(self.critic.parameters(), self.config.grad_clip)
        self.critic_opt.step()
        self.update_slow_critic()
        return {k: float(v) for k, v in metrics.items()}

    @torch.no_grad()
    def update_slow_critic(self) -> None:
        d = self.config.critic_ema_decay
        for slow, fast in zip(self.slow_critic.parameters(), self.critic.parameters()):
            slow.mul_(d).add_(fast, alpha=1.0 - d)


def actor_critic_update(agent: ActorCritic, rollout: ImaginedRollout) -> dict[str, float]:
    return agent.update(rollout)
