"""Synthetic pixel-control tasks with moving distractors and exact relevance masks.

Every environment state splits into a task-relevant part (what the reward and the
controlled dynamics depend on) and a distractor part that only affects pixels.
Relevant sprites are rendered with hard coverage on top of the distractors, so
the ground-truth mask is exact: ``observation * gt_mask == render_clean(state)``.

Images are rendered on a 1/255 grid, which lets recorders and the replay buffer
store frames as ``uint8`` without loss.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from segdreamer.container import read_container, write_container
from segdreamer.errors import ConfigError, UsageError

TASKS = ("dot_reacher", "pixel_pendulum")
REWARD_MODES = ("dense", "sparse")
DISTRACTOR_MODES = ("none", "moving_patches", "scrolling_noise")
MASK_SCOPES = ("all_relevant", "agent_only")

BACKGROUND = np.array([64, 64, 77], dtype=np.uint8)
AGENT_COLOR = np.array([255, 217, 64], dtype=np.uint8)
GOAL_COLOR = np.array([77, 242, 115], dtype=np.uint8)
POLE_COLOR = np.array([255, 217, 64], dtype=np.uint8)

# dot_reacher
DOT_SPEED = 0.05
DOT_REWARD_SCALE = 0.5
DOT_SPARSE_RADIUS = 0.1
AGENT_RADIUS = 0.08
GOAL_RADIUS = 0.06

# pixel_pendulum; theta = 0 is upright
PEND_DT = 0.05
PEND_TORQUE = 2.0
PEND_GRAVITY = 9.81
PEND_LENGTH = 1.0
PEND_DAMPING = 0.1
PEND_MAX_SPEED = 8.0
PEND_SPARSE_COS = 0.95
POLE_DRAW_LENGTH = 0.35
POLE_HALF_WIDTH = 0.05
BOB_RADIUS = 0.08

NUM_PATCHES = 6
SCROLL_SPEED = 2
SCROLL_BLOCK = 4


@dataclass
class EnvConfig:
    task: str = "dot_reacher"
    reward_mode: str = "dense"
    distractor_mode: str = "moving_patches"
    image_size: int = 32
    action_repeat: int = 2
    episode_length: int = 250
    mask_scope: str = "all_relevant"
    seed: int = 0

    def validate(self) -> "EnvConfig":
        for name, allowed in (
            ("task", TASKS),
            ("reward_mode", REWARD_MODES),
            ("distractor_mode", DISTRACTOR_MODES),
            ("mask_scope", MASK_SCOPES),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"env.{name}: {getattr(self, name)!r} not in {allowed}")
        if self.image_size not in (32, 64):
            raise ConfigError(f"env.image_size: {self.image_size} not in (32, 64)")
        if self.action_repeat < 1:
            raise ConfigError(f"env.action_repeat: must be >= 1, got {self.action_repeat}")
        if self.episode_length < 1:
            raise ConfigError(f"env.episode_length: must be >= 1, got {self.episode_length}")
        return self

    @property
    def action_dim(self) -> int:
        return 2 if self.task == "dot_reacher" else 1


@dataclass
class DotState:
    agent: np.ndarray  # (x, y) in [0, 1]^2
    goal: np.ndarray


@dataclass
class PendulumState:
    theta: float
    omega: float


@dataclass
class PatchState:
    pos: np.ndarray  # (N, 2) top-left corner, fraction of the frame
    size: np.ndarray  # (N, 2)
    vel: np.ndarray  # (N, 2) per decision step
    color: np.ndarray  # (N, 3) uint8


@dataclass
class ScrollState:
    texture: np.ndarray  # (S, S, 3) uint8
    offset: int = 0


RelevantState = Union[DotState, PendulumState]
DistractorState = Optional[Union[PatchState, ScrollState]]


@dataclass
class EnvState:
    relevant: RelevantState
    distractor: DistractorState
    step_index: int = 0


@dataclass
class StepResult:
    observation: np.ndarray  # (H, W, 3) float32 in [0, 1]
    gt_mask: np.ndarray  # (H, W) bool
    reward: float
    cont: bool
    is_first: bool


def copy_state(state: EnvState) -> EnvState:
    def _copy(obj):
        if obj is None:
            return None
        return dataclasses.replace(
            obj, **{f.name: np.copy(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                    if isinstance(getattr(obj, f.name), np.ndarray)}
        )

    return EnvState(_copy(state.relevant), _copy(state.distractor), state.step_index)


# --- relevant dynamics and reward; never see the distractor ------------------

def transition(relevant: RelevantState, action: np.ndarray) -> RelevantState:
    """One simulator substep of the task-relevant dynamics."""
    if isinstance(relevant, DotState):
        agent = np.clip(relevant.agent + DOT_SPEED * action[:2], 0.0, 1.0)
        return DotState(agent=agent, goal=relevant.goal.copy())
    theta, omega = relevant.theta, relevant.omega
    accel = (PEND_GRAVITY / PEND_LENGTH) * np.sin(theta) - PEND_DAMPING * omega + PEND_TORQUE * float(action[0])
    new_theta = theta + PEND_DT * omega
    new_omega = float(np.clip(omega + PEND_DT * accel, -PEND_MAX_SPEED, PEND_MAX_SPEED))
    new_theta = float((new_theta + np.pi) % (2 * np.pi) - np.pi)
    return PendulumState(theta=new_theta, omega=new_omega)


def reward_fn(relevant: RelevantState, reward_mode: str) -> float:
    if isinstance(relevant, DotState):
        dist = float(np.linalg.norm(relevant.agent - relevant.goal))
        if reward_mode == "sparse":
            return float(dist <= DOT_SPARSE_RADIUS)
        return 1.0 - min(max(dist / DOT_REWARD_SCALE, 0.0), 1.0)
    c = float(np.cos(relevant.theta))
    if reward_mode == "sparse":
        return float(c > PEND_SPARSE_COS)
    return (c + 1.0) / 2.0


def advance_distractor(distractor: DistractorState) -> DistractorState:
    if distractor is None:
        return None
    if isinstance(distractor, ScrollState):
        size = distractor.texture.shape[1]
        return ScrollState(distractor.texture, (distractor.offset + SCROLL_SPEED) % size)
    pos = distractor.pos + distractor.vel
    vel = distractor.vel.copy()
    hi = 1.0 - distractor.size
    low_hit, high_hit = pos < 0.0, pos > hi
    pos = np.where(low_hit, -pos, pos)
    pos = np.where(high_hit, 2 * hi - pos, pos)
    vel[low_hit | high_hit] *= -1
    return PatchState(np.clip(pos, 0.0, hi), distractor.size.copy(), vel, distractor.color.copy())


# --- rendering ----------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy.setflags(write=False)
    xx.setflags(write=False)
    return yy, xx


def _disc(size: int, center_xy: np.ndarray, radius_frac: float) -> np.ndarray:
    yy, xx = _grid(size)
    cx, cy = center_xy * (size - 1)
    r = radius_frac * size
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _pole(size: int, theta: float) -> np.ndarray:
    yy, xx = _grid(size)
    pivot = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    length = POLE_DRAW_LENGTH * size
    tip = pivot + length * np.array([np.sin(theta), -np.cos(theta)])
    d = tip - pivot
    px, py = xx - pivot[0], yy - pivot[1]
    t = np.clip((px * d[0] + py * d[1]) / float(d @ d), 0.0, 1.0)
    dist2 = (px - t * d[0]) ** 2 + (py - t * d[1]) ** 2
    hw = POLE_HALF_WIDTH * size
    rod = dist2 <= hw * hw
    bob = (xx - tip[0]) ** 2 + (yy - tip[1]) ** 2 <= (BOB_RADIUS * size) ** 2
    return rod | bob


def sprite_layers(relevant: RelevantState, size: int) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(name, coverage, colour) for each relevant sprite, in drawing order."""
    if isinstance(relevant, DotState):
        return [
            ("goal", _disc(size, relevant.goal, GOAL_RADIUS), GOAL_COLOR),
            ("agent", _disc(size, relevant.agent, AGENT_RADIUS), AGENT_COLOR),
        ]
    return [("pendulum", _pole(size, relevant.theta), POLE_COLOR)]


def scope_sprites(task: str, mask_scope: str) -> tuple[str, ...]:
    if task == "dot_reacher":
        return ("goal", "agent") if mask_scope == "all_relevant" else ("agent",)
    return ("pendulum",)


def _background(distractor: DistractorState, size: int) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    if isinstance(distractor, ScrollState):
        img[:] = np.roll(distractor.texture, -distractor.offset, axis=1)
    elif isinstance(distractor, PatchState):
        yy, xx = _grid(size)
        for pos, ext, color in zip(distractor.pos, distractor.size, distractor.color):
            x0, y0 = pos * size
            x1, y1 = (pos + ext) * size
            img[(xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)] = color
    return img


def render_observation(state: EnvState, config: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Full observation (float32) and ground-truth mask for ``state``."""
    size = config.image_size
    img = _background(state.distractor, size)
    mask = np.zeros((size, size), dtype=bool)
    in_scope = scope_sprites(config.task, config.mask_scope)
    for name, cov, color in sprite_layers(state.relevant, size):
        img[cov] = color
        if name in in_scope:
            mask |= cov
    return img.astype(np.float32) / 255.0, mask


def render_clean(state: EnvState, config: EnvConfig, sprites: Optional[Sequence[str]] = None) -> np.ndarray:
    """Only the task-relevant sprites (those in the mask scope by default) on black."""
    size = config.image_size
    selected = scope_sprites(config.task, config.mask_scope) if sprites is None else tuple(sprites)
    img = np.zeros((size, size, 3), dtype=np.uint8)
    for name, cov, color in sprite_layers(state.relevant, size):
        if name in selected:
            img[cov] = color
    return img.astype(np.float32) / 255.0


# --- environment ----------------------------------------------------------------

class DistractingEnv:
    """Single-threaded environment instance; create one per worker."""

    def __init__(self, config: EnvConfig):
        self.config = config.validate()
        self._state: Optional[EnvState] = None
        self._done = False

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    @property
    def state(self) -> EnvState:
        if self._state is None:
            raise UsageError("environment has not been reset")
        return copy_state(self._state)

    def set_state(self, state: EnvState) -> StepResult:
        """Force the simulator into ``state`` (used to probe invariances)."""
        self._state = copy_state(state)
        self._done = state.step_index >= self.config.episode_length
        return self._result(reward=0.0, is_first=False)

    def reset(self, seed: Optional[int] = None, distractor_seed: Optional[int] = None) -> StepResult:
        seed = self.config.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        if self.config.task == "dot_reacher":
            relevant: RelevantState = DotState(agent=rng.uniform(0.0, 1.0, 2), goal=rng.uniform(0.0, 1.0, 2))
        else:
            relevant = PendulumState(theta=float(np.pi + rng.uniform(-0.2, 0.2)), omega=float(rng.uniform(-0.1, 0.1)))
            relevant.theta = float((relevant.theta + np.pi) % (2 * np.pi) - np.pi)
        drng = np.random.default_rng([seed, 1] if distractor_seed is None else [distractor_seed, 2])
        self._state = EnvState(relevant, self._init_distractor(drng), 0)
        self._done = False
        return self._result(reward=0.0, is_first=True)

    def step(self, action) -> StepResult:
        if self._state is None:
            raise UsageError("step() called before reset()")
        if self._done:
            raise UsageError("step() called after the episode terminated; call reset()")
        action = np.clip(np.nan_to_num(np.asarray(action, dtype=np.float64).reshape(-1)), -1.0, 1.0)
        if action.shape[0] != self.action_dim:
            raise UsageError(f"expected action of dim {self.action_dim}, got {action.shape[0]}")
        relevant = self._state.relevant
        for _ in range(self.config.action_repeat):
            relevant = transition(relevant, action)
        self._state = EnvState(relevant, advance_distractor(self._state.distractor), self._state.step_index + 1)
        self._done = self._state.step_index >= self.config.episode_length
        return self._result(reward=reward_fn(relevant, self.config.reward_mode), is_first=False)

    def render_clean(self, sprites: Optional[Sequence[str]] = None) -> np.ndarray:
        return render_clean(self.state, self.config, sprites)

    def _result(self, reward: float, is_first: bool) -> StepResult:
        obs, mask = render_observation(self._state, self.config)
        return StepResult(obs, mask, float(reward), not self._done, is_first)

    def _init_distractor(self, rng: np.random.Generator) -> DistractorState:
        size = self.config.image_size
        mode = self.config.distractor_mode
        if mode == "none":
            return None
        if mode == "scrolling_noise":
            blocks = rng.integers(0, 256, (size // SCROLL_BLOCK, size // SCROLL_BLOCK, 3), dtype=np.uint8)
            texture = np.repeat(np.repeat(blocks, SCROLL_BLOCK, axis=0), SCROLL_BLOCK, axis=1)
            return ScrollState(texture=texture, offset=0)
        ext = rng.uniform(0.15, 0.4, (NUM_PATCHES, 2))
        pos = rng.uniform(0.0, 1.0, (NUM_PATCHES, 2)) * (1.0 - ext)
        vel = rng.uniform(-0.05, 0.05, (NUM_PATCHES, 2))
        color = rng.integers(0, 256, (NUM_PATCHES, 3), dtype=np.uint8)
        return PatchState(pos, ext, vel, color)


def reset(config: EnvConfig, seed: int, distractor_seed: Optional[int] = None) -> tuple[DistractingEnv, StepResult]:
    env = DistractingEnv(config)
    return env, env.reset(seed, distractor_seed)


def random_state(config: EnvConfig, rng: np.random.Generator) -> EnvState:
    """A random full state, used by property checks over many states."""
    env = DistractingEnv(config)
    env.reset(int(rng.integers(2**31)), int(rng.integers(2**31)))
    state = env.state
    if isinstance(state.relevant, DotState):
        state.relevant = DotState(rng.uniform(0, 1, 2), rng.uniform(0, 1, 2))
    else:
        state.relevant = PendulumState(float(rng.uniform(-np.pi, np.pi)), float(rng.uniform(-8, 8)))
    for _ in range(int(rng.integers(0, 20))):
        state.distractor = advance_distractor(state.distractor)
    return state


# --- episode recording ----------------------------------------------------------

@dataclass
class Episode:
    """One trajectory. ``actions[t]`` is the action that led *into* frame t (zeros at t = 0)."""

    observations: np.ndarray  # (T, H, W, 3) uint8
    gt_masks: np.ndarray  # (T, H, W) bool
    masks: np.ndarray  # (T, H, W) bool, provider output
    actions: np.ndarray  # (T, A) float32
    rewards: np.ndarray  # (T,) float32
    conts: np.ndarray  # (T,) bool
    is_first: np.ndarray  # (T,) bool
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rewards)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "meta"}


def to_uint8(observation: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(observation) * 255.0).astype(np.uint8)


class EpisodeRecorder:
    """Writes each finished episode to ``out_dir/episode_<n>.sdc``."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.count = len(list(self.out_dir.glob("episode_*.sdc")))

    def record(self, episode: Episode) -> Path:
        path = self.out_dir / f"episode_{self.count:06d}.sdc"
        self.count += 1
        return write_container(path, "episode", {"meta": episode.meta, "length": len(episode)}, episode.arrays())


def load_episode(path) -> Episode:
    header, arrays = read_container(path, kind="episode")
    return Episode(meta=header.get("meta", {}), **arrays)
