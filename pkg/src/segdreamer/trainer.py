"""Training loop: acting, mask provisioning, replay, model and agent updates, evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from segdreamer.agent import ActorCritic
from segdreamer.config import RunConfig, from_dict, save_config, to_dict
from segdreamer.container import read_container, write_container
from segdreamer.envsim import DistractingEnv, Episode, EpisodeRecorder, to_uint8
from segdreamer.errors import CheckpointError, NumericalError
from segdreamer.evalkit import CONFIG_FILE, METRICS_FILE, episodic_quality, frame_iou
from segdreamer.masks import MaskProvider
from segdreamer.replay import ReplayBuffer
from segdreamer.worldmodel import WorldModel, build_target, rgb_relevance

log = logging.getLogger(__name__)

RGB_THRESHOLD = 0.5


class MetricsLog:
    """Line-delimited JSON records ``{"step", "metric_name", "value"}``."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w")
        self._lock = threading.Lock()

    def write(self, step: int, name: str, value: float) -> None:
        with self._lock:
            self._f.write(json.dumps({"step": int(step), "metric_name": name, "value": float(value)}) + "\n")

    def write_many(self, step: int, values: dict, prefix: str = "") -> None:
        for k, v in values.items():
            self.write(step, prefix + k, float(v))

    def flush(self) -> None:
        with self._lock:
            self._f.flush()

    def close(self) -> None:
        with self._lock:
            if not self._f.closed:
                self._f.close()


@dataclass
class RunReport:
    run_dir: Path
    env_steps: int
    updates: int
    episodes: int
    final_return: Optional[float]
    metrics_path: Path
    checkpoint_path: Optional[Path]


# --- checkpoints ----------------------------------------------------------------------

def _modules(world_model: WorldModel, agent: ActorCritic) -> dict[str, nn.Module]:
    return {"wm": world_model, "actor": agent.actor, "critic": agent.critic, "slow_critic": agent.slow_critic}


def build_models(config: RunConfig) -> tuple[WorldModel, ActorCritic]:
    wm = WorldModel(config.model, config.env.image_size, config.env.action_dim)
    agent = ActorCritic(config.agent, config.model.state_dim, config.env.action_dim)
    return wm, agent


def save_checkpoint(path, config: RunConfig, world_model: WorldModel, agent: ActorCritic,
                    env_steps: int, updates: int = 0, extra: Optional[dict] = None) -> Path:
    arrays = {}
    for prefix, module in _modules(world_model, agent).items():
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    norm = agent.normalizer
    header = {
        "config": to_dict(config), "env_steps": int(env_steps), "updates": int(updates),
        "return_norm": [norm.low, norm.high], **(extra or {}),
    }
    return write_container(path, "checkpoint", header, arrays)


def load_checkpoint(path) -> tuple[RunConfig, WorldModel, ActorCritic, dict]:
    header, arrays = read_container(path, kind="checkpoint")
    if "config" not in header:
        raise CheckpointError(f"{path}: checkpoint carries no run configuration")
    config = from_dict(header["config"]).validate()
    wm, agent = build_models(config)
    for prefix, module in _modules(wm, agent).items():
        state = module.state_dict()
        loaded = {}
        for name, ref in state.items():
            key = f"{prefix}/{name}"
            if key not in arrays:
                raise CheckpointError(f"{path}: missing parameter array '{key}'")
            if tuple(arrays[key].shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"{path}: '{key}' has shape {arrays[key].shape}, model expects {tuple(ref.shape)}")
            loaded[name] = torch.as_tensor(arrays[key]).to(ref.dtype)
        module.load_state_dict(loaded)
    low, high = header.get("return_norm", [None, None])
    agent.normalizer.low, agent.normalizer.high = low, high
    return config, wm, agent, header


# --- acting -------------------------------------------------------------------------------

class Policy:
    """Posterior-conditioned actor on real observations."""

    def __init__(self, world_model: WorldModel, agent: ActorCritic, masked_input: bool,
                 greedy: bool, generator: Optional[torch.Generator] = None):
        self.wm, self.agent = world_model, agent
        self.masked_input, self.greedy, self.generator = masked_input, greedy, generator
        self.state = world_model.initial((1,))
        self.prev_action = torch.zeros(1, world_model.action_dim, dtype=world_model.dtype)
        self.last_x: Optional[torch.Tensor] = None
        self.fresh = True

    @torch.no_grad()
    def __call__(self, observation: np.ndarray, mask: np.ndarray, is_first: bool) -> np.ndarray:
        obs = torch.as_tensor(observation)[None]
        if self.masked_input:
            obs = build_target(obs, torch.as_tensor(mask)[None])
        mode = "mode" if self.greedy else "sample"
        # a policy taking over mid-episode starts its filter from scratch
        self.state = self.wm.filter_step(self.state, self.prev_action, obs, is_first or self.fresh,
                                         self.generator, mode)
        self.fresh = False
        self.last_x = self.state.x
        action = self.agent.act(self.last_x.to(self.agent._dtype), self.greedy, self.generator)
        self.prev_action = action.to(self.wm.dtype)
        return action[0].numpy().astype(np.float64)


class _EpisodeBuilder:
    def __init__(self, action_dim: int, meta: dict):
        self.frames: dict[str, list] = {k: [] for k in
                                        ("observations", "gt_masks", "masks", "actions", "rewards", "conts", "is_first")}
        self.action_dim, self.meta = action_dim, meta

    def add(self, result, mask: np.ndarray, action: Optional[np.ndarray]) -> None:
        f = self.frames
        f["observations"].append(to_uint8(result.observation))
        f["gt_masks"].append(result.gt_mask)
        f["masks"].append(mask)
        f["actions"].append(np.zeros(self.action_dim) if action is None else np.clip(action, -1, 1))
        f["rewards"].append(result.reward)
        f["conts"].append(result.cont)
        f["is_first"].append(result.is_first)

    def build(self) -> Episode:
        f = self.frames
        return Episode(
            observations=np.stack(f["observations"]), gt_masks=np.stack(f["gt_masks"]),
            masks=np.stack(f["masks"]), actions=np.asarray(f["actions"], np.float32),
            rewards=np.asarray(f["rewards"], np.float32), conts=np.asarray(f["conts"], bool),
            is_first=np.asarray(f["is_first"], bool), meta=self.meta,
        )


class Trainer:
    def __init__(self, config: RunConfig, run_dir, episodes_dir=None):
        self.config = config.validate()
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        save_config(config, self.run_dir / CONFIG_FILE)
        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng([config.seed, 3])
        self.generator = torch.Generator().manual_seed(config.seed)
        self.env = DistractingEnv(config.env)
        self.provider = MaskProvider(dataclasses.replace(config.masks, seed=config.masks.seed * 100_003 + config.seed))
        self.wm, self.agent = build_models(config)
        self.wm_opt = torch.optim.Adam(self.wm.parameters(), config.model.learn_rate, eps=config.model.adam_eps)
        self.replay = ReplayBuffer(config.replay_capacity, config.seed)
        self.metrics = MetricsLog(self.run_dir / METRICS_FILE)
        self.recorder = EpisodeRecorder(episodes_dir) if episodes_dir else None
        self.env_steps = 0
        self.updates = 0
        self.episodes = 0
        self.train_distractor_seeds: list[int] = []
        self.eval_distractor_seeds: list[int] = []
        self.last_eval: Optional[float] = None
        self._param_lock = threading.RLock()
        self._next_log = 0
        self._last_eval_step: Optional[int] = None

    @property
    def masked_input(self) -> bool:
        return self.config.model.variant == "as_input"

    # --- learning ------------------------------------------------------------------------

    def train_step(self) -> dict[str, float]:
        cfg = self.config
        batch = self.replay.sample(cfg.batch_size, cfg.seq_len, self.rng).to_torch(self.wm.dtype)
        with self._param_lock:
            out = self.wm.loss(batch, generator=self.generator)
            self.wm_opt.zero_grad(set_to_none=True)
            out.total.backward()
            nn.utils.clip_grad_norm_(self.wm.parameters(), cfg.model.grad_clip)
            self.wm_opt.step()
            rollout = self.agent.imagine(self.wm, out.states.detach(), generator=self.generator)
            agent_metrics = self.agent.update(rollout)
        self.updates += 1
        if self.env_steps >= self._next_log:
            self._next_log = self.env_steps + cfg.log_every
            self.metrics.write_many(self.env_steps, {k: float(v) for k, v in out.components.items()}, "train/wm_")
            self.metrics.write_many(self.env_steps, agent_metrics, "train/agent_")
            self.metrics.write_many(self.env_steps, self.batch_mask_quality(batch, out.outputs), "train/")
        return {**{k: float(v) for k, v in out.components.items()}, **agent_metrics}

    def batch_mask_quality(self, batch, outputs) -> dict[str, float]:
        gt = batch["gt_masks"].reshape(-1, *batch["gt_masks"].shape[2:]).numpy()
        result = {}
        rgb = rgb_relevance(outputs.rgb_mean).reshape(gt.shape).numpy()
        q = episodic_quality(zip(rgb, gt), RGB_THRESHOLD)
        result.update(rgb_precision=q.precision, rgb_recall=q.recall, rgb_iou=q.iou)
        if outputs.mask_prob is not None:
            head = outputs.mask_prob.reshape(gt.shape).numpy()
            q = episodic_quality(zip(head, gt), self.config.model.mask_threshold)
            result.update(head_precision=q.precision, head_recall=q.recall, head_iou=q.iou)
        return result

    # --- acting --------------------------------------------------------------------------

    def _train_episode_seeds(self) -> tuple[int, int]:
        reset_seed = int(np.random.SeedSequence([self.config.seed, self.episodes]).generate_state(1)[0])
        distractor = int(self.rng.choice(self.config.train_distractor_range()))
        self.train_distractor_seeds.append(distractor)
        return reset_seed, distractor

    def _finish_episode(self, builder: _EpisodeBuilder) -> None:
        episode = builder.build()
        self.replay.add(episode)
        if self.recorder is not None:
            self.recorder.record(episode)
        q = episodic_quality(zip(episode.masks, episode.gt_masks))
        self.metrics.write_many(self.env_steps, {
            "provider_iou": q.iou, "provider_precision": q.precision, "provider_recall": q.recall,
            "episode_return": float(episode.rewards.sum()),
        }, "train/")
        self.episodes += 1

    def run(self) -> RunReport:
        cfg = self.config
        try:
            if cfg.threaded and cfg.total_env_steps > 0:
                self._run_threaded()
            else:
                self._collect(learn_inline=True)
            ckpt = None
            if cfg.total_env_steps > 0:
                if self._last_eval_step != self.env_steps:
                    self.evaluate()
                ckpt = save_checkpoint(self.run_dir / "checkpoints" / "final.ckpt", cfg, self.wm, self.agent,
                                       self.env_steps, self.updates)
        except NumericalError as err:
            save_checkpoint(self.run_dir / "checkpoints" / "diagnostic.ckpt", cfg, self.wm, self.agent,
                            self.env_steps, self.updates, {"error": str(err), "component": err.component})
            log.error("aborting run at env step %d: %s", self.env_steps, err)
            raise
        finally:
            self.metrics.close()
        return RunReport(self.run_dir, self.env_steps, self.updates, self.episodes, self.last_eval,
                         self.metrics.path, ckpt)

    def _collect(self, learn_inline: bool, stop: Optional[threading.Event] = None) -> None:
        cfg = self.config
        credit = 0.0
        next_eval = cfg.eval_every
        builder: Optional[_EpisodeBuilder] = None
        policy: Optional[Policy] = None
        result = None
        while self.env_steps < cfg.total_env_steps:
            if builder is None:
                seed, distractor = self._train_episode_seeds()
                result = self.env.reset(seed, distractor)
                builder = _EpisodeBuilder(self.env.action_dim, {"reset_seed": seed, "distractor_seed": distractor})
                mask = self.provider.provide(result.observation, result.gt_mask).mask
                builder.add(result, mask, None)
                policy = Policy(self.wm, self.agent, self.masked_input, greedy=False, generator=self.generator)
            if self.env_steps < cfg.prefill_steps:
                action = self.rng.uniform(-1.0, 1.0, self.env.action_dim)
            else:
                with self._param_lock:
                    action = policy(result.observation, mask, result.is_first)
            result = self.env.step(action)
            mask = self.provider.provide(result.observation, result.gt_mask).mask
            builder.add(result, mask, action)
            self.env_steps += cfg.env.action_repeat
            if not result.cont:
                self._finish_episode(builder)
                builder = None
            if learn_inline and self.env_steps >= cfg.prefill_steps and self._can_train():
                credit += cfg.train_ratio * cfg.env.action_repeat
                while credit >= 1.0:
                    self.train_step()
                    credit -= 1.0
            if self.env_steps >= next_eval:
                next_eval += cfg.eval_every
                self.evaluate()
            if stop is not None and stop.is_set():
                break
        if builder is not None and len(builder.frames["rewards"]) >= 2:
            self._finish_episode(builder)

    def _can_train(self) -> bool:
        return any(len(ep) >= self.config.seq_len for ep in self.replay.episodes)

    def _run_threaded(self) -> None:
        """One actor thread collecting, one learner thread updating at the configured ratio."""
        cfg = self.config
        stop = threading.Event()
        errors: list[BaseException] = []

        def learner():
            try:
                while not stop.is_set():
                    target = cfg.train_ratio * max(0, self.env_steps - cfg.prefill_steps)
                    if self.updates < target and self._can_train():
                        self.train_step()
                    else:
                        stop.wait(0.001)
            except BaseException as err:  # surfaced on the main thread
                errors.append(err)
                stop.set()

        thread = threading.Thread(target=learner, name="learner", daemon=True)
        thread.start()
        try:
            self._collect(learn_inline=False, stop=stop)
        finally:
            stop.set()
            thread.join()
        if errors:
            raise errors[0]

    # --- evaluation -----------------------------------------------------------------------

    def evaluate(self, episodes: Optional[int] = None) -> float:
        """Greedy episodes on held-out distractor seeds; never touches the replay buffer."""
        with self._param_lock:
            summary = evaluate_policy(self.config, self.wm, self.agent, episodes)
        self.eval_distractor_seeds.extend(summary["distractor_seeds"])
        for i, ret in enumerate(summary["episode_returns"]):
            self.metrics.write(self.env_steps, "eval/episode_return", ret)
            self.metrics.write(self.env_steps, "eval/provider_iou", summary["provider_iou"][i])
            if "head_iou" in summary:
                self.metrics.write(self.env_steps, "eval/head_iou", summary["head_iou"][i])
        self.metrics.write(self.env_steps, "eval/return", summary["mean_return"])
        self.last_eval, self._last_eval_step = summary["mean_return"], self.env_steps
        self.metrics.flush()
        log.info("env step %d: eval return %.2f", self.env_steps, summary["mean_return"])
        return summary["mean_return"]


def evaluate_policy(config: RunConfig, world_model: WorldModel, agent: ActorCritic,
                    episodes: Optional[int] = None, seed: int = 0) -> dict:
    """Greedy-mean-action episodes with distractor seeds from the held-out range."""
    episodes = config.eval_episodes if episodes is None else episodes
    env = DistractingEnv(config.env)
    provider = MaskProvider(dataclasses.replace(config.masks, seed=config.masks.seed * 100_003 + 7_777_777 + seed))
    seeds = list(config.eval_distractor_range())[seed * episodes:(seed + 1) * episodes]
    has_head = config.model.has_mask_head
    returns, provider_iou, head_iou = [], [], []
    for i, distractor in enumerate(seeds):
        result = env.reset(config.eval_distractor_offset + seed * episodes + i, distractor)
        policy = Policy(world_model, agent, config.model.variant == "as_input", greedy=True)
        total, frames_p, frames_h = 0.0, [], []
        while True:
            mask = provider.provide(result.observation, result.gt_mask).mask
            frames_p.append((mask, result.gt_mask))
            action = policy(result.observation, mask, result.is_first)
            if has_head:
                with torch.no_grad():
                    prob = world_model.decode_mask(policy.last_x)[0].numpy()
                frames_h.append((prob >= config.model.mask_threshold, result.gt_mask))
            if not result.cont:
                break
            result = env.step(action)
            total += result.reward
        returns.append(total)
        provider_iou.append(float(np.mean([frame_iou(p, g) for p, g in frames_p])))
        if has_head:
            head_iou.append(float(np.mean([frame_iou(p, g) for p, g in frames_h])))
    summary = {"mean_return": float(np.mean(returns)), "episode_returns": returns,
               "provider_iou": provider_iou, "distractor_seeds": seeds}
    if has_head:
        summary["head_iou"] = head_iou
    return summary


def run(config: RunConfig, run_dir, episodes_dir=None) -> RunReport:
    return Trainer(config, run_dir, episodes_dir).run()
