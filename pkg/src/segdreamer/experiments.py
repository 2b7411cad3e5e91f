"""Directional training experiments on the synthetic suite.

Each experiment is a set of labelled cells (a config plus a list of seeds). Cells
are trained with :func:`segdreamer.trainer.run`, completed cells are reused when
their final checkpoint already exists, and the outcome is a small table of
per-label statistics together with the directional check it is meant to support.

The full budgets are long (tens of thousands of world-model updates per run), so
``pilot`` shrinks the networks and the step budget for quick sanity runs. A pilot
result says nothing about whether the full-scale check holds.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from segdreamer.config import RunConfig, apply_overrides, from_dict, to_dict
from segdreamer.evalkit import mean_sem, read_metrics, series, summarize_run

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
PILOT_OVERRIDES = (
    "model.det_dim=64", "model.hidden_dim=64", "model.stoch_groups=8", "model.stoch_classes=8",
    "model.cnn_depth=8", "agent.hidden_dim=64", "batch_size=8", "seq_len=32", "env.episode_length=100",
)


def base_config(reward_mode: str = "dense", total_env_steps: int = 50_000, pilot: bool = False,
                extra: Sequence[str] = ()) -> RunConfig:
    """dot_reacher, 32x32, moving patches, with the evaluation cadence scaled to the budget."""
    overrides = [
        "env.task=dot_reacher", f"env.reward_mode={reward_mode}", "env.distractor_mode=moving_patches",
        "env.image_size=32", f"total_env_steps={total_env_steps}",
        f"eval_every={max(total_env_steps // 5, 1)}", f"log_every={max(total_env_steps // 50, 1)}",
        f"prefill_steps={min(2_500, total_env_steps // 10)}",
    ]
    if pilot:
        overrides += list(PILOT_OVERRIDES)
    return from_dict(apply_overrides(to_dict(RunConfig()), [*overrides, *extra])).validate()


def derive(config: RunConfig, overrides: Sequence[str]) -> RunConfig:
    return from_dict(apply_overrides(to_dict(config), overrides)).validate()


@dataclass
class Cell:
    label: str
    config: RunConfig
    seeds: Sequence[int] = DEFAULT_SEEDS


@dataclass
class LabelStats:
    label: str
    final_returns: list[float]
    final_return_mean: float
    final_return_sem: float
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass
class ExperimentResult:
    name: str
    stats: dict[str, LabelStats]
    passed: bool
    detail: str


def _final_metric(run_dir: Path, name: str, frac: float = 0.2) -> float:
    steps, values = series(read_metrics(run_dir), name)
    if not values.size:
        return float("nan")
    cutoff = steps.max() - frac * (steps.max() - steps.min())
    return float(values[steps >= cutoff].mean())


def run_cells(cells: Sequence[Cell], out_dir, runner: Optional[Callable] = None) -> dict[str, LabelStats]:
    from segdreamer.trainer import run

    runner = runner or run
    out_dir = Path(out_dir)
    stats = {}
    for cell in cells:
        dirs = []
        for seed in cell.seeds:
            run_dir = out_dir / cell.label / f"seed{seed}"
            cfg = dataclasses.replace(cell.config, seed=seed, label=cell.label)
            if not (run_dir / "checkpoints" / "final.ckpt").exists():
                log.info("training %s seed %d", cell.label, seed)
                runner(cfg, run_dir)
            dirs.append(run_dir)
        finals = [summarize_run(d).final_return for d in dirs]
        mean, sem = mean_sem(finals)
        metrics = {}
        for name in ("train/head_precision", "train/head_recall", "train/rgb_precision", "train/rgb_recall",
                     "train/provider_iou"):
            values = [_final_metric(d, name) for d in dirs]
            metrics[name] = float(np.mean(values))
        stats[cell.label] = LabelStats(cell.label, finals, mean, sem, metrics)
    return stats


def _fmt(stats: dict[str, LabelStats]) -> str:
    return ", ".join(f"{s.label}={s.final_return_mean:.2f}+-{s.final_return_sem:.2f}" for s in stats.values())


def sample_efficiency(out_dir, seeds=DEFAULT_SEEDS, total_env_steps=50_000, pilot=False) -> ExperimentResult:
    """sd_gt against the distraction-free oracle and against distracted reconstruction."""
    base = base_config("dense", total_env_steps, pilot)
    cells = [
        Cell("sd_gt", derive(base, ["model.variant=sd_gt"]), seeds),
        Cell("oracle", derive(base, ["model.variant=dreamer", "env.distractor_mode=none"]), seeds),
        Cell("dreamer", derive(base, ["model.variant=dreamer"]), seeds),
    ]
    s = run_cells(cells, out_dir)
    gt, oracle, dreamer = (s[k].final_return_mean for k in ("sd_gt", "oracle", "dreamer"))
    passed = gt >= 0.8 * oracle and gt >= 1.5 * dreamer
    return ExperimentResult("sample_efficiency", s, passed,
                            f"{_fmt(s)}; need sd_gt >= 0.8*oracle and >= 1.5*dreamer")


def sparse_reward(out_dir, seeds=DEFAULT_SEEDS, total_env_steps=50_000, pilot=False) -> ExperimentResult:
    base = base_config("sparse", total_env_steps, pilot)
    cells = [
        Cell("sd_gt", derive(base, ["model.variant=sd_gt"]), seeds),
        Cell("oracle", derive(base, ["model.variant=dreamer", "env.distractor_mode=none"]), seeds),
        Cell("dreamer", derive(base, ["model.variant=dreamer"]), seeds),
    ]
    s = run_cells(cells, out_dir)
    gt, oracle, dreamer = (s[k].final_return_mean for k in ("sd_gt", "oracle", "dreamer"))
    passed = oracle > 0 and gt > 0.2 * oracle and dreamer < 0.05 * oracle
    return ExperimentResult("sparse_reward", s, passed,
                            f"{_fmt(s)}; need sd_gt > 0.2*oracle and dreamer < 0.05*oracle")


def selective_vs_naive(out_dir, seeds=DEFAULT_SEEDS, total_env_steps=50_000, pilot=False,
                       p_fn_component: float = 0.3) -> ExperimentResult:
    """Recall of the selective mask head against recall of the naive RGB decoder."""
    noisy = [
        "masks.kind=simulated_fm", f"masks.p_fn_component={p_fn_component}",
    ]
    base = base_config("dense", total_env_steps, pilot, noisy)
    cells = [
        Cell("sd_selective", derive(base, ["model.variant=sd_selective"]), seeds),
        Cell("sd_naive", derive(base, ["model.variant=sd_naive"]), seeds),
    ]
    s = run_cells(cells, out_dir)
    sel, naive = s["sd_selective"].metrics, s["sd_naive"].metrics
    recall_gain = sel["train/head_recall"] - naive["train/rgb_recall"]
    precision_drop = naive["train/rgb_precision"] - sel["train/head_precision"]
    passed = recall_gain >= 0.1 and precision_drop <= 0.15
    return ExperimentResult(
        "selective_vs_naive", s, passed,
        f"recall gain {recall_gain:.3f} (need >= 0.1), precision drop {precision_drop:.3f} (need <= 0.15)")


def mask_quality_ordering(out_dir, seeds=DEFAULT_SEEDS, total_env_steps=50_000, pilot=False) -> ExperimentResult:
    base = base_config("dense", total_env_steps, pilot)
    moderate = ["masks.kind=simulated_fm", "masks.p_fn_component=0.1", "masks.p_fn_pixel=0.05"]
    severe = ["masks.kind=simulated_fm", "masks.p_fn_component=0.5", "masks.p_fn_pixel=0.2"]
    cells = [
        Cell("sd_gt", derive(base, ["model.variant=sd_gt"]), seeds),
        Cell("sd_selective_moderate", derive(base, ["model.variant=sd_selective", *moderate]), seeds),
        Cell("sd_selective_severe", derive(base, ["model.variant=sd_selective", *severe]), seeds),
    ]
    s = run_cells(cells, out_dir)
    a, b, c = (s[k].final_return_mean for k in ("sd_gt", "sd_selective_moderate", "sd_selective_severe"))
    return ExperimentResult("mask_quality_ordering", s, a >= b >= c, f"{_fmt(s)}; need gt >= moderate >= severe")


@torch.no_grad()
def background_agreement(world_model, env_config, n_pairs: int = 100, seed: int = 0) -> float:
    """Fraction of the C posterior categorical variables whose mode survives a background swap.

    Each pair shares the task-relevant state and differs only in the distractor;
    both frames are filtered from a fresh state as first frames of an episode.
    """
    from segdreamer.envsim import EnvState, random_state, render_observation

    rng = np.random.default_rng(seed)
    agree = []
    for _ in range(n_pairs):
        state = random_state(env_config, rng)
        other = random_state(env_config, rng)
        swapped = EnvState(state.relevant, other.distractor, state.step_index)
        modes = []
        for s in (state, swapped):
            obs = torch.as_tensor(render_observation(s, env_config)[0])[None].to(world_model.dtype)
            start = world_model.initial((1,))
            action = torch.zeros(1, world_model.action_dim, dtype=world_model.dtype)
            modes.append(world_model.filter_step(start, action, obs, True, sample_mode="mode").z.argmax(-1))
        agree.append(float((modes[0] == modes[1]).double().mean()))
    return float(np.mean(agree))


EXPERIMENTS = {
    "sample_efficiency": sample_efficiency,
    "sparse_reward": sparse_reward,
    "selective_vs_naive": selective_vs_naive,
    "mask_quality_ordering": mask_quality_ordering,
}
