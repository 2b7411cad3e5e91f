import numpy as np
import pytest
import torch

from segdreamer.config import RunConfig, apply_overrides, from_dict, to_dict
from segdreamer.worldmodel import WorldModel, WorldModelConfig

ACCEPTANCE_LINES: list[str] = []

TINY_RUN = (
    "total_env_steps=120", "prefill_steps=60", "seq_len=8", "batch_size=2", "eval_every=1000",
    "eval_episodes=2", "log_every=20", "env.episode_length=30", "model.det_dim=16", "model.hidden_dim=16",
    "model.stoch_groups=4", "model.stoch_classes=4", "model.cnn_depth=4", "agent.hidden_dim=16",
)


def tiny_run_config(*overrides: str) -> RunConfig:
    return from_dict(apply_overrides(to_dict(RunConfig()), [*TINY_RUN, *overrides])).validate()


def tiny_world_model(variant="sd_selective", image_size=8, dtype=torch.float32, seed=0, **kw) -> WorldModel:
    params = dict(det_dim=16, stoch_groups=4, stoch_classes=4, cnn_depth=4, hidden_dim=16)
    params.update(kw)
    torch.manual_seed(seed)
    return WorldModel(WorldModelConfig(variant=variant, **params), image_size, 2).to(dtype)


def random_batch(B=2, T=4, size=8, action_dim=2, seed=0, dtype=torch.float32, masks_equal_gt=False) -> dict:
    g = np.random.default_rng(seed)
    gt = g.random((B, T, size, size)) < 0.3
    masks = gt.copy() if masks_equal_gt else (gt & (g.random(gt.shape) < 0.8)) | (g.random(gt.shape) < 0.05)
    is_first = np.zeros((B, T), bool)
    is_first[:, 0] = True
    return {
        "observations": torch.tensor(g.integers(0, 256, (B, T, size, size, 3)) / 255.0, dtype=dtype),
        "actions": torch.tensor(g.uniform(-1, 1, (B, T, action_dim)), dtype=dtype),
        "rewards": torch.tensor(g.random((B, T)), dtype=dtype),
        "conts": torch.ones((B, T), dtype=dtype),
        "is_first": torch.tensor(is_first),
        "masks": torch.tensor(masks),
        "gt_masks": torch.tensor(gt),
    }


@pytest.fixture
def record_criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
