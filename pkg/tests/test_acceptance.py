"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 to 10 are multi-seed training experiments. They run only when
SEGDREAMER_RUN_EXPERIMENTS=1; SEGDREAMER_EXPERIMENT_STEPS and
SEGDREAMER_EXPERIMENT_PILOT=1 shrink them for smoke runs (a shrunken run is
reported as such and does not count as meeting the criterion).
"""

import dataclasses
import itertools
import os
import time

import numpy as np
import pytest
import torch
from scipy.special import rel_entr

from conftest import random_batch, tiny_run_config, tiny_world_model
from segdreamer import cli
from segdreamer.envsim import DistractingEnv, EnvConfig, EnvState, random_state, render_clean, render_observation
from segdreamer.trainer import Trainer, evaluate_policy
from segdreamer.worldmodel import LatentDistribution, WorldModel, WorldModelConfig, build_target, kl_losses, selective_l2

RUN_EXPERIMENTS = os.environ.get("SEGDREAMER_RUN_EXPERIMENTS") == "1"
EXPERIMENT_STEPS = int(os.environ.get("SEGDREAMER_EXPERIMENT_STEPS", "50000"))
EXPERIMENT_PILOT = os.environ.get("SEGDREAMER_EXPERIMENT_PILOT") == "1"


# 1 ------------------------------------------------------------------------------------------

def test_c01_selective_loss_exhaustive(record_criterion):
    g = np.random.default_rng(0)
    pred = torch.tensor(g.random((2, 2)), dtype=torch.float64)
    target = torch.tensor(g.random((2, 2)), dtype=torch.float64)
    masks = [np.array(bits, bool).reshape(2, 2) for bits in itertools.product([False, True], repeat=4)]
    start = time.perf_counter()
    worst = 0.0
    for fm, sd in itertools.product(masks, masks):
        prob = torch.tensor(np.where(sd, 0.95, 0.5))
        ours = float(selective_l2(pred, target, torch.tensor(fm), prob))
        total = 0.0
        for i, j in itertools.product(range(2), range(2)):
            if sd[i, j] and not fm[i, j]:
                continue
            total += (float(pred[i, j]) - float(target[i, j])) ** 2
        worst = max(worst, abs(ours - total / 4))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-6 and elapsed < 1.0
    record_criterion(1, passed, f"256 pairs, max |diff| {worst:.2e}, {elapsed:.3f}s")
    assert passed


# 2 ------------------------------------------------------------------------------------------

def _mask_grads(variant, seed):
    wm = tiny_world_model(variant, seed=seed)
    out = wm.loss(random_batch(seed=seed), generator=torch.Generator().manual_seed(seed))
    names, params = zip(*wm.core_parameters())
    grads = torch.autograd.grad(out.mask_loss, params, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


def test_c02_stop_gradient_contract(record_criterion):
    start = time.perf_counter()
    blocked = all(
        all(torch.count_nonzero(g) == 0 for g in _mask_grads(variant, seed).values())
        for variant in ("sd_selective", "sd_naive") for seed in range(3)
    )
    flowing = all(
        any(torch.count_nonzero(g) > 0 for g in _mask_grads("no_stopgrad", seed).values()) for seed in range(3)
    )
    elapsed = time.perf_counter() - start
    passed = blocked and flowing and elapsed < 10.0
    record_criterion(2, passed, f"blocked={blocked} no_stopgrad_flows={flowing} {elapsed:.2f}s")
    assert passed


# 3 ------------------------------------------------------------------------------------------

def test_c03_free_bits(record_criterion):
    g = np.random.default_rng(0)
    worst, above = 0.0, 0
    for _ in range(1000):
        C, K = g.integers(1, 5), g.integers(2, 6)
        scale = g.uniform(0.1, 4.0)
        p = torch.softmax(torch.tensor(g.normal(0, scale, (C, K))), -1)
        q = torch.softmax(torch.tensor(g.normal(0, scale, (C, K))), -1)
        dyn, rep = kl_losses(LatentDistribution(p.log()), LatentDistribution(q.log()))
        kl = rel_entr(p.numpy(), q.numpy()).sum()
        above += kl > 1
        ref = max(1.0, kl)
        worst = max(worst, abs(float(dyn) - ref), abs(float(rep) - ref))
    passed = worst <= 1e-6 and 0 < above < 1000
    record_criterion(3, passed, f"1000 draws ({above} above the floor), max |diff| {worst:.2e}")
    assert passed


# 4 ------------------------------------------------------------------------------------------

class FrozenStopGradients:
    """Finite-difference oracle for losses containing stop-gradients.

    Autograd through ``sg(f(theta))`` treats the stopped value as a constant, so
    the matching finite-difference target is L(theta, c0) with every stopped
    value c0 frozen at the reference parameters. The first pass records what
    each ``detach()`` returned; replay passes hand back those recorded values in
    call order instead of recomputing them.
    """

    def __init__(self):
        self.recorded: list[torch.Tensor] = []
        self._original = torch.Tensor.detach

    def record(self, fn):
        original, recorded = self._original, self.recorded

        def recording(t):
            out = original(t)
            recorded.append(out.clone())
            return out

        return self._patched(recording, fn)

    def replay(self, fn):
        queue = list(self.recorded)

        def replaying(t):
            frozen = queue.pop(0)
            assert frozen.shape == t.shape
            return frozen

        value = self._patched(replaying, fn)
        assert not queue, "stop-gradient call sequence changed between passes"
        return value

    def _patched(self, detach, fn):
        torch.Tensor.detach = detach
        try:
            return fn()
        finally:
            torch.Tensor.detach = self._original


def test_c04_gradient_check(record_criterion):
    start = time.perf_counter()
    torch.manual_seed(0)
    cfg = WorldModelConfig(det_dim=8, stoch_groups=4, stoch_classes=4, cnn_depth=2, hidden_dim=8,
                           variant="sd_selective")
    wm = WorldModel(cfg, 4, 2).double()
    with torch.no_grad():
        wm.post_net[-1].weight.mul_(20.0)  # keep every KL above the free-bits floor (smooth branch)
    batch = random_batch(B=2, T=3, size=4, dtype=torch.float64)
    frozen = FrozenStopGradients()
    out = frozen.record(lambda: wm.loss(batch, sample_mode="mean"))
    params = [(n, p) for n, p in wm.named_parameters()]
    analytic = [torch.zeros_like(p) if a is None else a
                for (_, p), a in zip(params, torch.autograd.grad(out.total, [p for _, p in params],
                                                                 allow_unused=True))]

    def loss():
        return frozen.replay(lambda: wm.loss(batch, sample_mode="mean").total).item()

    g = np.random.default_rng(0)
    eps, worst = 1e-6, 0.0
    with torch.no_grad():
        post, prior = wm.observe(batch["observations"], batch["actions"], batch["is_first"], sample_mode="mean")[1:]
        min_kl = float(kl_losses(post, prior)[0].min())
        for (name, p), a in zip(params, analytic):
            flat = p.view(-1)
            idx = g.choice(flat.numel(), size=min(8, flat.numel()), replace=False)
            fd = []
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss()
                flat[i] = orig - eps
                down = loss()
                flat[i] = orig
                fd.append((up - down) / (2 * eps))
            fd = torch.tensor(fd, dtype=torch.float64)
            an = a.reshape(-1)[torch.as_tensor(idx)]
            denom = max(float(an.norm()), float(fd.norm()))
            if denom > 1e-7:
                worst = max(worst, float((an - fd).norm()) / denom)
        # one directional derivative covering every parameter at once
        direction = [torch.tensor(g.normal(size=p.shape)) for _, p in params]
        for (_, p), d in zip(params, direction):
            p.add_(eps * d)
        up = loss()
        for (_, p), d in zip(params, direction):
            p.sub_(2 * eps * d)
        down = loss()
        for (_, p), d in zip(params, direction):
            p.add_(eps * d)
    fd_dir = (up - down) / (2 * eps)
    an_dir = sum(float((a * d).sum()) for a, d in zip(analytic, direction))
    dir_err = abs(fd_dir - an_dir) / max(abs(fd_dir), abs(an_dir))
    elapsed = time.perf_counter() - start
    passed = min_kl > 1.0 and worst <= 1e-4 and dir_err <= 1e-4 and elapsed < 120
    record_criterion(4, passed, f"{len(params)} tensors, max rel err {worst:.2e}, directional {dir_err:.2e}, "
                                f"min KL {min_kl:.2f}, {elapsed:.1f}s")
    assert passed


# 5 ------------------------------------------------------------------------------------------

def test_c05_environment_decomposition(record_criterion):
    failures = 0
    checked = 0
    for task in ("dot_reacher", "pixel_pendulum"):
        cfg = EnvConfig(task=task, distractor_mode="moving_patches")
        rng = np.random.default_rng(1)
        for _ in range(100):
            state = random_state(cfg, rng)
            other = random_state(dataclasses.replace(cfg, distractor_mode="scrolling_noise"), rng)
            action = rng.uniform(-1, 1, cfg.action_dim)
            a, b = DistractingEnv(cfg), DistractingEnv(cfg)
            a.set_state(state)
            b.set_state(EnvState(state.relevant, other.distractor, state.step_index))
            ra, rb = a.step(action), b.step(action)
            same_next = all(np.array_equal(x, y) for x, y in zip(vars(a.state.relevant).values(),
                                                                 vars(b.state.relevant).values()))
            obs, mask = render_observation(state, cfg)
            clean_ok = np.array_equal(obs * mask[..., None], render_clean(state, cfg))
            failures += not (ra.reward == rb.reward and same_next and clean_ok)
            checked += 1
    passed = failures == 0
    record_criterion(5, passed, f"{checked} states over 2 environments, {failures} violations")
    assert passed


# 6 ------------------------------------------------------------------------------------------

def test_c06_masked_target_fidelity(record_criterion):
    mismatched = 0
    for task in ("dot_reacher", "pixel_pendulum"):
        for mode in ("moving_patches", "scrolling_noise"):
            cfg = EnvConfig(task=task, distractor_mode=mode)
            rng = np.random.default_rng(2)
            for _ in range(50):
                state = random_state(cfg, rng)
                obs, gt = render_observation(state, cfg)
                target = build_target(torch.from_numpy(obs), torch.from_numpy(gt)).numpy()
                mismatched += int(np.count_nonzero(target != render_clean(state, cfg)))
    passed = mismatched == 0
    record_criterion(6, passed, f"200 states, {mismatched} mismatched pixel values")
    assert passed


# 7 to 10 --------------------------------------------------------------------------------------

def _experiment(number, name, record_criterion, tmp_root):
    from segdreamer.experiments import EXPERIMENTS

    if not RUN_EXPERIMENTS:
        record_criterion_skip(record_criterion, number, name)
        pytest.skip(f"criterion {number}: set SEGDREAMER_RUN_EXPERIMENTS=1 to train the 3-seed experiment")
    out = os.environ.get("SEGDREAMER_EXPERIMENT_DIR") or str(tmp_root)
    result = EXPERIMENTS[name](f"{out}/{name}", total_env_steps=EXPERIMENT_STEPS, pilot=EXPERIMENT_PILOT)
    reduced = EXPERIMENT_PILOT or EXPERIMENT_STEPS < 50_000
    detail = result.detail + (" [reduced budget: not a verdict on the criterion]" if reduced else "")
    record_criterion(number, result.passed, detail)
    assert result.passed, detail


def record_criterion_skip(record_criterion, number, name):
    from conftest import ACCEPTANCE_LINES

    line = f"CRITERION {number:>2}: NOT RUN  {name}: 3-seed training experiment, enable with SEGDREAMER_RUN_EXPERIMENTS=1"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.mark.slow
def test_c07_sample_efficiency(record_criterion, tmp_path):
    _experiment(7, "sample_efficiency", record_criterion, tmp_path)


@pytest.mark.slow
def test_c08_sparse_reward(record_criterion, tmp_path):
    _experiment(8, "sparse_reward", record_criterion, tmp_path)


@pytest.mark.slow
def test_c09_selective_vs_naive(record_criterion, tmp_path):
    _experiment(9, "selective_vs_naive", record_criterion, tmp_path)


@pytest.mark.slow
def test_c10_mask_quality_ordering(record_criterion, tmp_path):
    _experiment(10, "mask_quality_ordering", record_criterion, tmp_path)


# 11 -----------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def gt_trained_checkpoint(tmp_path_factory):
    """A fixed, deterministic checkpoint whose mask head was trained on ground-truth masks."""
    run_dir = tmp_path_factory.mktemp("c11")
    cfg = tiny_run_config("model.variant=sd_selective", "masks.kind=ground_truth", "env.image_size=32",
                          "total_env_steps=400", "prefill_steps=100")
    trainer = Trainer(cfg, run_dir)
    trainer.run()
    return trainer


def _paired_pred_losses(wm, batch, seed):
    with torch.no_grad():
        sel = wm.loss(batch, "sd_selective", torch.Generator().manual_seed(seed))
        naive = wm.loss(batch, "sd_naive", torch.Generator().manual_seed(seed))
    gap = abs(float(sel.components["pred"]) - float(naive.components["pred"]))
    return gap, float(sel.components["maskout_frac"]), sel.outputs.mask_prob


def test_c11_perfect_mask_equivalence(record_criterion, gt_trained_checkpoint, monkeypatch):
    trainer = gt_trained_checkpoint
    wm, cfg = trainer.wm, trainer.config
    worst_trained, worst_perfect, maskout, confident = 0.0, 0.0, 0.0, 0.0
    for seed in range(5):
        batch = trainer.replay.sample(4, cfg.seq_len, np.random.default_rng(seed)).to_torch()
        batch["masks"] = batch["gt_masks"].clone()
        gap, frac, _ = _paired_pred_losses(wm, batch, seed)
        worst_trained, maskout = max(worst_trained, gap), max(maskout, frac)
        # same checkpoint with a mask head that is confident exactly on the relevant pixels
        perfect = 10.0 * (2.0 * batch["gt_masks"].double() - 1.0)
        with monkeypatch.context() as m:
            m.setattr(wm, "mask_logits", lambda x: perfect.to(x.dtype))
            gap, frac, prob = _paired_pred_losses(wm, batch, seed)
        confident = max(confident, float((prob >= cfg.model.mask_threshold).double().mean()))
        worst_perfect, maskout = max(worst_perfect, gap), max(maskout, frac)
    passed = worst_trained <= 1e-6 and worst_perfect <= 1e-6 and confident > 0
    record_criterion(11, passed, f"max |L_pred gap| trained head {worst_trained:.2e}, perfect head "
                                 f"{worst_perfect:.2e}; largest maskout fraction {maskout:.4f}")
    assert passed


# 12 -----------------------------------------------------------------------------------------

def test_c12_evaluation_protocol(record_criterion, gt_trained_checkpoint):
    trainer = gt_trained_checkpoint
    cfg = trainer.config
    parser_default = cli.build_parser().parse_args(["eval", "x.ckpt"]).episodes
    summary = evaluate_policy(dataclasses.replace(cfg, eval_episodes=10), trainer.wm, trainer.agent)
    train_range = set(cfg.train_distractor_range())
    disjoint = not (set(summary["distractor_seeds"]) & train_range)
    trained_in_range = all(s in train_range for s in trainer.train_distractor_seeds)
    passed = (parser_default == 10 and type(cfg).__dataclass_fields__["eval_episodes"].default == 10
              and len(summary["episode_returns"]) == 10 and disjoint and trained_in_range)
    record_criterion(12, passed, f"default episodes {parser_default}, ran {len(summary['episode_returns'])}, "
                                 f"eval seeds disjoint from training seeds: {disjoint}")
    assert passed
