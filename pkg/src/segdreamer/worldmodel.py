"""Recurrent latent world model with masked-RGB and binary-mask decoders.

State layout follows the usual recurrent state-space model: a deterministic
GRU state ``h`` and a stochastic latent ``z`` made of ``C`` one-hot categorical
variables with ``K`` classes each. ``x = [h; z]`` feeds every head.

Images are channels-last ``(..., H, W, 3)`` floats in ``[0, 1]`` at the module
boundary; the convolutions work channels-first internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from segdreamer.errors import ConfigError, InputError, NumericalError, ShapeError

VARIANTS = ("sd_gt", "sd_selective", "sd_naive", "as_input", "no_stopgrad", "dreamer")
MASK_HEAD_VARIANTS = ("sd_selective", "sd_naive", "no_stopgrad")
SELECTIVE_VARIANTS = ("sd_selective", "no_stopgrad")


@dataclass
class WorldModelConfig:
    det_dim: int = 256
    stoch_groups: int = 16
    stoch_classes: int = 16
    cnn_depth: int = 24
    hidden_dim: int = 256
    beta_pred: float = 1.0
    beta_dyn: float = 0.5
    beta_rep: float = 0.1
    free_bits: float = 1.0
    mask_threshold: float = 0.9
    mask_loss_scale: float = 1.0
    unimix: float = 0.01
    variant: str = "sd_selective"
    learn_rate: float = 1e-4
    adam_eps: float = 1e-8
    grad_clip: float = 1000.0

    def validate(self) -> "WorldModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant: {self.variant!r} not in {VARIANTS}")
        for name in ("beta_pred", "beta_dyn", "beta_rep"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"model.{name}: must be > 0, got {getattr(self, name)}")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ConfigError(f"model.mask_threshold: must lie in (0, 1), got {self.mask_threshold}")
        if self.free_bits != 1.0:
            raise ConfigError(f"model.free_bits: fixed at 1.0, got {self.free_bits}")
        if not 0.0 <= self.unimix < 1.0:
            raise ConfigError(f"model.unimix: must lie in [0, 1), got {self.unimix}")
        for name in ("det_dim", "stoch_groups", "stoch_classes", "cnn_depth", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}: must be >= 1")
        return self

    @property
    def stoch_dim(self) -> int:
        return self.stoch_groups * self.stoch_classes

    @property
    def state_dim(self) -> int:
        return self.det_dim + self.stoch_dim

    @property
    def has_mask_head(self) -> bool:
        return self.variant in MASK_HEAD_VARIANTS


@dataclass
class LatentDistribution:
    """``C x K`` categorical; ``logits`` are log-probabilities after uniform mixing."""

    logits: torch.Tensor  # (..., C, K)

    @property
    def probs(self) -> torch.Tensor:
        return self.logits.exp()

    def mode(self) -> torch.Tensor:
        return F.one_hot(self.logits.argmax(-1), self.logits.shape[-1]).to(self.logits.dtype)

    def detach(self) -> "LatentDistribution":
        return LatentDistribution(self.logits.detach())


@dataclass
class LatentState:
    h: torch.Tensor  # (..., det_dim)
    z: torch.Tensor  # (..., C, K)

    @property
    def x(self) -> torch.Tensor:
        return torch.cat([self.h, self.z.flatten(-2)], -1)

    def detach(self) -> "LatentState":
        return LatentState(self.h.detach(), self.z.detach())


@dataclass
class WorldModelOutputs:
    rgb_mean: torch.Tensor
    mask_prob: Optional[torch.Tensor]
    reward_pred: torch.Tensor
    cont_prob: torch.Tensor
    posterior: LatentDistribution
    prior: LatentDistribution


@dataclass
class LossOutput:
    total: torch.Tensor
    components: dict[str, torch.Tensor]
    states: LatentState  # posterior states, (B, T, ...)
    outputs: WorldModelOutputs = field(repr=False)
    mask_loss: Optional[torch.Tensor] = field(default=None, repr=False)  # attached to the graph


# --- latent distribution helpers ----------------------------------------------

def mix_logits(raw: torch.Tensor, unimix: float) -> torch.Tensor:
    """Log of ``(1 - unimix) * softmax(raw) + unimix / K``; keeps every class reachable."""
    probs = raw.softmax(-1)
    if unimix > 0:
        probs = (1.0 - unimix) * probs + unimix / raw.shape[-1]
    return probs.log()


def sample_latent(dist: LatentDistribution, generator: Optional[torch.Generator] = None,
                  mode: str = "sample") -> torch.Tensor:
    """One-hot sample with straight-through gradients.

    ``mode="sample"`` draws a class per group; the forward value is exactly
    one-hot and the backward pass sees the class probabilities. ``mode="mode"``
    takes the argmax the same way; ``mode="mean"`` returns the probabilities
    themselves (a smooth surrogate used for finite-difference checks).
    """
    probs = dist.probs
    if mode == "mean":
        return probs
    if mode == "mode":
        onehot = dist.mode()
    else:
        flat = probs.detach().reshape(-1, probs.shape[-1])
        idx = torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])
        onehot = F.one_hot(idx, probs.shape[-1]).to(probs.dtype)
    return onehot + (probs - probs.detach())


def categorical_kl(lhs: LatentDistribution, rhs: LatentDistribution) -> torch.Tensor:
    """KL(lhs || rhs) summed over the C groups."""
    p = lhs.probs
    return (p * (lhs.logits - rhs.logits)).sum((-1, -2))


def kl_losses(post: LatentDistribution, prior: LatentDistribution, free_bits: float = 1.0):
    """Free-bits clipped dynamics and representation losses, per element.

    dyn trains the prior toward a frozen posterior, rep trains the posterior
    toward a frozen prior; both are ``max(free_bits, KL)``.
    """
    dyn = categorical_kl(post.detach(), prior).clamp(min=free_bits)
    rep = categorical_kl(post, prior.detach()).clamp(min=free_bits)
    return dyn, rep


# --- reconstruction losses --------------------------------------------------------

def build_target(observation, mask):
    """Observation with irrelevant pixels set to exactly zero."""
    observation = torch.as_tensor(observation)
    mask = torch.as_tensor(mask)
    if observation.shape[:-1] != mask.shape:
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match observation {tuple(observation.shape)}")
    return torch.where(mask.bool()[..., None], observation, torch.zeros((), dtype=observation.dtype))


def maskout_region(mask_fm, mask_prob, threshold: float = 0.9) -> torch.Tensor:
    """Pixels the model head calls relevant (prob >= threshold) that the provider left out."""
    mask_sd = torch.as_tensor(mask_prob).detach() >= threshold
    return mask_sd & ~torch.as_tensor(mask_fm).bool()


def _per_pixel_sq(pred, target, mask_fm) -> torch.Tensor:
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    mask_fm = torch.as_tensor(mask_fm)
    if pred.dim() == mask_fm.dim():  # single-channel image given as (..., H, W)
        pred, target = pred[..., None], target[..., None]
    if pred.shape[:-1] != mask_fm.shape:
        raise ShapeError(f"mask shape {tuple(mask_fm.shape)} does not match image {tuple(pred.shape)}")
    return (pred - target).pow(2).sum(-1)


def selective_l2(pred, target, mask_fm, mask_prob, threshold: float = 0.9, reduce: bool = True) -> torch.Tensor:
    """Squared error averaged over all H*W pixels, zeroed where the loss is masked out.

    The zeroed pixels stay in the denominator, so the loss scale does not depend
    on how many pixels a given frame discards.
    """
    sq = _per_pixel_sq(pred, target, mask_fm)
    mask_prob = torch.as_tensor(mask_prob)
    if mask_prob.shape != sq.shape:
        raise ShapeError(f"mask_prob shape {tuple(mask_prob.shape)} does not match image {tuple(sq.shape)}")
    keep = ~maskout_region(mask_fm, mask_prob, threshold)
    per_frame = torch.where(keep, sq, torch.zeros((), dtype=sq.dtype)).mean((-1, -2))
    return per_frame.mean() if reduce else per_frame


def naive_l2(pred, target, mask_fm=None, reduce: bool = True) -> torch.Tensor:
    pred = torch.as_tensor(pred)
    if mask_fm is None:
        mask_fm = torch.ones(pred.shape[:-1], dtype=torch.bool)
    per_frame = _per_pixel_sq(pred, target, mask_fm).mean((-1, -2))
    return per_frame.mean() if reduce else per_frame


# --- networks ------------------------------------------------------------------------

def _num_down(image_size: int) -> int:
    if image_size < 4 or image_size & (image_size - 1):
        raise ConfigError(f"image size must be a power of two >= 4, got {image_size}")
    return max(1, int(math.log2(image_size)) - 2)


def _mlp(inp: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(inp, hidden), nn.LayerNorm(hidden), nn.SiLU(), nn.Linear(hidden, out))


class ConvEncoder(nn.Module):
    def __init__(self, image_size: int, depth: int):
        super().__init__()
        layers, ch = [], 3
        n = _num_down(image_size)
        for i in range(n):
            out = depth * 2**i
            layers += [nn.Conv2d(ch, out, 4, 2, 1), nn.GroupNorm(1, out), nn.SiLU()]
            ch = out
        self.net = nn.Sequential(*layers, nn.Flatten())
        self.out_dim = ch * (image_size // 2**n) ** 2

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        lead = images.shape[:-3]
        flat = images.reshape(-1, *images.shape[-3:]).permute(0, 3, 1, 2)
        return self.net(flat - 0.5).reshape(*lead, self.out_dim)


class ConvDecoder(nn.Module):
    def __init__(self, in_dim: int, image_size: int, depth: int, out_channels: int):
        super().__init__()
        n = _num_down(image_size)
        self.start = image_size // 2**n
        self.ch = depth * 2 ** (n - 1)
        self.image_size, self.out_channels = image_size, out_channels
        self.fc = nn.Linear(in_dim, self.ch * self.start**2)
        layers, ch = [], self.ch
        for i in reversed(range(n)):
            if i == 0:
                layers.append(nn.ConvTranspose2d(ch, out_channels, 4, 2, 1))
            else:
                out = depth * 2 ** (i - 1)
                layers += [nn.ConvTranspose2d(ch, out, 4, 2, 1), nn.GroupNorm(1, out), nn.SiLU()]
                ch = out
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-1]
        y = self.fc(x.reshape(-1, x.shape[-1])).reshape(-1, self.ch, self.start, self.start)
        y = self.net(y).permute(0, 2, 3, 1)
        return y.reshape(*lead, self.image_size, self.image_size, self.out_channels)


class WorldModel(nn.Module):
    def __init__(self, config: WorldModelConfig, image_size: int, action_dim: int):
        super().__init__()
        self.config = config.validate()
        self.image_size, self.action_dim = image_size, action_dim
        c = config
        self.encoder = ConvEncoder(image_size, c.cnn_depth)
        self.img_in = nn.Sequential(nn.Linear(c.stoch_dim + action_dim, c.hidden_dim), nn.LayerNorm(c.hidden_dim), nn.SiLU())
        self.cell = nn.GRUCell(c.hidden_dim, c.det_dim)
        self.prior_net = _mlp(c.det_dim, c.hidden_dim, c.stoch_dim)
        self.post_net = _mlp(c.det_dim + self.encoder.out_dim, c.hidden_dim, c.stoch_dim)
        self.reward_head = _mlp(c.state_dim, c.hidden_dim, 1)
        self.cont_head = _mlp(c.state_dim, c.hidden_dim, 1)
        self.rgb_decoder = ConvDecoder(c.state_dim, image_size, c.cnn_depth, 3)
        # always built so every variant shares one parameter layout; unused ones never train it
        self.mask_decoder = ConvDecoder(c.state_dim, image_size, c.cnn_depth, 1)

    # parameter groups used by the gradient-blocking checks
    def core_parameters(self):
        for module in (self.encoder, self.img_in, self.cell, self.prior_net, self.post_net,
                       self.reward_head, self.cont_head):
            yield from module.named_parameters(prefix=self._name_of(module))

    def _name_of(self, module: nn.Module) -> str:
        return next(name for name, m in self.named_children() if m is module)

    @property
    def dtype(self) -> torch.dtype:
        return self.cell.weight_hh.dtype

    def initial(self, batch_shape) -> LatentState:
        c = self.config
        h = torch.zeros(*batch_shape, c.det_dim, dtype=self.dtype)
        z = torch.zeros(*batch_shape, c.stoch_groups, c.stoch_classes, dtype=self.dtype)
        return LatentState(h, z)

    # --- components -----------------------------------------------------------------

    def sequence_step(self, h: torch.Tensor, z: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        c = self.config
        if h.shape[-1] != c.det_dim or z.shape[-2:] != (c.stoch_groups, c.stoch_classes) or a.shape[-1] != self.action_dim:
            raise ShapeError(
                f"sequence_step expects h(..., {c.det_dim}), z(..., {c.stoch_groups}, {c.stoch_classes}), "
                f"a(..., {self.action_dim}); got {tuple(h.shape)}, {tuple(z.shape)}, {tuple(a.shape)}"
            )
        lead = h.shape[:-1]
        inp = self.img_in(torch.cat([z.flatten(-2), a], -1))
        return self.cell(inp.reshape(-1, inp.shape[-1]), h.reshape(-1, c.det_dim)).reshape(*lead, c.det_dim)

    def _dist(self, raw: torch.Tensor) -> LatentDistribution:
        c = self.config
        raw = raw.reshape(*raw.shape[:-1], c.stoch_groups, c.stoch_classes)
        return LatentDistribution(mix_logits(raw, c.unimix))

    def prior(self, h: torch.Tensor) -> LatentDistribution:
        return self._dist(self.prior_net(h))

    def posterior_from_embed(self, h: torch.Tensor, embed: torch.Tensor) -> LatentDistribution:
        return self._dist(self.post_net(torch.cat([h, embed], -1)))

    def posterior(self, h: torch.Tensor, observation: torch.Tensor) -> LatentDistribution:
        return self.posterior_from_embed(h, self.embed(observation))

    def embed(self, observation: torch.Tensor) -> torch.Tensor:
        check_images(observation, self.image_size)
        return self.encoder(observation.to(self.dtype))

    def decode_rgb(self, x: torch.Tensor) -> torch.Tensor:
        self._check_state(x)
        return self.rgb_decoder(x)

    def mask_logits(self, x: torch.Tensor) -> torch.Tensor:
        self._check_state(x)
        return self.mask_decoder(x)[..., 0]

    def decode_mask(self, x: torch.Tensor, stop_gradient: bool = True) -> torch.Tensor:
        """Per-pixel relevance probabilities, strictly inside (0, 1)."""
        logits = self.mask_logits(x.detach() if stop_gradient else x)
        return torch.sigmoid(logits.clamp(-15.0, 15.0))

    def reward(self, x: torch.Tensor) -> torch.Tensor:
        return self.reward_head(x)[..., 0]

    def cont_logit(self, x: torch.Tensor) -> torch.Tensor:
        return self.cont_head(x)[..., 0]

    def _check_state(self, x: torch.Tensor) -> None:
        if x.shape[-1] != self.config.state_dim:
            raise ShapeError(f"model state must have last dim {self.config.state_dim}, got {tuple(x.shape)}")

    # --- rollouts -----------------------------------------------------------------------

    def observe(self, observations: torch.Tensor, actions: torch.Tensor, is_first: torch.Tensor,
                generator: Optional[torch.Generator] = None, sample_mode: str = "sample",
                start: Optional[LatentState] = None):
        """Filter a (B, T) sequence. ``actions[:, t]`` is the action that led into frame t."""
        B, T = observations.shape[:2]
        embed = self.embed(observations)
        state = self.initial((B,)) if start is None else start
        actions = actions.to(self.dtype)
        hs, zs, posts, priors = [], [], [], []
        for t in range(T):
            keep = (1.0 - is_first[:, t].to(self.dtype))[:, None]
            h_prev, z_prev = state.h * keep, state.z * keep[..., None]
            h = self.sequence_step(h_prev, z_prev, actions[:, t] * keep)
            post = self.posterior_from_embed(h, embed[:, t])
            prior = self.prior(h)
            z = sample_latent(post, generator, sample_mode)
            state = LatentState(h, z)
            hs.append(h), zs.append(z), posts.append(post.logits), priors.append(prior.logits)
        states = LatentState(torch.stack(hs, 1), torch.stack(zs, 1))
        return states, LatentDistribution(torch.stack(posts, 1)), LatentDistribution(torch.stack(priors, 1))

    def filter_step(self, state: LatentState, action: torch.Tensor, observation: torch.Tensor, is_first: bool,
                    generator: Optional[torch.Generator] = None, sample_mode: str = "sample") -> LatentState:
        """One online posterior update while acting; matches :meth:`observe` step for step."""
        if is_first:
            state = self.initial(state.h.shape[:-1])
            action = torch.zeros_like(action)
        h = self.sequence_step(state.h, state.z, action.to(self.dtype))
        post = self.posterior(h, observation)
        return LatentState(h, sample_latent(post, generator, sample_mode))

    def img_step(self, state: LatentState, action: torch.Tensor,
                 generator: Optional[torch.Generator] = None, sample_mode: str = "sample") -> LatentState:
        h = self.sequence_step(state.h, state.z, action.to(self.dtype))
        z = sample_latent(self.prior(h), generator, sample_mode)
        return LatentState(h, z)

    # --- training objective ---------------------------------------------------------------

    def loss(self, batch, variant: Optional[str] = None, generator: Optional[torch.Generator] = None,
             sample_mode: str = "sample") -> LossOutput:
        """Weighted prediction + dynamics + representation loss, plus the mask-head BCE.

        ``batch`` maps observations (B,T,H,W,3), actions (B,T,A), rewards (B,T),
        conts (B,T), is_first (B,T), masks (B,T,H,W) and gt_masks (B,T,H,W) to tensors.
        """
        c = self.config
        variant = variant or c.variant
        if variant not in VARIANTS:
            raise ConfigError(f"model.variant: {variant!r} not in {VARIANTS}")
        obs = batch["observations"].to(self.dtype)
        mask_fm = batch["masks"].bool()
        enc_in = build_target(obs, mask_fm) if variant == "as_input" else obs
        states, post, prior = self.observe(enc_in, batch["actions"], batch["is_first"], generator, sample_mode)
        x = states.x

        rgb = self.decode_rgb(x)
        if variant == "sd_gt":
            target = build_target(obs, batch["gt_masks"].bool())
        elif variant == "dreamer":
            target = obs
        else:
            target = build_target(obs, mask_fm)

        comps: dict[str, torch.Tensor] = {}
        mask_prob = None
        if variant in MASK_HEAD_VARIANTS:
            logits = self.mask_logits(x if variant == "no_stopgrad" else x.detach())
            bce = F.binary_cross_entropy_with_logits(logits, mask_fm.to(self.dtype), reduction="none")
            comps["mask_bce"] = bce.sum((-1, -2)).mean()
            mask_prob = torch.sigmoid(logits.detach().clamp(-15.0, 15.0))

        n_pix = self.image_size**2
        if variant in SELECTIVE_VARIANTS:
            rgb_term = selective_l2(rgb, target, mask_fm, mask_prob, c.mask_threshold, reduce=False) * n_pix
            comps["maskout_frac"] = maskout_region(mask_fm, mask_prob, c.mask_threshold).float().mean()
        else:
            rgb_term = naive_l2(rgb, target, reduce=False) * n_pix
        reward_pred, cont_logit = self.reward(x), self.cont_logit(x)
        reward_term = (reward_pred - batch["rewards"].to(self.dtype)).pow(2)
        cont_term = F.binary_cross_entropy_with_logits(cont_logit, batch["conts"].to(self.dtype), reduction="none")
        pred = rgb_term + reward_term + cont_term
        dyn, rep = kl_losses(post, prior, c.free_bits)

        total = (c.beta_pred * pred + c.beta_dyn * dyn + c.beta_rep * rep).mean()
        if "mask_bce" in comps:
            total = total + c.mask_loss_scale * comps["mask_bce"]
        comps.update(
            rgb=rgb_term.mean(), reward=reward_term.mean(), cont=cont_term.mean(), pred=pred.mean(),
            dyn=dyn.mean(), rep=rep.mean(), kl=categorical_kl(post, prior).detach().mean(), total=total,
        )
        for name, value in comps.items():
            if not torch.isfinite(value).all():
                raise NumericalError(name)
        outputs = WorldModelOutputs(
            rgb_mean=rgb.detach(), mask_prob=mask_prob, reward_pred=reward_pred.detach(),
            cont_prob=torch.sigmoid(cont_logit.detach()), posterior=post.detach(), prior=prior.detach(),
        )
        return LossOutput(total, {k: v.detach() for k, v in comps.items()}, states, outputs, comps.get("mask_bce"))


def check_images(images: torch.Tensor, image_size: int) -> None:
    if images.shape[-3:] != (image_size, image_size, 3):
        raise ShapeError(f"expected images (..., {image_size}, {image_size}, 3), got {tuple(images.shape)}")
    if images.numel() and (images.min() < 0 or images.max() > 1):
        raise InputError("observation pixels must lie in [0, 1]")


def rgb_relevance(rgb: torch.Tensor) -> torch.Tensor:
    """Luminance of decoded masked-RGB frames, used to binarise RGB predictions."""
    weights = torch.tensor([0.2126, 0.7152, 0.0722], dtype=rgb.dtype)
    return (rgb * weights).sum(-1).clamp(0.0, 1.0)
