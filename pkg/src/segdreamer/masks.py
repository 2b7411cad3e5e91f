"""Per-frame task-relevance mask providers.

Three kinds are supported: ground-truth pass-through, a simulated segmentation
model that corrupts the ground truth independently on every frame, and an
external predictor plugged in through :meth:`MaskProvider.register_adapter`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from segdreamer.container import read_container, write_container
from segdreamer.errors import ConfigError, ShapeError

KINDS = ("ground_truth", "simulated_fm", "external")
PROVENANCE = {"ground_truth": "gt", "simulated_fm": "fm", "external": "external"}

# 4-connectivity
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class MaskProviderConfig:
    kind: str = "ground_truth"
    p_fn_component: float = 0.1
    p_fn_pixel: float = 0.05
    morph_radius: int = 1
    p_fp_blob: float = 0.05
    blob_size: int = 9
    seed: int = 0

    def validate(self) -> "MaskProviderConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"masks.kind: {self.kind!r} not in {KINDS}")
        for name in ("p_fn_component", "p_fn_pixel", "p_fp_blob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"masks.{name}: probability must lie in [0, 1], got {value}")
        if self.morph_radius < 0:
            raise ConfigError(f"masks.morph_radius: must be >= 0, got {self.morph_radius}")
        if self.blob_size < 1:
            raise ConfigError(f"masks.blob_size: must be >= 1, got {self.blob_size}")
        return self


# Named corruption profiles. "moderate" is the default simulated segmenter.
PROFILES = {
    "clean": dict(p_fn_component=0.0, p_fn_pixel=0.0, morph_radius=0, p_fp_blob=0.0),
    "moderate": dict(p_fn_component=0.1, p_fn_pixel=0.05, morph_radius=1, p_fp_blob=0.05, blob_size=9),
    "severe": dict(p_fn_component=0.5, p_fn_pixel=0.2, morph_radius=1, p_fp_blob=0.05, blob_size=9),
}


def profile(name: str, **overrides) -> MaskProviderConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown mask profile {name!r}; choose from {sorted(PROFILES)}")
    params = {**PROFILES[name], **overrides}
    params.setdefault("kind", "simulated_fm")
    return MaskProviderConfig(**params).validate()


@dataclass
class MaskFrame:
    mask: np.ndarray
    provenance: str


@dataclass
class CorruptionTrace:
    """What the simulated segmenter did on one frame."""

    dropped_components: int
    morph_op: str
    morph_radius: int
    blob: Optional[np.ndarray]


def corrupt(gt_mask: np.ndarray, config: MaskProviderConfig, rng: np.random.Generator,
            trace: bool = False):
    """Simulated segmentation of one frame.

    Order: whole-component drop, per-pixel drop, random erosion or dilation,
    spurious blob. The number and order of random draws depends only on the
    frame geometry, so two configs sharing a seed share their draws.
    """
    gt_mask = np.asarray(gt_mask, dtype=bool)
    labels, n = ndimage.label(gt_mask, structure=_CROSS)
    comp_u = rng.random(n)
    pixel_u = rng.random(gt_mask.shape)
    radius = int(rng.integers(0, config.morph_radius + 1))
    dilate = bool(rng.random() < 0.5)
    blob_u = rng.random()
    side = max(1, int(round(math.sqrt(config.blob_size))))
    h, w = gt_mask.shape
    top = int(rng.integers(0, max(1, h - side + 1)))
    left = int(rng.integers(0, max(1, w - side + 1)))

    dropped = np.flatnonzero(comp_u < config.p_fn_component) + 1
    mask = gt_mask & ~np.isin(labels, dropped)
    mask &= pixel_u >= config.p_fn_pixel
    if radius > 0 and mask.any():
        op = ndimage.binary_dilation if dilate else ndimage.binary_erosion
        mask = op(mask, structure=_CROSS, iterations=radius)
    blob = None
    if blob_u < config.p_fp_blob:
        blob = np.zeros_like(mask)
        blob[top:top + side, left:left + side] = True
        mask = mask | blob
    if trace:
        return mask, CorruptionTrace(len(dropped), "dilate" if dilate else "erode", radius, blob)
    return mask


class MaskProvider:
    """Not thread-safe: the internal generator advances on every frame."""

    def __init__(self, config: MaskProviderConfig, adapter: Optional[Callable] = None):
        self.config = config.validate()
        self._rng = np.random.default_rng([config.seed, 17])
        self._adapter = adapter

    def register_adapter(self, predict: Callable[[np.ndarray], np.ndarray]) -> None:
        self._adapter = predict

    def provide(self, observation: np.ndarray, gt_mask: Optional[np.ndarray] = None,
                rng: Optional[np.random.Generator] = None) -> MaskFrame:
        kind = self.config.kind
        spatial = np.asarray(observation).shape[:2]
        if kind == "external":
            if self._adapter is None:
                raise ConfigError("masks.kind: 'external' requires a registered adapter")
            out = np.asarray(self._adapter(observation))
            if out.shape != spatial:
                raise ShapeError(f"adapter returned shape {out.shape}, expected {spatial}")
            return MaskFrame(out.astype(bool), "external")
        if gt_mask is None:
            raise ConfigError(f"masks.kind: '{kind}' needs the ground-truth mask")
        gt_mask = np.asarray(gt_mask, dtype=bool)
        if gt_mask.shape != spatial:
            raise ShapeError(f"gt_mask shape {gt_mask.shape} does not match observation {spatial}")
        if kind == "ground_truth":
            return MaskFrame(gt_mask.copy(), "gt")
        return MaskFrame(corrupt(gt_mask, self.config, self._rng if rng is None else rng), "fm")


def generate_mask_file(episode_path, out_path, provider: MaskProvider) -> Path:
    """Offline pseudo-labelling of a recorded episode into a parallel mask container."""
    header, arrays = read_container(episode_path, kind="episode")
    observations = arrays["observations"].astype(np.float32) / 255.0
    gt = arrays.get("gt_masks")
    frames = [provider.provide(obs, None if gt is None else gt[t]) for t, obs in enumerate(observations)]
    masks = np.stack([f.mask for f in frames]) if frames else np.zeros((0,) + observations.shape[1:3], bool)
    return write_container(
        out_path,
        "masks",
        {"source": str(Path(episode_path).name), "provenance": PROVENANCE[provider.config.kind],
         "provider": vars(provider.config)},
        {"masks": masks},
    )


def load_masks(path) -> tuple[dict, np.ndarray]:
    header, arrays = read_container(path, kind="masks")
    return header, arrays["masks"]
