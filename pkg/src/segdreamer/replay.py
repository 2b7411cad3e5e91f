"""Episode replay with uniform fixed-length segment sampling.

Consistency contract for the two-thread mode: ``add`` and ``sample`` hold one
lock, so a sampled batch always reflects some prefix of the added episodes.
Masks are stored with their frames; the buffer never calls a mask provider.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
import torch

from segdreamer.envsim import Episode
from segdreamer.errors import UsageError


@dataclass
class SequenceBatch:
    observations: np.ndarray  # (B, T, H, W, 3) uint8
    actions: np.ndarray  # (B, T, A)
    rewards: np.ndarray  # (B, T)
    conts: np.ndarray  # (B, T)
    is_first: np.ndarray  # (B, T)
    masks: np.ndarray  # (B, T, H, W) provider masks
    gt_masks: np.ndarray  # (B, T, H, W)

    def to_torch(self, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
        out = {}
        for f in fields(self):
            arr = getattr(self, f.name)
            if f.name == "observations":
                out[f.name] = torch.as_tensor(arr).to(dtype) / 255.0
            elif arr.dtype == bool:
                out[f.name] = torch.as_tensor(arr)
            else:
                out[f.name] = torch.as_tensor(arr).to(dtype)
        return out


class ReplayBuffer:
    def __init__(self, capacity: int = 1_000_000, seed: int = 0):
        self.capacity = capacity
        self._episodes: deque[Episode] = deque()
        self._steps = 0
        self._lock = threading.Lock()
        self.rng = np.random.default_rng([seed, 23])

    def __len__(self) -> int:
        return self._steps

    @property
    def num_episodes(self) -> int:
        return len(self._episodes)

    @property
    def episodes(self) -> list[Episode]:
        with self._lock:
            return list(self._episodes)

    def add(self, episode: Episode) -> None:
        """Append a finished episode; the oldest episodes go first when over capacity."""
        with self._lock:
            self._episodes.append(episode)
            self._steps += len(episode)
            while self._steps > self.capacity and len(self._episodes) > 1:
                self._steps -= len(self._episodes.popleft())

    def segment_index(self, seq_len: int) -> list[tuple[int, int]]:
        """All (episode, start) pairs a segment of ``seq_len`` can be drawn from."""
        with self._lock:
            return [(i, s) for i, ep in enumerate(self._episodes) for s in range(len(ep) - seq_len + 1)]

    def sample(self, batch_size: int, seq_len: int, rng: Optional[np.random.Generator] = None) -> SequenceBatch:
        rng = self.rng if rng is None else rng
        with self._lock:
            episodes = list(self._episodes)
        if not episodes:
            raise UsageError("cannot sample from an empty replay buffer")
        counts = np.array([max(0, len(ep) - seq_len + 1) for ep in episodes])
        total = int(counts.sum())
        if total == 0:
            raise UsageError(f"no stored episode is at least {seq_len} steps long")
        bounds = np.cumsum(counts)
        picks = rng.integers(0, total, size=batch_size)
        ep_idx = np.searchsorted(bounds, picks, side="right")
        starts = picks - (bounds[ep_idx] - counts[ep_idx])
        parts = {f.name: [] for f in fields(SequenceBatch)}
        for e, s in zip(ep_idx, starts):
            ep = episodes[e]
            for name in parts:
                parts[name].append(getattr(ep, name)[s:s + seq_len])
        batch = {name: np.stack(v) for name, v in parts.items()}
        batch["is_first"] = batch["is_first"].copy()
        # a segment starting mid-episode still begins a fresh filter state
        batch["is_first"][:, 0] = True
        return SequenceBatch(**batch)
