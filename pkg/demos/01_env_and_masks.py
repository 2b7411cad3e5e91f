"""
Distracting environments and simulated segmentation masks
==========================================================

Renders a few frames of the dot reacher over a moving-patch background, corrupts
the true foreground mask with the two noise profiles and prints how far each
corrupted mask drifts from the truth.
"""

import numpy as np

from segdreamer.envsim import EnvConfig, reset
from segdreamer.evalkit import frame_iou, precision_recall
from segdreamer.masks import MaskProvider, profile

# an environment is just a config plus two seeds: one for the task, one for the background
cfg = EnvConfig(task="dot_reacher", distractor_mode="moving_patches", image_size=32)
env, first = reset(cfg, seed=0, distractor_seed=3)
print("observation", first.observation.shape, first.observation.dtype)
print("foreground pixels in the first frame:", int(first.gt_mask.sum()))

# roll out a handful of random actions and keep the frames around
rng = np.random.default_rng(0)
frames = [first]
for _ in range(20):
    frames.append(env.step(rng.uniform(-1, 1, env.action_dim)))
print("reward over the rollout: %.2f" % sum(f.reward for f in frames[1:]))

# the same frames through a clean, a moderate and a severe simulated segmenter
for name in ("clean", "moderate", "severe"):
    provider = MaskProvider(profile(name, seed=1))
    ious, recalls = [], []
    for f in frames:
        m = provider.provide(f.observation, f.gt_mask).mask
        ious.append(frame_iou(m, f.gt_mask))
        recalls.append(precision_recall(m.astype(float), f.gt_mask)[1])
    print("%-8s mean IoU %.3f  mean recall %.3f" % (name, np.mean(ious), np.mean(recalls)))

# optional picture, if matplotlib can open a window or write a file
try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(7, 2.5))
    severe = MaskProvider(profile("severe", seed=1)).provide(first.observation, first.gt_mask).mask
    for ax, img, title in zip(axes, (first.observation, first.gt_mask, severe), ("frame", "true mask", "severe")):
        ax.imshow(img)
        ax.set_title(title)
        ax.axis("off")
    fig.savefig("env_and_masks.png", dpi=100)
    print("wrote env_and_masks.png")
except ImportError:
    pass
