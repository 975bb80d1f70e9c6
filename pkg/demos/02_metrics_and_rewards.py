"""Quality metrics and the improvement-form step reward.

Shows Dice on pseudo-segmentations, PSNR/SSIM/local-NCC behavior, and why
improvement-form rewards telescope: the sum of per-step rewards equals the
total metric gain of an episode, so the return is exactly "how much better
did we make the image".

Run:  python3 demos/02_metrics_and_rewards.py
"""

import numpy as np

from planact import RewardConfig, dice, kmeans_segment, ncc_local, psnr, ssim, step_reward
from planact.envs import _textured_image

rng = np.random.default_rng(1)
img = _textured_image(rng, 64)

# --- pseudo-segmentation + Dice ----------------------------------------------
seg = kmeans_segment(img, k=3)
print("k-means labels sorted by intensity:",
      [round(float(img[seg.labels == i].mean()), 3) for i in range(3)])
print("dice with itself:", dice(seg, seg))

noisy = np.clip(img + rng.normal(0, 0.15, img.shape), 0, 1)
print("dice vs noisy copy:", round(dice(seg, kmeans_segment(noisy, k=3)), 3))

# --- intensity metrics ---------------------------------------------------------
print(f"psnr(img, noisy) = {psnr(img, noisy):.2f} dB   (identical -> capped at 100)")
print(f"ssim(img, noisy) = {ssim(img, noisy):.3f}      (identical -> 1.0)")
print(f"ncc(img, 0.5*img + 0.2) = {ncc_local(img, 0.5 * img + 0.2):.4f}  "
      "(local correlation ignores affine intensity changes)")

# --- telescoping improvement rewards -------------------------------------------
cfg = RewardConfig("dice", "improvement", scale=1.0)
trajectory = [0.55, 0.61, 0.70, 0.69, 0.78, 0.84]
rewards = [step_reward(a, b, cfg) for a, b in zip(trajectory, trajectory[1:])]
print("\nper-step rewards:", [round(r, 3) for r in rewards])
print("sum of rewards:  ", round(sum(rewards), 3))
print("final - initial: ", round(trajectory[-1] - trajectory[0], 3))
