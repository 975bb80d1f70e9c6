"""Style-transfer losses and the compound temporal regularizer.

Demonstrates the Gram-matrix style loss (position-blind), the normalized
content loss (position-sensitive), their weighted combination with total
variation, and the synthetic-motion temporal consistency penalty used for
video stylization: perturb-then-stylize should match stylize-then-perturb.

Run:  python3 demos/03_style_and_temporal_losses.py
"""

import numpy as np
import torch

from planact import (FeatureExtractor, compound_temporal, content_loss, gram_matrix,
                     make_random_motion, nst_objective, style_loss, total_variation)
from planact.envs import _textured_image

rng = np.random.default_rng(2)
content = torch.as_tensor(_textured_image(rng, 64)[None], dtype=torch.float64)
style = torch.as_tensor(_textured_image(rng, 64)[None], dtype=torch.float64)

extractor = FeatureExtractor(in_channels=1, seed=0).double()
feats_c = extractor(content)
feats_e = extractor(style)
print("extractor taps:", [tuple(f.shape) for f in feats_c])
print("gram of tap 0:", tuple(gram_matrix(feats_c[0]).shape))

# permuting pixels leaves style untouched but destroys content
perm = torch.randperm(feats_c[0].shape[-1] * feats_c[0].shape[-2])
shuffled = feats_c[0].flatten(1)[:, perm].reshape(feats_c[0].shape)
print(f"style loss (original vs shuffled layer):   "
      f"{float(style_loss([feats_c[0]], [shuffled])):.2e}")
print(f"content loss (original vs shuffled layer): "
      f"{float(content_loss(feats_c[0], shuffled)):.3f}")

val = nst_objective(content, content, style, extractor)
print(f"\nfull objective (moving == content): {float(val):.4f}  "
      f"[tv term alone = {float(1e-7 * total_variation(content)):.2e}]")

# --- compound temporal regularization --------------------------------------
motion = make_random_motion((64, 64), seed=3)
print(f"\nsynthetic motion: max displacement {float(motion.abs().max()):.2f} px")

identity = lambda x: x
invert = lambda x: 1.0 - x
blur = torch.nn.Conv2d(1, 1, 5, padding=2, bias=False).double()
torch.nn.init.constant_(blur.weight, 1.0 / 25.0)

for name, policy in [("identity", identity), ("invert", invert),
                     ("box blur", lambda x: blur(x.unsqueeze(0)).squeeze(0))]:
    val = compound_temporal(content, policy, motion_seed=3, noise_sigma=0.001)
    print(f"temporal inconsistency of {name:>9}: {float(val):.5f}")
print("(commuting policies like identity score ~0; blur breaks commutation "
      "only through the border)")
