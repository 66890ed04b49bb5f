"""
Eye attention and the purification losses
=========================================

Builds the mixed-Gaussian attention map for one synthetic face and shows how
the truncated, attention-weighted adversarial term reacts to a good and a
bad reconstruction.
"""

import numpy as np
import torch

from puregaze.attention import build_attention_map, scaled_sigma_sq, save_attention_png
from puregaze.losses import LossWeights, adversarial_term, backbone_loss, reconstruction_loss
from puregaze.synthdata import render_sample

# a 64 px face looking slightly up and to the left
image = render_sample(1000, (0.15, -0.2), illumination=0.8, resolution=64)
print("image", image.image.shape, "eyes at", image.eye_centers)

# sigma^2 is set for 224 px crops; scale it down with the image
sigma_sq = scaled_sigma_sq(20.0, 64)
att = build_attention_map(64, 64, image.eye_centers, sigma_sq)
print(f"sigma^2 at 64 px: {sigma_sq:.2f}, map covers {np.mean(att.weights > 0.5):.1%} of pixels above 0.5")
save_attention_png(att, "attention.png")

orig = torch.from_numpy(image.image).permute(2, 0, 1)[None].float()
weights = torch.from_numpy(np.array(att.weights))[None].float()

# a near-perfect reconstruction: the adversarial term is near its maximum, which is
# the attention mass (the map is small at 64 px, hence the small numbers)
good = (orig + 0.02 * torch.randn_like(orig)).clamp(0, 1)
# the inverted image: only pixels far from mid-gray move past the truncation
# threshold and stop contributing
bad = 1.0 - orig
for name, recon in (("good", good), ("inverted", bad)):
    term, active = adversarial_term(orig, recon, weights, k=0.75)
    print(f"{name:>8}: L_rec {reconstruction_loss(orig, recon).item():.4f}  "
          f"adv term {term.item():.4f}  active pixels {active.item():.2f}")

# the backbone's total loss mixes the adversarial term with the gaze loss
pred, truth = torch.tensor([[0.1, -0.2]]), torch.tensor([[0.15, -0.2]])
print("backbone loss", backbone_loss(orig, good, pred, truth, weights, LossWeights(1.0, 1.0, 0.75)).item())
