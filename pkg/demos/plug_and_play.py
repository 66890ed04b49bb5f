"""
Purifying a foreign feature extractor
=====================================

Any convolutional extractor whose output stride is a power of two can be
given an SA-Module. Inference keeps using the extractor and head only, so
the gaze network has exactly the parameters it had before.
"""

import numpy as np
import torch
from torch import nn

from puregaze.models import GazeHead, attach_sa, count_parameters
from puregaze.synthdata import DomainSpec, NuisanceSpec, generate_domain, load_dataset
from puregaze.training import Batch, TrainConfig, make_optimizers, train_step

torch.manual_seed(0)
extractor = nn.Sequential(
    nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.BatchNorm2d(16), nn.ReLU(),
    nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.BatchNorm2d(32), nn.ReLU(),
    nn.Conv2d(32, 64, 3, stride=2, padding=1),
)
head = GazeHead(64, 128)
plain = count_parameters(nn.Sequential(extractor, head))

bundle = attach_sa(extractor, 64, head)
print(f"SA-Module depth {bundle.sa.depth} (stride 8), inference parameters {bundle.inference_parameter_count()}"
      f" == {plain}")

# a handful of routed steps on a small synthetic domain
manifest = generate_domain(DomainSpec(NuisanceSpec(), sample_count=64, seed=5), "plug_and_play_data")
data = load_dataset(manifest)
config = TrainConfig(batch_size=16)
opts = make_optimizers(bundle, config)
rng = np.random.default_rng(0)
for step in range(20):
    report = train_step(bundle, opts, Batch.from_dataset(data, rng.choice(len(data), 16, replace=False)), config)
    if step % 5 == 0:
        print(f"step {step:2d}  gaze {report.gaze_loss:.3f}  rec {report.rec_loss:.4f}  "
              f"adv term {report.adv_term:.4f}")
