"""
Bright-to-dark transfer at toy scale
====================================

Renders a bright source domain and a dark target domain, trains a baseline
and PureGaze with the same budget, and compares their target-domain error
overall and per illumination bucket. The default budget runs in a few
minutes; the acceptance suite uses a larger one.
"""

import sys

from puregaze.evaluation import evaluate, illumination_buckets
from puregaze.synthdata import generate_domain, source_domain_spec, target_domain_spec
from puregaze.training import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200

source = generate_domain(source_domain_spec(1000), "toy/source")
target = generate_domain(target_domain_spec(300), "toy/target")

base = TrainConfig(backbone_width=16, steps=steps, log_every=50)
reports = {}
for name, config in (("baseline", base.replace(baseline=True)), ("puregaze", base)):
    result = train(config, source, f"toy/{name}")
    reports[name] = evaluate((result.bundle, config), target)
    print(f"{name:>9}: target error {reports[name].mean_error:.2f} deg")

table = illumination_buckets(reports["baseline"], reports["puregaze"], target)
print(table.summary())
print(f"{table.dropped} of {table.total} images fell in buckets with fewer than 7 images")
