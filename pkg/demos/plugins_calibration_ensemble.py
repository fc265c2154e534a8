# coding: utf-8

# # Swapping plugins, calibrating them, averaging them
#
# One backbone stays in memory. Plugins trained with different seeds get swapped
# through an Engine, calibrated one by one, and then averaged in logit space.

import numpy as np

from amc3d.backbone import BackboneConfig, init_random_backbone
from amc3d.calibration import calibrated_logits, ensemble_logits, fit_platt
from amc3d.manifest import load_samples
from amc3d.metrics import compute_auroc
from amc3d.plugin import Engine, new_plugin
from amc3d.synthetic import SyntheticSpec, generate_synthetic_dataset
from amc3d.train import TrainConfig, predict_logits, train_plugin
import tempfile

spec = SyntheticSpec(n=120, size=(32, 32, 8), radius=(4.0, 7.0), radius_s=(1.0, 2.0))
m = generate_synthetic_dataset(tempfile.mkdtemp(prefix="amc-ens-"), spec, seed=0)
train, val, test = (load_samples(m, s) for s in ("train", "val", "test"))
y_val = np.array([s.label[0] for s in val])
y_test = np.array([s.label[0] for s in test])

weights = init_random_backbone(BackboneConfig(image_size=(32, 32)), seed=0)
checksum = weights.checksum()

# ## Three members

members = []
for seed in range(3):
    p = new_plugin(weights, seed=seed, task_id=f"lesion-s{seed}")
    train_plugin(p, weights, train, val, TrainConfig(epochs=6, seed=seed))
    # Platt parameters are fit on validation logits, never on test
    p.platt = fit_platt(predict_logits(val, p, weights), y_val[:, None])
    members.append(p)

# ## One engine, many plugins

engine = Engine(weights)
cal = []
for p in members:
    engine.swap_plugin(p)
    z = np.stack([engine.logits(s.views) for s in test])
    cal.append(calibrated_logits(z, p.platt))
    print(p.task_id, "a=%.3f b=%.3f" % (p.platt.a[0], p.platt.b[0]),
          "AUROC %.4f" % compute_auroc(cal[-1][:, 0], y_test))

print("backbone untouched:", weights.checksum() == checksum)

ens = ensemble_logits(cal)
print("ensemble AUROC %.4f" % compute_auroc(ens[:, 0], y_test))
print("median member  %.4f" % np.median([compute_auroc(c[:, 0], y_test) for c in cal]))
