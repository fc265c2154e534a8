# coding: utf-8

# # Where does the plugin look?
#
# Slice-pooling weights tell us which slices matter and class-token attention
# tells us where inside each slice. Multiplying the two gives a 3D map.
# Box-mass ratio is the mean heat inside the lesion box over the mean heat outside it.
#
# This one uses the full default setting (400 volumes of 64x64x16), so it takes
# about five minutes on one core.

import tempfile

import numpy as np

from amc3d.backbone import BackboneConfig, init_random_backbone
from amc3d.interpret import box_mass_ratio, dump_ascii, volume_saliency
from amc3d.manifest import load_samples
from amc3d.plugin import new_plugin
from amc3d.synthetic import SyntheticSpec, generate_synthetic_dataset
from amc3d.train import TrainConfig, train_plugin

out = tempfile.mkdtemp(prefix="amc-heat-")
m = generate_synthetic_dataset(out, SyntheticSpec(), seed=0)
train, val, test = (load_samples(m, s) for s in ("train", "val", "test"))

weights = init_random_backbone(BackboneConfig(), seed=0)
plugin = new_plugin(weights, seed=0)
train_plugin(plugin, weights, train, val, TrainConfig(seed=0, patience=3))

positives = [s for s in test if s.label[0] == 1]
for mode in ("last", "rollout", "grad-rollout"):
    ratios = [box_mass_ratio(volume_saliency(s.views, plugin, weights, mode=mode, normalize=False),
                             s.boxes) for s in positives]
    print(f"{mode:13s} median ratio {np.median(ratios):6.2f}  share >= 2: {np.mean(np.array(ratios) >= 2):.2f}")

# one map as text, slice by slice
hm = volume_saliency(positives[0].views, plugin, weights)
print("lesion boxes", positives[0].boxes)
print("hottest slice", int(np.argmax(hm.values.sum(axis=(0, 1)))))
dump_ascii(hm, f"{out}/heatmap.txt", precision=2)
print("ascii dump in", out)
