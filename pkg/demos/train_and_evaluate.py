# coding: utf-8

# # Training a task plugin on synthetic lesion volumes
#
# A frozen random 2D transformer reads each volume slice by slice. The only
# trainable parts are the LoRA adapters, the slice-pooling query and a linear
# head, and together they make up one small plugin file.
#
# A reduced geometry (32x32x8) keeps the whole script near a minute on one core.

import sys
import tempfile
from pathlib import Path

import numpy as np

from amc3d.backbone import BackboneConfig, init_random_backbone
from amc3d.manifest import load_samples
from amc3d.metrics import compute_auroc, metrics_report
from amc3d.plugin import load_plugin, new_plugin, save_plugin
from amc3d.synthetic import SyntheticSpec, generate_synthetic_dataset
from amc3d.train import TrainConfig, predict_logits, train_plugin

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="amc-demo-"))

# ## Data
#
# Roughly a third of the volumes carry one bright ellipsoid. Masks come along for free.

spec = SyntheticSpec(n=120, size=(32, 32, 8), radius=(4.0, 7.0), radius_s=(1.0, 2.0), masks=True)
manifest = generate_synthetic_dataset(work / "data", spec, seed=0)
train, val, test = (load_samples(manifest, s) for s in ("train", "val", "test"))
print(len(train), "train /", len(val), "val /", len(test), "test")

# ## Backbone and an empty plugin
#
# At initialisation the adapters are zero, so the plugin sees exactly the frozen features.

weights = init_random_backbone(BackboneConfig(image_size=(32, 32)), seed=0)
plugin = new_plugin(weights, seed=0, decoder=True)
print("backbone", weights.fingerprint()[:16], "trainable", plugin.num_trainable())

# ## Train
#
# Focal loss on the label plus Dice+CE on the auxiliary masks.

result = train_plugin(plugin, weights, train, val, TrainConfig(epochs=8, seed=0),
                      on_epoch=lambda e: print(e.line()))
print("best epoch", result.best_epoch)

# ## Evaluate on held-out volumes

z = predict_logits(test, plugin, weights)
y = np.array([s.label[0] for s in test])
print("test AUROC %.4f" % compute_auroc(z[:, 0], y))
print(metrics_report(z, y[:, None]).to_json())

# ## Save, reload, compare
#
# The file holds only trainable tensors, and it is bound to the backbone by fingerprint.

save_plugin(work / "lesion.amcp", plugin)
back = load_plugin(work / "lesion.amcp", weights)
print("file bytes", (work / "lesion.amcp").stat().st_size)
print("reload identical:", np.array_equal(predict_logits(test, back, weights), z))
