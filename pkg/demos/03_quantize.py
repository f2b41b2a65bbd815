"""Share weights through 16-entry codebooks, retrain the codebooks, and compare sizes."""
import sys
from pathlib import Path

import numpy as np

from smearnet import dataset as ds
from smearnet import metrics as mt
from smearnet import modelio
from smearnet import network as net
from smearnet import quantize as qz

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
if not (out / "model.mdf").exists():
    sys.exit("run 02_train_and_evaluate.py first")

model = modelio.load_model(out / "model.mdf")
train = ds.load_patchset(out / "train.pst")
test = ds.load_patchset(out / "test.pst")


def auc(m):
    return mt.roc(mt.ScoredLabelSet(net.predict_scores(m, test.patches), test.labels)).auc


qcfg = qz.QuantizeConfig(k=16, finetune_epochs=3, seed=42)
qm = qz.quantize_model(model, qcfg)

# the fc1 codebook: 16 values stand in for every one of its weights
cb = qm.codebooks["fc1.weight"]
print("fc1 centroids:", np.round(cb.centroids, 4))
print("fc1 weights per centroid:", np.bincount(cb.indices, minlength=cb.k))
err = np.abs(model.params["fc1.weight"].ravel() - cb.weights().ravel())
print("fc1 max |w - centroid| %.5f" % err.max())

print("AUC float      %.4f" % auc(model))
print("AUC quantized  %.4f" % auc(qz.dequantize(qm)))

# assignments stay frozen; each centroid moves by the summed gradient of its members
tuned, log = qz.finetune(qm, train, qcfg, on_epoch=lambda r: print("finetune epoch %d  loss %.4f" % (r["epoch"], r["loss"])))
print("AUC finetuned  %.4f" % auc(qz.dequantize(tuned)))
assert np.array_equal(tuned.codebooks["fc1.weight"].indices, cb.indices)

qz.save_quantized(tuned, out / "model.mdq")
report = qz.compression_report(model, tuned)
print(report.to_text())
print("file sizes: %d -> %d bytes" % ((out / "model.mdf").stat().st_size, (out / "model.mdq").stat().st_size))
