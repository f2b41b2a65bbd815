"""Train the fire-module classifier on the demo patches and draw ROC / PR curves as CSV."""
import sys
import time
from pathlib import Path

from smearnet import dataset as ds
from smearnet import metrics as mt
from smearnet import modelio
from smearnet import network as net

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
if not (out / "train.pst").exists():
    sys.exit("run 01_synthesize_and_extract.py first")

train = ds.load_patchset(out / "train.pst")
test = ds.load_patchset(out / "test.pst")

cfg = net.default_config(train.patch_size, train.patches.shape[1])
for name, shape in zip(cfg.layer_names(), cfg.shapes()):
    print("%-10s -> %s" % (name, shape))

model = net.init_model(cfg, seed=42)
print("parameters: %.1f kB as float32" % (model.parameter_bytes() / 1000))

t0 = time.perf_counter()
model, log = net.train(model, train, net.TrainingConfig(lr=1e-4, batch_size=256, epochs=10, seed=42),
                       on_epoch=lambda r: print("epoch %2d  loss %.4f  acc %.4f" % (r["epoch"], r["loss"], r["accuracy"])))
print("trained in %.0f s" % (time.perf_counter() - t0))

size = modelio.save_model(model, out / "model.mdf")
print("model.mdf: %d bytes" % size)

scores = net.predict_scores(model, test.patches)
data = mt.ScoredLabelSet(scores, test.labels)
curve = mt.roc(data)
print("test AUC %.4f  AP %.4f" % (curve.auc, curve.ap))

c = mt.confusion_at(data, 0.99)
print("at 0.99: TP %d FP %d TN %d FN %d  precision %.3f recall %.3f" % (c.tp, c.fp, c.tn, c.fn, c.precision, c.recall))

# CSV for any plotting tool, plus a JSON summary
print("curves ->", mt.export_curves(curve, str(out / "test_curve")))

# what the first conv layer sees in a positive patch (one tile per channel)
idx = int(test.labels.argmax())
grid = net.dump_activations(model, test.patches[idx], "conv1", out / "conv1_activations.pgm")
print("conv1 activation grid", grid.shape, "->", out / "conv1_activations.pgm")
