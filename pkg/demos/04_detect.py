"""Slide the classifier over whole images, suppress overlaps, and draw the result."""
import sys
from pathlib import Path

from smearnet import dataset as ds
from smearnet import detect as dt
from smearnet import modelio
from smearnet import quantize as qz

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
if not (out / "model.mdq").exists():
    sys.exit("run 03_quantize.py first")

float_model = modelio.load_model(out / "model.mdf")
quant_model = qz.dequantize(qz.load_quantized(out / "model.mdq"))

# fresh images the model never saw
images = ds.generate_synthetic(ds.SynthConfig(seed=42), 50, start=100_000)
cfg = dt.DetectionConfig(window=20, detection_threshold=0.99, overlap_threshold=0.3)
print("stride", cfg.stride, " windows per image:",
      len(dt.window_origins(100, 20, cfg.stride)) ** 2)

img = images[0]
smap = dt.score_windows(img.pixels, float_model, cfg)
cands = dt.candidates_from(smap, cfg.detection_threshold)
kept = dt.nms(cands, cfg.overlap_threshold)
print("image 0: %d boxes annotated, %d windows above 0.99, %d after NMS" % (len(img.boxes), len(cands), len(kept)))
for d in kept:
    print("   ", d.to_dict())

overlays = out / "overlays"
overlays.mkdir(exist_ok=True)
for name, model in (("float", float_model), ("quantized", quant_model)):
    tp = fp = fn = 0
    records = []
    for i, img in enumerate(images):
        dets = dt.detect(img.pixels, model, cfg)
        a, b, c = dt.match_detections(dets, img.boxes, match_iou=0.3)
        tp, fp, fn = tp + a, fp + b, fn + c
        records.append((img.source, dets))
        if name == "float" and i < 5:
            # white: annotation, red: detection
            dt.render_detections(img.pixels, dets, img.boxes, overlays / img.source)
    dt.write_detections(records, out / ("detections_%s.jsonl" % name))
    print("%-9s TP %3d FP %3d FN %3d  precision %.3f recall %.3f" % (name, tp, fp, fn, tp / max(tp + fp, 1), tp / max(tp + fn, 1)))

blank = ds.generate_synthetic(ds.SynthConfig(seed=42, blob_count=(0, 0)), 5, start=200_000)
print("detections on 5 blank images:", sum(len(dt.detect(b.pixels, float_model, cfg)) for b in blank))
print("overlays ->", overlays)
