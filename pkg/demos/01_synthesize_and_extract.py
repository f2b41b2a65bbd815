"""Make a synthetic smear data set and cut it into labelled 20x20 patches.

Run from any directory; outputs go to ./demo_output (or the path given as
the first argument). The later demos read what this one writes.
"""
import sys
from pathlib import Path

import numpy as np

from smearnet import dataset as ds

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out.mkdir(parents=True, exist_ok=True)

# 300 images of 100x100 px, each with 0-4 stained blobs on a noisy background
cfg = ds.SynthConfig(seed=42)
images = ds.generate_synthetic(cfg, 300)
print("images:", len(images), " annotated objects:", sum(len(im.boxes) for im in images))

first = images[0]
print("first image", first.source, first.pixels.shape, "boxes:", [b.to_dict() for b in first.boxes])

# write the images as PPM plus a JSON-lines annotation file
ann = ds.write_dataset(images, out / "images")
print("annotations ->", ann)

# read them back the way real annotated data would be read
images = ds.load_annotations(ann)

# one positive per box, 12 random box-free negatives per image,
# every positive also in one extra dihedral orientation, then drop
# negatives until positives make up 30 %
patches = ds.prepare_patches(images, patch_size=20, neg_per_image=12, augment=2,
                             target_pos_fraction=0.3, seed=42)
print("patches:", len(patches), " positive fraction: %.3f" % patches.labels.mean())

# hold out 30 % of the source images (never split an image across sides)
train, test = ds.split(patches, 0.3, seed=42)
print("train:", len(train), " test:", len(test))

ds.save_patchset(train, out / "train.pst")
ds.save_patchset(test, out / "test.pst")

# mean positive patch vs mean negative patch: the blob should stand out
pos = train.patches[train.labels == 1].mean(axis=(0, 1))
neg = train.patches[train.labels == 0].mean(axis=(0, 1))
print("mean centre intensity  positive %.3f  negative %.3f" % (pos[8:12, 8:12].mean(), neg[8:12, 8:12].mean()))
print("provenance of patch 0:", train.provenance[0])
