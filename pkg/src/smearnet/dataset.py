"""Annotated images, patch extraction, and the synthetic microscopy generator."""
import json
import math
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .raster import RasterError, load_raster, save_raster


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel rectangle covering columns [x, x+w) and rows [y, y+h)."""
    x: float
    y: float
    w: float
    h: float
    label: str = None
    score: float = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w} h={self.h}")

    @property
    def center(self):
        return self.x + self.w / 2, self.y + self.h / 2

    def to_dict(self):
        d = {"x": self.x, "y": self.y, "w": self.w, "h": self.h}
        if self.label is not None:
            d["label"] = self.label
        if self.score is not None:
            d["score"] = self.score
        return d


def boxes_intersect(a, b):
    """True when the rectangles share a region of positive area."""
    return (a.x < b.x + b.w and b.x < a.x + a.w and
            a.y < b.y + b.h and b.y < a.y + a.h)


@dataclass
class AnnotatedImage:
    pixels: np.ndarray  # (C, H, W) float32 in [0, 1]
    boxes: list
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        _, h, w = self.pixels.shape
        for b in self.boxes:
            if b.x < 0 or b.y < 0 or b.x + b.w > w or b.y + b.h > h:
                raise ValueError(f"box {b.to_dict()} lies outside the {w}x{h} image {self.source!r}")


@dataclass
class PatchSet:
    patches: np.ndarray  # (N, C, s, s) float32
    labels: np.ndarray  # (N,) uint8, 0/1
    provenance: list

    def __post_init__(self):
        self.patches = np.asarray(self.patches, np.float32)
        self.labels = np.asarray(self.labels, np.uint8)
        if self.patches.ndim != 4 or self.patches.shape[2] != self.patches.shape[3]:
            raise ValueError(f"patches must be N,C,s,s; got {self.patches.shape}")
        if len(self.labels) != len(self.patches) or len(self.provenance) != len(self.patches):
            raise ValueError("patches, labels and provenance lengths differ")
        if np.any(self.labels > 1):
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)

    @property
    def patch_size(self):
        return self.patches.shape[2]

    def subset(self, idx):
        idx = np.asarray(idx, np.int64)
        return PatchSet(self.patches[idx], self.labels[idx], [self.provenance[i] for i in idx])

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        return cls(np.concatenate([s.patches for s in sets]),
                   np.concatenate([s.labels for s in sets]),
                   [p for s in sets for p in s.provenance])


# ---------------------------------------------------------------------------
# annotations

class AnnotationError(ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MalformedAnnotationError(AnnotationError):
    pass


class MissingImageError(AnnotationError):
    pass


class BoxOutOfBoundsError(AnnotationError):
    pass


def load_annotations(path):
    """Read a JSON-lines annotation file; image paths resolve relative to it.

    Each record is ``{"image": str, "boxes": [{"x","y","w","h","label"}, ...]}``.
    Boxes reaching outside their image are an error (never clipped).
    """
    root = os.path.dirname(os.path.abspath(path))
    images = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rel = rec["image"]
                raw_boxes = rec.get("boxes", [])
                boxes = [BoundingBox(b["x"], b["y"], b["w"], b["h"], b.get("label"))
                         for b in raw_boxes]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedAnnotationError(f"bad record ({exc})", lineno) from None
            img_path = os.path.join(root, rel)
            try:
                pixels = load_raster(img_path)
            except FileNotFoundError:
                raise MissingImageError(f"image {rel!r} not found", lineno) from None
            except RasterError as exc:
                raise MalformedAnnotationError(f"image {rel!r}: {exc}", lineno) from None
            _, h, w = pixels.shape
            for b in boxes:
                if b.x < 0 or b.y < 0 or b.x + b.w > w or b.y + b.h > h:
                    raise BoxOutOfBoundsError(
                        f"box {b.to_dict()} exceeds the {w}x{h} image {rel!r}", lineno)
            images.append(AnnotatedImage(pixels, boxes, rel))
    return images


def write_dataset(images, directory, annotation_name="annotations.jsonl"):
    """Save every image as PPM/PGM plus a JSON-lines annotation file; returns its path."""
    os.makedirs(directory, exist_ok=True)
    ann_path = os.path.join(directory, annotation_name)
    with open(ann_path, "w", encoding="utf-8") as f:
        for i, img in enumerate(images):
            name = img.source or f"image_{i:05d}.{'pgm' if img.pixels.shape[0] == 1 else 'ppm'}"
            save_raster(img.pixels, os.path.join(directory, name))
            rec = {"image": name, "boxes": [b.to_dict() for b in img.boxes]}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return ann_path


# ---------------------------------------------------------------------------
# patch extraction

def resample_bilinear(img, size):
    """Resize a (C, S, S) array to (C, size, size) with half-pixel-centred bilinear sampling."""
    c, sh, sw = img.shape
    if sh == size and sw == size:
        return img.astype(np.float32, copy=True)

    def coords(src, dst):
        pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        pos = np.clip(pos, 0, src - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(sh, size)
    x0, x1, fx = coords(sw, size)
    a = img.astype(np.float64)
    top = a[:, y0][:, :, x0] * (1 - fx) + a[:, y0][:, :, x1] * fx
    bot = a[:, y1][:, :, x0] * (1 - fx) + a[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return out.astype(np.float32)


def positive_window(box, patch_size, width, height):
    """Square crop (x, y, side) centred on the box, shifted inside the image.

    Returns None when the crop cannot fit.
    """
    side = max(patch_size, int(math.ceil(max(box.w, box.h))))
    if side > width or side > height:
        return None
    cx, cy = box.center
    x = int(math.floor(cx - side / 2))
    y = int(math.floor(cy - side / 2))
    x = min(max(x, 0), width - side)
    y = min(max(y, 0), height - side)
    return x, y, side


def extract_patches(images, patch_size, neg_per_image, max_neg_tries, seed):
    """One positive per annotation and up to ``neg_per_image`` random box-free negatives per image.

    Negative candidates are drawn uniformly over valid window origins and
    rejected when they overlap any annotation with positive area. Each image
    uses its own generator seeded from ``(seed, image_index)``.
    """
    patches, labels, prov = [], [], []
    for idx, img in enumerate(images):
        c, h, w = img.pixels.shape
        if h < patch_size or w < patch_size:
            warnings.warn(f"image {img.source!r} ({w}x{h}) smaller than patch {patch_size}; skipped")
            continue
        for b in img.boxes:
            win = positive_window(b, patch_size, w, h)
            if win is None:
                warnings.warn(f"annotation {b.to_dict()} in {img.source!r} too large to crop; skipped")
                continue
            x, y, side = win
            crop = img.pixels[:, y:y + side, x:x + side]
            patches.append(resample_bilinear(crop, patch_size))
            labels.append(1)
            prov.append({"source": img.source, "image_index": idx, "x": x, "y": y,
                         "size": side, "transform": "identity"})
        rng = np.random.default_rng([seed, idx])
        got = tries = 0
        while got < neg_per_image and tries < max_neg_tries:
            tries += 1
            x = int(rng.integers(0, w - patch_size + 1))
            y = int(rng.integers(0, h - patch_size + 1))
            cand = BoundingBox(x, y, patch_size, patch_size)
            if any(boxes_intersect(cand, b) for b in img.boxes):
                continue
            patches.append(img.pixels[:, y:y + patch_size, x:x + patch_size].copy())
            labels.append(0)
            prov.append({"source": img.source, "image_index": idx, "x": x, "y": y,
                         "size": patch_size, "transform": "identity"})
            got += 1
        if got < neg_per_image:
            warnings.warn(f"{img.source!r}: only {got}/{neg_per_image} negatives after {tries} tries")
    channels = images[0].pixels.shape[0] if images else 3
    arr = np.stack(patches) if patches else np.zeros((0, channels, patch_size, patch_size), np.float32)
    return PatchSet(arr, np.array(labels, np.uint8), prov)


DIHEDRAL_NAMES = ("identity", "rot90", "rot180", "rot270",
                  "flip", "rot90+flip", "rot180+flip", "rot270+flip")


def dihedral(img, t):
    """Apply dihedral element ``t`` (0..7) to the last two axes: rotate by 90*(t%4), then mirror if t >= 4."""
    out = np.rot90(img, t % 4, axes=(-2, -1))
    if t >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment_positives(patches, multiplier, seed):
    """Append ``multiplier - 1`` dihedral variants of every positive patch.

    Variants of one patch are distinct non-identity transforms while
    ``multiplier <= 8``; beyond that the transforms cycle.
    """
    if multiplier < 1:
        raise ValueError("multiplier must be >= 1")
    if multiplier == 1:
        return patches.subset(np.arange(len(patches)))
    rng = np.random.default_rng(seed)
    extra_p, extra_prov = [], []
    for i in np.flatnonzero(patches.labels == 1):
        order = []
        while len(order) < multiplier - 1:
            order.extend(int(t) + 1 for t in rng.permutation(7))
        for t in order[:multiplier - 1]:
            extra_p.append(dihedral(patches.patches[i], t))
            rec = dict(patches.provenance[i])
            rec["transform"] = DIHEDRAL_NAMES[t]
            extra_prov.append(rec)
    if not extra_p:
        return patches.subset(np.arange(len(patches)))
    extra = PatchSet(np.stack(extra_p), np.ones(len(extra_p), np.uint8), extra_prov)
    return PatchSet.concat([patches, extra])


def rebalance(patches, target_pos_fraction, seed):
    """Discard randomly chosen negatives until positives make up ``target_pos_fraction``."""
    if not 0 < target_pos_fraction < 1:
        raise ValueError("target_pos_fraction must lie in (0, 1)")
    pos = np.flatnonzero(patches.labels == 1)
    neg = np.flatnonzero(patches.labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("rebalancing needs at least one positive and one negative")
    keep_neg = int(round(len(pos) * (1 - target_pos_fraction) / target_pos_fraction))
    if keep_neg > len(neg):
        raise ValueError(
            f"target {target_pos_fraction} needs {keep_neg} negatives but only {len(neg)} exist; "
            "reaching it would mean discarding positives")
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(neg, size=keep_neg, replace=False))
    return patches.subset(np.sort(np.concatenate([pos, kept])))


def split(patches, test_fraction, seed):
    """Split by source image so no image contributes to both sides."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    sources = list(dict.fromkeys(p["source"] for p in patches.provenance))
    if len(sources) < 2:
        raise ValueError("splitting needs patches from at least two source images")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sources))
    n_test = min(max(1, int(round(test_fraction * len(sources)))), len(sources) - 1)
    test_sources = {sources[i] for i in order[:n_test]}
    is_test = np.array([p["source"] in test_sources for p in patches.provenance])
    return patches.subset(np.flatnonzero(~is_test)), patches.subset(np.flatnonzero(is_test))


def prepare_patches(images, patch_size=20, neg_per_image=20, max_neg_tries=200,
                    augment=4, target_pos_fraction=0.3, seed=42):
    """extract -> augment positives -> rebalance, all seeded from ``seed``."""
    ps = extract_patches(images, patch_size, neg_per_image, max_neg_tries, seed)
    ps = augment_positives(ps, augment, seed + 1)
    return rebalance(ps, target_pos_fraction, seed + 2)


# ---------------------------------------------------------------------------
# PST1 patch archive

class PatchFormatError(ValueError):
    pass


_PST_HEAD = struct.Struct("<4sHBI")


def save_patchset(ps, path):
    n, c, s, _ = ps.patches.shape
    with open(path, "wb") as f:
        f.write(_PST_HEAD.pack(b"PST1", s, c, n))
        f.write(ps.labels.astype(np.uint8).tobytes())
        f.write(ps.patches.astype("<f4").tobytes())
        f.write(json.dumps(ps.provenance, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def load_patchset(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _PST_HEAD.size:
        raise PatchFormatError("truncated patch archive header")
    magic, s, c, n = _PST_HEAD.unpack_from(buf)
    if magic != b"PST1":
        raise PatchFormatError(f"bad magic {magic!r}; not a PST1 patch archive")
    off = _PST_HEAD.size
    nbytes = n * c * s * s * 4
    if len(buf) < off + n + nbytes:
        raise PatchFormatError("truncated patch archive payload")
    labels = np.frombuffer(buf, np.uint8, n, off).copy()
    off += n
    data = np.frombuffer(buf, "<f4", n * c * s * s, off).astype(np.float32).reshape(n, c, s, s)
    try:
        prov = json.loads(buf[off + nbytes:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PatchFormatError(f"bad provenance trailer: {exc}") from None
    return PatchSet(data, labels, prov)


# ---------------------------------------------------------------------------
# synthetic microscopy

@dataclass
class SynthConfig:
    """Dark noisy fields with bright elliptical Gaussian blobs standing in for pathogens.

    Ranges are (low, high) pairs; blob counts are inclusive integers.
    """
    image_size: tuple = (100, 100)  # (height, width)
    channels: int = 3
    blob_count: tuple = (0, 4)
    blob_radius: tuple = (7.5, 9.5)  # semi-major axis, px
    blob_intensity: tuple = (0.5, 0.8)
    axis_ratio: tuple = (0.8, 1.0)  # minor / major
    blob_tint: tuple = (0.85, 0.55, 1.0)
    background: float = 0.15
    noise: float = 0.04
    min_gap: int = 6  # px between blob boxes
    seed: int = 42

    def __post_init__(self):
        for name in ("blob_count", "blob_radius", "blob_intensity", "axis_ratio"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo, hi} is invalid")
        if self.blob_radius[0] <= 0 or self.axis_ratio[0] <= 0:
            raise ValueError("blob radius and axis ratio must be positive")
        if len(self.blob_tint) != self.channels:
            raise ValueError("blob_tint needs one entry per channel")


def blob_profile(shape, blob):
    """Intensity of a single blob on an (H, W) grid; zero outside its ellipse."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - blob["cx"], yy - blob["cy"]
    ct, st = math.cos(blob["angle"]), math.sin(blob["angle"])
    u = (dx * ct + dy * st) / blob["a"]
    v = (-dx * st + dy * ct) / blob["b"]
    q2 = u * u + v * v
    return np.where(q2 <= 1.0, blob["intensity"] * np.exp(-2.0 * q2), 0.0)


def _synth_image(cfg, index):
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.image_size
    img = cfg.background + cfg.noise * rng.standard_normal((cfg.channels, h, w))
    n_blobs = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
    blobs, boxes = [], []
    tint = np.asarray(cfg.blob_tint, np.float64)[:, None, None]
    for _ in range(n_blobs):
        for _attempt in range(100):
            a = rng.uniform(*cfg.blob_radius)
            b = a * rng.uniform(*cfg.axis_ratio)
            blob = {"a": a, "b": b, "angle": rng.uniform(0, math.pi),
                    "intensity": rng.uniform(*cfg.blob_intensity)}
            margin = a + 1
            if w <= 2 * margin or h <= 2 * margin:
                break
            blob["cx"] = rng.uniform(margin, w - margin)
            blob["cy"] = rng.uniform(margin, h - margin)
            prof = blob_profile((h, w), blob)
            ys, xs = np.nonzero(prof > 0)
            if len(xs) == 0:
                continue
            box = BoundingBox(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1),
                              int(ys.max() - ys.min() + 1), "pathogen")
            g = cfg.min_gap
            grown = BoundingBox(box.x - g, box.y - g, box.w + 2 * g, box.h + 2 * g)
            if any(boxes_intersect(grown, o) for o in boxes):
                continue
            img += tint * prof
            blobs.append(blob)
            boxes.append(box)
            break
    pixels = (np.rint(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)
    ext = "ppm" if cfg.channels == 3 else "pgm"
    return AnnotatedImage(pixels, boxes, f"synth_{index:05d}.{ext}", {"blobs": blobs})


def generate_synthetic(cfg, image_count, start=0):
    """Deterministic list of synthetic AnnotatedImages; image ``i`` depends only on (seed, i)."""
    return [_synth_image(cfg, i) for i in range(start, start + image_count)]
