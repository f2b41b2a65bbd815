"""Sliding-window detection, non-maximum suppression, matching and overlay rendering."""
import json
from dataclasses import dataclass

import numpy as np

from . import network as net
from .dataset import BoundingBox
from .raster import save_raster, to_uint8


@dataclass
class DetectionConfig:
    window: int = 20
    stride: int = None  # defaults to window // 4
    detection_threshold: float = 0.99
    overlap_threshold: float = 0.3
    batch_size: int = 256

    def __post_init__(self):
        if self.stride is None:
            self.stride = max(1, self.window // 4)
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        for name in ("detection_threshold", "overlap_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")


@dataclass
class Detection:
    box: BoundingBox
    score: float

    def to_dict(self, image=None):
        d = {"x": self.box.x, "y": self.box.y, "w": self.box.w, "h": self.box.h,
             "score": float(self.score)}
        if image is not None:
            d = {"image": image, **d}
        return d


@dataclass
class ScoreMap:
    xs: np.ndarray  # window origins along x
    ys: np.ndarray  # window origins along y
    scores: np.ndarray  # (len(ys), len(xs)) positive-class probability
    window: int


def window_origins(extent, window, stride):
    """Stride grid of origins, plus one flush with the far edge when the grid misses it."""
    if extent < window:
        raise ValueError(f"image extent {extent} is smaller than the {window}px window")
    last = extent - window
    pos = list(range(0, last + 1, stride))
    if pos[-1] != last:
        pos.append(last)
    return np.array(pos, np.int64)


def score_windows(image, model, cfg):
    """Positive-class probability (infer mode) for every window on the stride grid."""
    c, h, w = image.shape
    s = cfg.window
    if tuple(model.config.input) != (c, s, s):
        raise ValueError(f"model input {tuple(model.config.input)} does not match "
                         f"{c}-channel {s}px windows")
    xs = window_origins(w, s, cfg.stride)
    ys = window_origins(h, s, cfg.stride)
    img = np.asarray(image, np.float32)
    grid = [(y, x) for y in ys for x in xs]
    scores = np.empty(len(grid), np.float32)
    for start in range(0, len(grid), cfg.batch_size):
        chunk = grid[start:start + cfg.batch_size]
        batch = np.stack([img[:, y:y + s, x:x + s] for y, x in chunk])
        probs, _ = net.forward(model, batch, "infer")
        scores[start:start + len(chunk)] = probs[:, 1]
    return ScoreMap(xs, ys, scores.reshape(len(ys), len(xs)), s)


def iou(a, b):
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def _rank(d):
    return (-d.score, d.box.y, d.box.x)


def nms(candidates, overlap_threshold):
    """Greedy suppression: keep the best remaining window, drop those with IoU above the threshold.

    Candidates are ranked by score (descending), then y, then x; the output
    keeps that order.
    """
    if not candidates:
        return []
    order = sorted(candidates, key=_rank)
    x1 = np.array([d.box.x for d in order], np.float64)
    y1 = np.array([d.box.y for d in order], np.float64)
    x2 = x1 + np.array([d.box.w for d in order], np.float64)
    y2 = y1 + np.array([d.box.h for d in order], np.float64)
    area = (x2 - x1) * (y2 - y1)
    alive = np.ones(len(order), bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.flatnonzero(alive[i + 1:]) + i + 1
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        ov = inter / (area[i] + area[rest] - inter)
        alive[rest[ov > overlap_threshold]] = False
    return keep


def candidates_from(score_map, threshold):
    s = score_map.window
    out = []
    for j, y in enumerate(score_map.ys):
        for i, x in enumerate(score_map.xs):
            score = float(score_map.scores[j, i])
            if score >= threshold:
                out.append(Detection(BoundingBox(int(x), int(y), s, s), score))
    return out


def detect(image, model, cfg):
    """score_windows -> keep scores >= detection_threshold -> nms."""
    smap = score_windows(image, model, cfg)
    return nms(candidates_from(smap, cfg.detection_threshold), cfg.overlap_threshold)


def match_detections(detections, truth, match_iou=0.3):
    """Greedy matching in descending score order, each truth box used at most once.

    A detection matches the unused truth box of highest IoU when that IoU is
    at least ``match_iou``. Returns ``(tp, fp, fn)`` counts.
    """
    used = [False] * len(truth)
    tp = fp = 0
    for d in sorted(detections, key=_rank):
        best, best_iou = -1, match_iou
        for j, t in enumerate(truth):
            if used[j]:
                continue
            v = iou(d.box, t)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[best] = True
            tp += 1
        else:
            fp += 1
    return tp, fp, len(truth) - tp


WHITE = np.array([255, 255, 255], np.uint8)
RED = np.array([255, 0, 0], np.uint8)


def _outline(rgb, box, color):
    h, w, _ = rgb.shape
    x0, y0 = int(box.x), int(box.y)
    x1, y1 = int(box.x + box.w) - 1, int(box.y + box.h) - 1
    cx0, cx1 = max(x0, 0), min(x1, w - 1)
    cy0, cy1 = max(y0, 0), min(y1, h - 1)
    if cx0 > cx1 or cy0 > cy1:
        return
    for y in (y0, y1):
        if 0 <= y < h:
            rgb[y, cx0:cx1 + 1] = color
    for x in (x0, x1):
        if 0 <= x < w:
            rgb[cy0:cy1 + 1, x] = color


def render_detections(image, detections, truth_boxes, path=None):
    """RGB overlay: truth boxes in white, detections in red on top; 1-pixel outlines."""
    rgb = to_uint8(image)
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    rgb = rgb.copy()
    for b in truth_boxes:
        _outline(rgb, b, WHITE)
    for d in detections:
        _outline(rgb, d.box, RED)
    if path is not None:
        save_raster(rgb, path)
    return rgb


def write_detections(records, path):
    """``records`` is an iterable of (image name, Detection list) pairs, written as JSON lines."""
    with open(path, "w", encoding="utf-8") as f:
        for image, dets in records:
            for d in dets:
                f.write(json.dumps(d.to_dict(image), sort_keys=True) + "\n")


def read_detections(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                r = json.loads(line)
                out.setdefault(r["image"], []).append(
                    Detection(BoundingBox(r["x"], r["y"], r["w"], r["h"]), r["score"]))
    return out
