"""Brute-force references used to check the engine. None of these share code with it."""
import itertools
import math

import numpy as np


def conv2d_ref(x, w, b, stride, pad):
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, F, oh, ow))
    for n in range(N):
        for f in range(F):
            for i in range(oh):
                for j in range(ow):
                    acc = math.fsum(
                        float(xp[n, c, i * stride + u, j * stride + v]) * float(w[f, c, u, v])
                        for c in range(C) for u in range(kh) for v in range(kw))
                    out[n, f, i, j] = acc + float(b[f])
    return out


def maxpool_ref(x, stride):
    N, C, H, W = x.shape
    oh, ow = (H - 3) // stride + 1, (W - 3) // stride + 1
    out = np.zeros((N, C, oh, ow), x.dtype)
    for n, c, i, j in itertools.product(range(N), range(C), range(oh), range(ow)):
        best = None
        for u in range(3):
            for v in range(3):
                val = x[n, c, i * stride + u, j * stride + v]
                if best is None or val > best:
                    best = val
        out[n, c, i, j] = best
    return out


def batchnorm_ref(x, gamma, beta, eps):
    N, C, H, W = x.shape
    out = np.zeros(x.shape)
    for c in range(C):
        vals = [float(v) for v in x[:, c].ravel()]
        mean = math.fsum(vals) / len(vals)
        var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
        out[:, c] = (x[:, c] - mean) / math.sqrt(var + eps) * float(gamma[c]) + float(beta[c])
    return out


def dense_ref(x, w, b):
    x2 = x.reshape(x.shape[0], -1)
    out = np.zeros((x2.shape[0], w.shape[0]))
    for n in range(x2.shape[0]):
        for o in range(w.shape[0]):
            out[n, o] = math.fsum(float(x2[n, i]) * float(w[o, i]) for i in range(w.shape[1])) + float(b[o])
    return out


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros(x.shape)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def auc_pairwise(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def ap_sweep(scores, labels):
    """Average precision by sweeping every distinct score as a threshold, highest first."""
    n_pos = sum(labels)
    prev_recall = 0.0
    ap = 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def iou_ref(a, b):
    """Pixel-counting IoU for integer boxes (x, y, w, h)."""
    pa = {(x, y) for x in range(a[0], a[0] + a[2]) for y in range(a[1], a[1] + a[3])}
    pb = {(x, y) for x in range(b[0], b[0] + b[2]) for y in range(b[1], b[1] + b[3])}
    return len(pa & pb) / len(pa | pb)


def rect_iou(a, b):
    iw = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def nms_ref(cands, thresh):
    """O(n^2) greedy NMS over tuples (x, y, w, h, score); returns kept tuples in order."""
    remaining = sorted(cands, key=lambda c: (-c[4], c[1], c[0]))
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [c for c in remaining if rect_iou(best, c) <= thresh]
    return kept


def rects_overlap(a, b):
    """Positive-area overlap by pixel enumeration for integer boxes (x, y, w, h)."""
    for x in range(a[0], a[0] + a[2]):
        if b[0] <= x < b[0] + b[2]:
            for y in range(a[1], a[1] + a[3]):
                if b[1] <= y < b[1] + b[3]:
                    return True
    return False
