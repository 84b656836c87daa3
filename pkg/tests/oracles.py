"""Slow, obviously-correct reference implementations used by the tests."""
from collections import deque
from fractions import Fraction

import numpy as np


def flood_fill_labels(mask, connectivity=8):
    """BFS labelling; labels follow raster order of each component's first pixel."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    if connectivity == 4:
        nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        nbrs = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]
    n = 0
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or labels[y, x]:
                continue
            n += 1
            labels[y, x] = n
            q = deque([(y, x)])
            while q:
                cy, cx = q.popleft()
                for dy, dx in nbrs:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = n
                        q.append((ny, nx))
    return labels, n


def region_stats(labels, n):
    out = []
    for lab in range(1, n + 1):
        pts = [(y, x) for y in range(labels.shape[0]) for x in range(labels.shape[1]) if labels[y, x] == lab]
        ys = [p[0] for p in pts]
        xs = [p[1] for p in pts]
        out.append({
            "area": len(pts),
            "bbox": (min(xs), min(ys), max(xs) + 1, max(ys) + 1),
            "centroid": (sum(xs) / len(xs), sum(ys) / len(ys)),
        })
    return out


def global_equalize(img):
    """Textbook histogram equalisation: v -> round_half_up(255 * cdf(v) / N), in integers."""
    flat = [int(v) for v in np.asarray(img).ravel()]
    n = len(flat)
    counts = [0] * 256
    for v in flat:
        counts[v] += 1
    lut, running = [], 0
    for c in counts:
        running += c
        lut.append((2 * 255 * running + n) // (2 * n))
    return np.array([lut[v] for v in flat], dtype=np.uint8).reshape(np.asarray(img).shape)


def otsu_sweep(img):
    """Exhaustive between-class-variance sweep over t in 0..254 with exact fractions."""
    vals = [int(v) for v in np.asarray(img).ravel()]
    best, best_t = None, None
    for t in range(255):
        lo = [v for v in vals if v <= t]
        hi = [v for v in vals if v > t]
        if not lo or not hi:
            continue
        n = len(vals)
        w0, w1 = Fraction(len(lo), n), Fraction(len(hi), n)
        m0, m1 = Fraction(sum(lo), len(lo)), Fraction(sum(hi), len(hi))
        crit = w0 * w1 * (m0 - m1) ** 2
        if best is None or crit > best:
            best, best_t = crit, t
    return best_t


def raster_iou(a, b, shape=(64, 64)):
    ma = np.zeros(shape, dtype=bool)
    mb = np.zeros(shape, dtype=bool)
    ma[a[1]:a[3], a[0]:a[2]] = True
    mb[b[1]:b[3], b[0]:b[2]] = True
    union = (ma | mb).sum()
    return (ma & mb).sum() / union


def brute_morph(mask, se, op):
    """Set-definition erosion/dilation; pixels outside the raster count as unset."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    r = se.shape[0] // 2
    offs = [(dy - r, dx - r) for dy in range(se.shape[0]) for dx in range(se.shape[1]) if se[dy, dx]]
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if op == "erode":
                out[y, x] = all(0 <= y + dy < h and 0 <= x + dx < w and mask[y + dy, x + dx] for dy, dx in offs)
            else:
                out[y, x] = any(0 <= y - dy < h and 0 <= x - dx < w and mask[y - dy, x - dx] for dy, dx in offs)
    return out


def tabulate_metrics(pred, labels, n_classes):
    """Per-class counts by explicit loops, then macro and weighted averages."""
    tp = [0] * n_classes
    pp = [0] * n_classes
    sup = [0] * n_classes
    for p, t in zip(pred, labels):
        pp[p] += 1
        sup[t] += 1
        if p == t:
            tp[p] += 1
    prec = [tp[c] / pp[c] if pp[c] else 0.0 for c in range(n_classes)]
    rec = [tp[c] / sup[c] if sup[c] else 0.0 for c in range(n_classes)]
    f1 = [2 * prec[c] * rec[c] / (prec[c] + rec[c]) if prec[c] + rec[c] else 0.0 for c in range(n_classes)]
    total = len(labels)
    return {
        "accuracy": sum(tp) / total,
        "precision_macro": sum(prec) / n_classes,
        "recall_macro": sum(rec) / n_classes,
        "f1_macro": sum(f1) / n_classes,
        "precision_weighted": sum(sup[c] * prec[c] for c in range(n_classes)) / total,
        "f1_weighted": sum(sup[c] * f1[c] for c in range(n_classes)) / total,
    }


def entropy_direct(scores):
    import math
    total = sum(scores)
    k = len(scores)
    p = [1.0 / k] * k if total == 0 else [s / total for s in scores]
    return -sum(q * math.log(q) for q in p if q > 0)
