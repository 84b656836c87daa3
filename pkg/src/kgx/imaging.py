"""Deterministic raster primitives that extraction plans are assembled from.

Rasters are ``uint8`` numpy arrays, shape ``(H, W)`` for one channel or
``(H, W, 3)`` for RGB, row-major. Masks are ``bool`` arrays of shape
``(H, W)``. Every function here is pure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    InvalidChannelCount,
    InvalidChannelIndex,
    InvalidParameter,
    NoBrightRegion,
    ShapeMismatch,
)


class Box(NamedTuple):
    """Pixel box; ``x0, y0`` inclusive, ``x1, y1`` exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def is_valid(self) -> bool:
        return self.x1 > self.x0 and self.y1 > self.y0


@dataclass(frozen=True)
class LabeledRegion:
    label: int
    area: int
    bbox: Box
    centroid: tuple[float, float]
    mean_intensity: float
    circularity: float


# ---------------------------------------------------------------- validation

def as_raster(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise InvalidParameter("raster values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise InvalidChannelCount(f"expected 1 or 3 channels, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidParameter("raster must be at least 1x1")
    return arr


def _gray(img) -> np.ndarray:
    arr = as_raster(img)
    if arr.ndim != 2:
        raise InvalidChannelCount("operation needs a single-channel raster")
    return arr


def _color(img) -> np.ndarray:
    arr = as_raster(img)
    if arr.ndim != 3:
        raise InvalidChannelCount("operation needs a 3-channel raster")
    return arr


def as_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeMismatch(f"mask must be 2-D, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


# ---------------------------------------------------------------- channels

def to_grayscale(img) -> np.ndarray:
    """Luma ``round(0.299 R + 0.587 G + 0.114 B)``, computed in integers (ties round up)."""
    arr = _color(img).astype(np.int32)
    luma = 299 * arr[..., 0] + 587 * arr[..., 1] + 114 * arr[..., 2]
    return ((luma + 500) // 1000).astype(np.uint8)


def extract_channel(img, idx: int) -> np.ndarray:
    arr = _color(img)
    if not 0 <= int(idx) < 3:
        raise InvalidChannelIndex(f"channel index {idx} out of range 0..2")
    return np.ascontiguousarray(arr[:, :, int(idx)])


# ---------------------------------------------------------------- CLAHE

def _tile_edges(n_px: int, n_tiles: int) -> np.ndarray:
    return (np.arange(n_tiles + 1) * n_px) // n_tiles


def clahe_tile_luts(img, clip_limit: float, tiles=(8, 8)) -> np.ndarray:
    """Per-tile lookup tables, shape ``(ny, nx, 256)``."""
    arr = _gray(img)
    nx, ny = (int(t) for t in tiles)
    if clip_limit < 1.0 or not math.isfinite(clip_limit):
        raise InvalidParameter(f"clip_limit must be >= 1.0, got {clip_limit}")
    h, w = arr.shape
    if nx < 1 or ny < 1 or nx > w or ny > h:
        raise InvalidParameter(f"tiles {tiles} invalid for a {w}x{h} raster")
    xe, ye = _tile_edges(w, nx), _tile_edges(h, ny)
    luts = np.empty((ny, nx, 256), dtype=np.uint8)
    for j in range(ny):
        for i in range(nx):
            tile = arr[ye[j]:ye[j + 1], xe[i]:xe[i + 1]]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            clip = clip_limit * n / 256.0
            excess = np.maximum(hist - clip, 0.0).sum()
            if excess > 0:
                hist = np.minimum(hist, clip) + excess / 256.0
            cum = np.cumsum(hist)
            luts[j, i] = np.floor(255.0 * cum / n + 0.5).clip(0, 255)
    return luts


def _axis_interp(n_px: int, edges: np.ndarray):
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    nt = len(centers)
    x = np.arange(n_px, dtype=np.float64)
    i0 = np.clip(np.searchsorted(centers, x, side="right") - 1, 0, nt - 1)
    i1 = np.minimum(i0 + 1, nt - 1)
    span = centers[i1] - centers[i0]
    with np.errstate(invalid="ignore", divide="ignore"):
        wgt = np.where(span > 0, (x - centers[i0]) / np.where(span > 0, span, 1.0), 0.0)
    return i0, i1, np.clip(wgt, 0.0, 1.0)


def clahe(img, clip_limit: float = 2.0, tiles=(8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation.

    Each tile histogram is clipped at ``clip_limit * tile_pixels / 256`` and the
    excess is spread evenly over all 256 bins in a single pass. Output pixels
    bilinearly blend the integer mappings of the four nearest tile centres.
    """
    arr = _gray(img)
    luts = clahe_tile_luts(arr, clip_limit, tiles).astype(np.float64)
    h, w = arr.shape
    nx, ny = (int(t) for t in tiles)
    x0, x1, wx = _axis_interp(w, _tile_edges(w, nx))
    y0, y1, wy = _axis_interp(h, _tile_edges(h, ny))
    out = np.empty((h, w), dtype=np.uint8)
    # pixels sharing the same four neighbouring tiles form rectangular blocks
    for ys in _runs(y0, y1):
        j0, j1 = y0[ys.start], y1[ys.start]
        WY = wy[ys, None]
        for xs in _runs(x0, x1):
            i0, i1 = x0[xs.start], x1[xs.start]
            WX = wx[None, xs]
            a = arr[ys, xs]
            top = (1.0 - WX) * luts[j0, i0][a] + WX * luts[j0, i1][a]
            bottom = (1.0 - WX) * luts[j1, i0][a] + WX * luts[j1, i1][a]
            out[ys, xs] = np.floor((1.0 - WY) * top + WY * bottom + 0.5).clip(0, 255)
    return out


def _runs(i0, i1):
    change = np.flatnonzero((np.diff(i0) != 0) | (np.diff(i1) != 0)) + 1
    bounds = np.concatenate([[0], change, [len(i0)]])
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


# ---------------------------------------------------------------- thresholds

def otsu_threshold(img) -> int:
    """Otsu's threshold with exact rational comparison; ties go to the smaller t.

    A constant raster returns its own value, so ``p > t`` selects nothing.
    """
    arr = _gray(img)
    hist = np.bincount(arr.ravel(), minlength=256).tolist()
    total_n = sum(hist)
    total_s = sum(v * c for v, c in enumerate(hist))
    best_t, best = None, Fraction(-1)
    n0 = s0 = 0
    for t in range(255):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = total_s - s0
        crit = Fraction((n1 * s0 - n0 * s1) ** 2, n0 * n1)
        if crit > best:
            best, best_t = crit, t
    if best_t is None:
        return int(arr.flat[0])
    return best_t


def threshold(img, t: float, polarity: str = "above") -> np.ndarray:
    arr = _gray(img)
    if polarity == "above":
        return arr > t
    if polarity == "below":
        return arr < t
    raise InvalidParameter(f"polarity must be 'above' or 'below', got {polarity!r}")


# ---------------------------------------------------------------- morphology

def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def morphology(mask, op: str, radius: int = 1, iters: int = 1) -> np.ndarray:
    m = as_mask(mask)
    if radius < 1 or iters < 1:
        raise InvalidParameter("radius and iters must be >= 1")
    se = disk(radius)

    def erode(x):
        return ndimage.binary_erosion(x, structure=se, iterations=iters, border_value=0)

    def dilate(x):
        return ndimage.binary_dilation(x, structure=se, iterations=iters, border_value=0)

    if op == "erode":
        return erode(m)
    if op == "dilate":
        return dilate(m)
    if op == "open":
        return dilate(erode(m))
    if op == "close":
        return erode(dilate(m))
    raise InvalidParameter(f"unknown morphology op {op!r}")


# ---------------------------------------------------------------- components

_STRUCT = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def label_mask(mask, connectivity: int = 8):
    """Label image with labels in raster-scan order of each component's first pixel."""
    if connectivity not in _STRUCT:
        raise InvalidParameter(f"connectivity must be 4 or 8, got {connectivity}")
    labels, n = ndimage.label(as_mask(mask), structure=_STRUCT[connectivity])
    return labels, n


def exposed_edges(mask) -> np.ndarray:
    """Per-pixel count of 4-neighbours that are unset or outside the raster."""
    m = as_mask(mask)
    p = np.pad(m, 1, constant_values=False)
    inner = (p[:-2, 1:-1].astype(np.int8) + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])
    return np.where(m, 4 - inner, 0)


def connected_components(mask, connectivity: int = 8, source=None) -> list[LabeledRegion]:
    """Regions of ``mask`` with area, bbox, centroid, circularity and mean source intensity.

    Perimeter is the exposed 4-neighbour edge count scaled by pi/4, which makes
    digital disks score close to 1 and thin curves close to 0.
    """
    m = as_mask(mask)
    labels, n = label_mask(m, connectivity)
    if n == 0:
        return []
    src = None
    if source is not None:
        src = _gray(source)
        if src.shape != m.shape:
            raise ShapeMismatch(f"source {src.shape} vs mask {m.shape}")
    regions = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        sub = labels[sl] == lab
        ys, xs = np.nonzero(sub)
        a = len(ys)
        perim = float(exposed_edges(sub).sum()) * math.pi / 4.0
        circ = min(1.0, 4.0 * math.pi * a / (perim * perim)) if perim > 0 else 1.0
        mean_i = float(src[sl][sub].sum(dtype=np.float64) / a) if src is not None else 0.0
        regions.append(LabeledRegion(
            label=lab,
            area=a,
            bbox=Box(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop),
            centroid=(float(xs.sum()) / a + sl[1].start, float(ys.sum()) / a + sl[0].start),
            mean_intensity=mean_i,
            circularity=circ,
        ))
    return regions


def region_mask(labels: np.ndarray, region: LabeledRegion) -> np.ndarray:
    return labels == region.label


# ---------------------------------------------------------------- overlap

def mask_iou(a, b) -> float:
    """|a & b| / |a | b|; two empty masks agree perfectly (1.0)."""
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def box_iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = iw * ih if iw > 0 and ih > 0 else 0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 1.0


def box_mask(box: Box, shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[box[1]:box[3], box[0]:box[2]] = True
    return m


def greedy_match(pred_boxes, truth_boxes) -> list[tuple[int, int, float]]:
    """One-to-one matching by descending box IoU.

    Returns ``(pred_index, truth_index, iou)`` triples. Only overlapping
    pairs are matched; IoU ties go to the smaller prediction index, then the
    smaller truth index.
    """
    pairs = []
    for i, p in enumerate(pred_boxes):
        for j, t in enumerate(truth_boxes):
            v = box_iou(p, t)
            if v > 0:
                pairs.append((-v, i, j))
    pairs.sort()
    used_p, used_t, out = set(), set(), []
    for neg, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        out.append((i, j, -neg))
    return out


# ---------------------------------------------------------------- optic disc

def brightest_region(img, mask_threshold: float = 0.98):
    """Largest component of pixels at or above the given intensity quantile.

    Returns ``(mask, (cx, cy), radius)`` with ``radius = sqrt(area / pi)``.
    """
    arr = _gray(img)
    if not 0.0 < mask_threshold < 1.0:
        raise InvalidParameter(f"mask_threshold must be in (0, 1), got {mask_threshold}")
    level = np.quantile(arr, mask_threshold)
    cut = arr >= level
    labels, n = label_mask(cut, 8)
    if n == 0:
        raise NoBrightRegion("no pixels survive the quantile cut")
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    best = int(np.argmax(sizes))
    region = labels == best
    ys, xs = np.nonzero(region)
    area = len(xs)
    return region, (float(xs.mean()), float(ys.mean())), math.sqrt(area / math.pi)


def exclude_disk(mask, center, radius: float, margin_factor: float = 1.0) -> np.ndarray:
    m = as_mask(mask)
    if radius <= 0:
        raise InvalidParameter("radius must be positive")
    if margin_factor < 1.0:
        raise InvalidParameter("margin_factor must be >= 1")
    ys, xs = np.indices(m.shape)
    r = margin_factor * radius
    inside = (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= r * r
    return m & ~inside


# ---------------------------------------------------------------- I/O

def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return as_raster(np.array(im))


def write_png(path, img) -> None:
    arr = as_raster(img)
    Image.fromarray(arr).save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("L")) >= 128


def write_mask_png(path, mask) -> None:
    write_png(path, as_mask(mask).astype(np.uint8) * 255)
