"""Fixture builders shared by several test modules."""
import json
from pathlib import Path

import numpy as np

from kgx.fusion import ExternalPrediction


def snapshot(run: Path) -> dict:
    """Every file's bytes; the manifest without its timestamps."""
    out = {}
    for p in sorted(Path(run).rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(run).as_posix()
        if p.name == "manifest.json":
            doc = json.loads(p.read_text())
            doc.pop("timestamps")
            out[rel] = doc
        else:
            out[rel] = p.read_bytes()
    return out


def kd_proba(label, conf, c=5):
    p = np.full(c, (1.0 - conf) / (c - 1))
    p[label] = conf
    return p


def calibrated_scenario(n=200, seed=0, c=5):
    """Deep stub right iff s_dl >= 0.8, knowledge stub right iff s_kd >= 0.8,
    and exactly one of the two is confident on every image."""
    rng = np.random.default_rng(seed)
    truth, preds, kd = {}, [], {}
    for i in range(n):
        iid = f"img_{i:04d}"
        y = int(rng.integers(0, c))
        truth[iid] = y
        hi, lo = rng.uniform(0.8, 1.0), rng.uniform(0.3, 0.8)
        deep_confident = rng.random() < 0.5
        s_dl, s_kd = (hi, lo) if deep_confident else (lo, hi)
        wrong = (y + 1 + int(rng.integers(0, c - 1))) % c
        preds.append(ExternalPrediction(iid, y if s_dl >= 0.8 else wrong, float(s_dl)))
        y_kd = y if s_kd >= 0.8 else wrong
        kd[iid] = (y_kd, kd_proba(y_kd, s_kd, c))
    return truth, preds, kd


def brute_force_fused_accuracy(truth, preds, kd):
    """Best achievable accuracy when each image may take either source."""
    best = 0
    for p in preds:
        best += max(p.y_dl == truth[p.image_id], kd[p.image_id][0] == truth[p.image_id])
    return best / len(preds)
