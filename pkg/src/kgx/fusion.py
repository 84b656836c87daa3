"""Confidence-gated fusion of an external deep model with the knowledge classifier,
plus the localization accuracy used to judge detections."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter, ReportedMissingIds, UndefinedMetric
from .imaging import Box, greedy_match

FUSION_COLUMNS = ("image_id", "y_dl", "s_dl", "y_kd", "s_kd", "y_final", "source")


@dataclass(frozen=True)
class ExternalPrediction:
    image_id: str
    y_dl: int
    s_dl: float

    def __post_init__(self):
        if not 0.0 <= self.s_dl <= 1.0:
            raise InvalidParameter(f"{self.image_id}: confidence {self.s_dl} outside [0, 1]")


@dataclass(frozen=True)
class FusionDecision:
    image_id: str
    y_dl: int
    s_dl: float
    y_kd: int
    s_kd: float
    y_final: int
    source: str


def knowledge_confidence(proba) -> float:
    p = np.asarray(proba, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise InvalidParameter("expected a probability vector")
    return float(p.max())


def fuse(dl: ExternalPrediction, kd_label: int, kd_proba) -> FusionDecision:
    """Deep label when its confidence is at least the knowledge confidence, else the knowledge label."""
    s_kd = knowledge_confidence(kd_proba)
    if dl.s_dl >= s_kd:
        return FusionDecision(dl.image_id, dl.y_dl, dl.s_dl, int(kd_label), s_kd, dl.y_dl, "deep")
    return FusionDecision(dl.image_id, dl.y_dl, dl.s_dl, int(kd_label), s_kd, int(kd_label), "knowledge")


def fuse_all(predictions, kd_outputs) -> list[FusionDecision]:
    """``predictions``: ExternalPrediction iterable; ``kd_outputs``: image_id -> (label, proba).

    Both sides must cover the same image ids. Output is sorted by image_id.
    """
    dl = {p.image_id: p for p in predictions}
    missing = set(dl) ^ set(kd_outputs)
    if missing:
        raise ReportedMissingIds(missing)
    return [fuse(dl[i], *kd_outputs[i]) for i in sorted(dl)]


def accuracy_summary(decisions, labels: dict) -> dict:
    if not decisions:
        raise UndefinedMetric("no fusion decisions to score")
    missing = {d.image_id for d in decisions} - set(labels)
    if missing:
        raise ReportedMissingIds(missing)
    n = len(decisions)
    return {
        "deep_only": sum(d.y_dl == labels[d.image_id] for d in decisions) / n,
        "knowledge_only": sum(d.y_kd == labels[d.image_id] for d in decisions) / n,
        "fused": sum(d.y_final == labels[d.image_id] for d in decisions) / n,
        "deep_share": sum(d.source == "deep" for d in decisions) / n,
    }


def write_fusion_csv(path, decisions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FUSION_COLUMNS)
        for d in decisions:
            w.writerow([d.image_id, d.y_dl, repr(d.s_dl), d.y_kd, repr(d.s_kd), d.y_final, d.source])


def read_predictions_jsonl(path) -> list[ExternalPrediction]:
    """Line-delimited records ``{"image_id", "label", "confidence"}``."""
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(ExternalPrediction(str(rec["image_id"]), int(rec["label"]), float(rec["confidence"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidParameter(f"{path}:{ln}: bad prediction record ({exc})") from None
    return out


def write_predictions_jsonl(path, predictions) -> None:
    with open(path, "w") as fh:
        for p in predictions:
            fh.write(json.dumps({"image_id": p.image_id, "label": p.y_dl, "confidence": p.s_dl},
                                sort_keys=True) + "\n")


def localization_accuracy(detections, truths, iou_min: float = 0.5) -> float:
    """Fraction of truth boxes greedily matched to a detection with IoU >= ``iou_min``.

    ``detections`` and ``truths`` are parallel per-image lists of boxes.
    """
    if len(detections) != len(truths):
        raise InvalidParameter("need one detection list per truth list")
    total = sum(len(t) for t in truths)
    if total == 0:
        raise UndefinedMetric("localization accuracy is undefined without truth objects")
    hit = 0
    for dets, tr in zip(detections, truths):
        hit += sum(1 for _, _, v in greedy_match([Box(*d) for d in dets], [Box(*t) for t in tr]) if v >= iou_min)
    return hit / total
