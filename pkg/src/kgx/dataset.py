"""On-disk dataset layout.

    images/<id>.png        RGB image
    truth/<id>.json        lesion boxes, counts, grade, disc, demographics, scene spec
    labels.csv             image_id,grade
    demographics.csv       image_id,age,diabetes_duration,hba1c
    detections.jsonl       simulated detector output (one scored box per line)
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidParameter, MissingGroundTruth
from .imaging import Box, read_png, write_png
from .rl import write_detections_jsonl
from .rng import derive_seed
from .rulebase import DEMOGRAPHIC_FIELDS, DemographicRecord
from .synth import TUNING_NOISE, DetectionNoise, scored_synthetic_detections

# rule ids of the bundled rule base and the lesion type each one counts
RULE_LESION = {
    "exudates": "exudate",
    "hemorrhages": "hemorrhage",
    "microaneurysms": "microaneurysm",
    "cotton_wool_spots": "cotton_wool",
}
LESION_RULE = {v: k for k, v in RULE_LESION.items()}


def write_dataset(out_dir, samples, seed: int, noise: DetectionNoise = TUNING_NOISE) -> list[str]:
    """Persist ``(image_id, SynthSample)`` pairs; returns the ids in order."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    ids, labels, demos, dets = [], [], [], []
    for iid, s in samples:
        write_png(out / "images" / f"{iid}.png", s.image)
        (out / "truth" / f"{iid}.json").write_text(json.dumps(s.truth_dict(), sort_keys=True, indent=2) + "\n")
        ids.append(iid)
        labels.append((iid, s.grade))
        demos.append((iid, s.demographic))
        h, w = s.image.shape[:2]
        boxes = s.boxes()
        kinds = [l.kind for l in s.lesions]
        stream = scored_synthetic_detections(boxes, (w, h), noise, derive_seed(seed, iid))
        # without drops the true detections come first, in lesion order
        for k, (box, score) in enumerate(stream):
            if noise.drop_rate > 0:
                rule = "detector"
            else:
                rule = LESION_RULE[kinds[k]] if k < len(kinds) else "spurious"
            dets.append((iid, rule, box, score))
    with open(out / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["image_id", "grade"])
        wr.writerows(labels)
    with open(out / "demographics.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["image_id", *DEMOGRAPHIC_FIELDS])
        for iid, d in demos:
            wr.writerow([iid] + [repr(float(getattr(d, f))) for f in DEMOGRAPHIC_FIELDS])
    write_detections_jsonl(out / "detections.jsonl", dets)
    return ids


@dataclass
class DatasetDir:
    root: Path
    ids: list

    @classmethod
    def open(cls, root) -> "DatasetDir":
        root = Path(root)
        img_dir = root / "images"
        if not img_dir.is_dir():
            raise InvalidParameter(f"{root}: not a dataset directory (no images/)")
        ids = sorted(p.stem for p in img_dir.glob("*.png"))
        if not ids:
            raise InvalidParameter(f"{img_dir}: no PNG images")
        return cls(root, ids)

    def image(self, iid):
        return read_png(self.root / "images" / f"{iid}.png")

    def truth(self, iid) -> dict:
        path = self.root / "truth" / f"{iid}.json"
        if not path.is_file():
            raise MissingGroundTruth(f"no truth sidecar for {iid} ({path})")
        return json.loads(path.read_text())

    def truth_boxes(self, iid, lesion: str | None = None) -> list[Box]:
        return [Box(*l["box"]) for l in self.truth(iid)["lesions"] if lesion is None or l["type"] == lesion]

    def expected_count(self, iid, lesion: str) -> int:
        counts = self.truth(iid).get("counts")
        if counts is None or lesion not in counts:
            raise MissingGroundTruth(f"truth sidecar for {iid} has no {lesion} count")
        return int(counts[lesion])

    def labels(self) -> dict:
        path = self.root / "labels.csv"
        if not path.is_file():
            raise MissingGroundTruth(f"{path} not found")
        with open(path, newline="") as fh:
            return {r["image_id"]: int(r["grade"]) for r in csv.DictReader(fh)}

    def demographics(self) -> dict:
        path = self.root / "demographics.csv"
        if not path.is_file():
            return {}
        with open(path, newline="") as fh:
            return {r["image_id"]: DemographicRecord(*(float(r[f]) for f in DEMOGRAPHIC_FIELDS))
                    for r in csv.DictReader(fh)}
