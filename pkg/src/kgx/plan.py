"""Closed, type-checked extraction plans.

A plan is a JSON document naming a sequence of imaging operations. Any
argument may be a ``"$slot"`` reference to a tunable parameter declared under
``params``. Plans are validated when parsed, so a plan that parses cannot hit a
kind mismatch at run time.

Value kinds flowing between steps::

    color -> gray -> mask -> regions -> detections
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import imaging
from .errors import (
    ArityMismatch,
    KgxError,
    MalformedDocument,
    PlanExecutionError,
    TypeChainBroken,
    UnboundSlot,
    UnknownOp,
)
from .imaging import Box


@dataclass(frozen=True)
class OpSignature:
    takes: str
    gives: str
    required: tuple = ()
    optional: dict = field(default_factory=dict)
    int_args: tuple = ()


OPS = {
    "to_grayscale": OpSignature("color", "gray"),
    "extract_channel": OpSignature("color", "gray", ("idx",), int_args=("idx",)),
    "clahe": OpSignature("gray", "gray", ("clip_limit",), {"tiles_x": 8, "tiles_y": 8},
                         int_args=("tiles_x", "tiles_y")),
    "otsu_threshold": OpSignature("gray", "gray"),
    "threshold": OpSignature("gray", "mask", ("polarity",), {"t": None}),
    "morphology": OpSignature("mask", "mask", ("op", "radius"), {"iters": 1},
                              int_args=("radius", "iters")),
    "connected_components": OpSignature("mask", "regions", (), {"connectivity": 8},
                                        int_args=("connectivity",)),
    "brightest_region": OpSignature("gray", "gray", ("mask_threshold",)),
    "exclude_disk": OpSignature("mask", "mask", (), {"margin_factor": 1.0}),
    "filter_regions": OpSignature("regions", "regions", (), {
        "min_area": None, "max_area": None, "min_circularity": None,
        "min_intensity": None, "max_intensity": None}),
    "emit_detections": OpSignature("regions", "detections"),
}

INPUT_KIND = "color"
FINAL_KINDS = ("regions", "detections")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str
    min: float
    max: float
    default: float
    grid_step: float

    def __post_init__(self):
        if self.kind not in ("real", "int"):
            raise MalformedDocument(f"param {self.name!r}: kind must be 'real' or 'int'")
        if not (self.min <= self.default <= self.max):
            raise MalformedDocument(f"param {self.name!r}: need min <= default <= max")
        if not self.grid_step > 0:
            raise MalformedDocument(f"param {self.name!r}: grid_step must be positive")

    def clamp(self, value):
        v = min(max(value, self.min), self.max)
        if self.kind == "int":
            v = int(round(v))
        return v

    def to_dict(self):
        return {"kind": self.kind, "min": self.min, "max": self.max,
                "default": self.default, "grid_step": self.grid_step}


@dataclass(frozen=True)
class PlanStep:
    op: str
    args: dict = field(default_factory=dict)

    def slots(self):
        return [v[1:] for v in self.args.values() if _is_slot(v)]


@dataclass(frozen=True)
class ExtractionPlan:
    plan_id: str
    rule_id: str
    steps: tuple
    params: dict

    def slots(self) -> set:
        return {s for step in self.steps for s in step.slots()}

    def is_concrete(self) -> bool:
        return not self.slots()

    def defaults(self) -> dict:
        return {name: spec.default for name, spec in self.params.items()}

    def find_step(self, op):
        return [i for i, s in enumerate(self.steps) if s.op == op]


@dataclass
class Detection:
    box: Box
    mask: np.ndarray          # cropped to ``box``
    score: float
    area: int
    centroid: tuple
    mean_intensity: float

    def full_mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.box.y0:self.box.y1, self.box.x0:self.box.x1] = self.mask
        return m


@dataclass
class ExtractionResult:
    rule_id: str
    detections: list
    scalar_features: dict

    @property
    def count(self) -> int:
        return len(self.detections)

    @property
    def boxes(self) -> list:
        return [d.box for d in self.detections]


def _is_slot(v) -> bool:
    return isinstance(v, str) and v.startswith("$")


# ---------------------------------------------------------------- parsing

def plan_from_dict(doc) -> ExtractionPlan:
    if not isinstance(doc, dict):
        raise MalformedDocument("plan document must be an object")
    expected = {"plan_id", "rule_id", "steps", "params"}
    missing = expected - doc.keys()
    if missing:
        raise MalformedDocument(f"missing keys: {sorted(missing)}")
    extra = doc.keys() - expected
    if extra:
        raise MalformedDocument(f"unknown keys: {sorted(extra)}")
    if not isinstance(doc["plan_id"], str) or not isinstance(doc["rule_id"], str):
        raise MalformedDocument("plan_id and rule_id must be strings")
    if not isinstance(doc["params"], dict) or not isinstance(doc["steps"], list):
        raise MalformedDocument("params must be an object and steps a list")

    params = {}
    for name, p in doc["params"].items():
        if not isinstance(p, dict):
            raise MalformedDocument(f"param {name!r} must be an object")
        try:
            params[name] = ParamSpec(name=name, kind=p["kind"], min=p["min"], max=p["max"],
                                     default=p["default"], grid_step=p["grid_step"])
        except (KeyError, TypeError) as exc:
            raise MalformedDocument(f"param {name!r}: {exc}") from None

    steps = []
    for i, s in enumerate(doc["steps"]):
        if not isinstance(s, dict) or "op" not in s:
            raise MalformedDocument("each step needs an 'op'", step=i)
        if set(s) - {"op", "args"}:
            raise MalformedDocument(f"unknown step keys {sorted(set(s) - {'op', 'args'})}", step=i)
        args = s.get("args", {})
        if not isinstance(args, dict):
            raise MalformedDocument("step args must be an object", step=i)
        steps.append(PlanStep(op=s["op"], args=dict(args)))

    plan = ExtractionPlan(doc["plan_id"], doc["rule_id"], tuple(steps), params)
    validate_plan(plan)
    return plan


def parse_plan(text: str) -> ExtractionPlan:
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedDocument(f"not valid JSON: {exc}") from None
    return plan_from_dict(doc)


def validate_plan(plan: ExtractionPlan) -> None:
    """Check vocabulary, arity, slot binding and the kind chain."""
    kind = INPUT_KIND
    have_otsu = have_disc = False
    for i, step in enumerate(plan.steps):
        sig = OPS.get(step.op)
        if sig is None:
            raise UnknownOp(f"unknown op {step.op!r}", step=i)
        missing = [a for a in sig.required if a not in step.args]
        extra = [a for a in step.args if a not in sig.required and a not in sig.optional]
        if missing or extra:
            raise ArityMismatch(f"{step.op}: missing {missing}, unexpected {extra}", step=i)
        for name, value in step.args.items():
            if _is_slot(value):
                slot = value[1:]
                if slot not in plan.params:
                    raise UnboundSlot(f"slot ${slot} has no params entry", step=i)
                if name in sig.int_args and plan.params[slot].kind != "int":
                    raise ArityMismatch(f"{step.op}.{name} needs an int slot", step=i)
            elif not (value is None or isinstance(value, (bool, int, float, str))):
                raise ArityMismatch(f"{step.op}.{name}: unsupported literal {value!r}", step=i)
        if sig.takes != kind:
            raise TypeChainBroken(f"{step.op} expects {sig.takes} input but receives {kind}", step=i)
        if step.op == "threshold" and step.args.get("t") is None and not have_otsu:
            raise TypeChainBroken("threshold without 't' needs an earlier otsu_threshold", step=i)
        if step.op == "exclude_disk" and not have_disc:
            raise TypeChainBroken("exclude_disk needs an earlier brightest_region", step=i)
        have_otsu |= step.op == "otsu_threshold"
        have_disc |= step.op == "brightest_region"
        kind = sig.gives
    if not plan.steps:
        raise MalformedDocument("plan has no steps")
    if kind not in FINAL_KINDS:
        raise TypeChainBroken(f"plan ends with {kind}; it must end with regions or detections",
                              step=len(plan.steps) - 1)


# ---------------------------------------------------------------- serialising

def plan_to_dict(plan: ExtractionPlan) -> dict:
    return {
        "plan_id": plan.plan_id,
        "rule_id": plan.rule_id,
        "params": {name: spec.to_dict() for name, spec in plan.params.items()},
        "steps": [{"op": s.op, "args": dict(s.args)} if s.args else {"op": s.op}
                  for s in plan.steps],
    }


def serialize_plan(plan: ExtractionPlan) -> str:
    """Canonical text: sorted keys, two-space indent, shortest round-trip floats."""
    return json.dumps(plan_to_dict(plan), sort_keys=True, indent=2, ensure_ascii=False,
                      allow_nan=False) + "\n"


# ---------------------------------------------------------------- binding

def bind_params(plan: ExtractionPlan, bindings: dict):
    """Replace every ``$slot`` with a literal.

    Values outside a slot's bounds are clamped. Returns ``(plan, clamped)``
    where ``clamped`` maps slot name to ``(requested, used)``.
    """
    clamped = {}
    values = {}
    for slot in sorted(plan.slots()):
        if slot not in bindings:
            raise UnboundSlot(f"no binding for ${slot}")
        spec = plan.params[slot]
        requested = bindings[slot]
        used = spec.clamp(requested)
        if used != requested:
            clamped[slot] = (requested, used)
        values[slot] = used
    steps = tuple(
        PlanStep(s.op, {k: values[v[1:]] if _is_slot(v) else v for k, v in s.args.items()})
        for s in plan.steps
    )
    return replace(plan, steps=steps), clamped


def with_defaults(plan: ExtractionPlan, **updates) -> ExtractionPlan:
    """Copy of ``plan`` whose ParamSpec defaults are replaced (values clamped)."""
    params = dict(plan.params)
    for name, value in updates.items():
        spec = params[name]
        params[name] = replace(spec, default=spec.clamp(value))
    return replace(plan, params=params)


def concrete(plan: ExtractionPlan, overrides=None) -> ExtractionPlan:
    bound, _ = bind_params(plan, {**plan.defaults(), **(overrides or {})})
    return bound


# ---------------------------------------------------------------- execution

def _scalar_features(dets) -> dict:
    n = len(dets)
    if n == 0:
        return {"count": 0.0, "total_area": 0.0, "mean_area": 0.0,
                "mean_intensity": 0.0, "centroid_dispersion": 0.0}
    areas = np.array([d.area for d in dets], dtype=np.float64)
    cents = np.array([d.centroid for d in dets], dtype=np.float64)
    disp = float(np.sqrt(((cents - cents.mean(axis=0)) ** 2).sum(axis=1).mean())) if n > 1 else 0.0
    return {
        "count": float(n),
        "total_area": float(areas.sum()),
        "mean_area": float(areas.mean()),
        "mean_intensity": float(np.mean([d.mean_intensity for d in dets])),
        "centroid_dispersion": disp,
    }


def detection_score(circularity, area, window) -> float:
    """``circularity * area_fit`` where area_fit peaks at the window midpoint."""
    lo, hi = window
    if lo is None or hi is None or hi <= lo:
        fit = 1.0
    else:
        mid = (lo + hi) / 2.0
        fit = min(1.0, max(0.0, 1.0 - abs(area - mid) / (hi - lo)))
    return float(min(1.0, max(0.0, circularity * fit)))


def execute_plan(plan: ExtractionPlan, img, memo: dict | None = None) -> ExtractionResult:
    """Run a concrete plan on one image.

    ``memo`` is an optional per-image cache shared between calls. Each step is
    keyed on its op, its arguments and the keys of the inputs it reads, so
    plans that differ in a late parameter reuse the early stages.
    """
    if not plan.is_concrete():
        raise UnboundSlot(f"plan still has slots {sorted(plan.slots())}")

    def cached(key, fn):
        if memo is None:
            return fn()
        if key not in memo:
            memo[key] = fn()
        return memo[key]

    value = img
    gray = None
    labels = None
    otsu_t = None
    disc = None
    window = (None, None)
    detections = None
    # cache keys of the current value, the last grayscale raster, the Otsu level and the disc
    k_value, k_gray, k_otsu, k_disc = ("input",), None, None, None
    for i, step in enumerate(plan.steps):
        a = {**OPS[step.op].optional, **step.args}
        key = (step.op, tuple(sorted(a.items())), k_value)
        try:
            if step.op == "to_grayscale":
                value = gray = cached(key, lambda v=value: imaging.to_grayscale(v))
                k_gray = key
            elif step.op == "extract_channel":
                value = gray = cached(key, lambda v=value: imaging.extract_channel(v, a["idx"]))
                k_gray = key
            elif step.op == "clahe":
                value = gray = cached(key, lambda v=value: imaging.clahe(
                    v, float(a["clip_limit"]), (a["tiles_x"], a["tiles_y"])))
                k_gray = key
            elif step.op == "otsu_threshold":
                otsu_t = cached(key, lambda v=value: imaging.otsu_threshold(v))
                k_otsu = key
                continue
            elif step.op == "brightest_region":
                disc = cached(key, lambda v=value: imaging.brightest_region(v, float(a["mask_threshold"]))[1:])
                k_disc = key
                continue
            elif step.op == "threshold":
                t = otsu_t if a["t"] is None else a["t"]
                key = key + (k_otsu if a["t"] is None else None,)
                value = cached(key, lambda v=value: imaging.threshold(v, t, a["polarity"]))
            elif step.op == "morphology":
                value = cached(key, lambda v=value: imaging.morphology(v, a["op"], a["radius"], a["iters"]))
            elif step.op == "exclude_disk":
                key = key + (k_disc,)
                value = cached(key, lambda v=value: imaging.exclude_disk(v, disc[0], disc[1],
                                                                         float(a["margin_factor"])))
            elif step.op == "connected_components":
                key = key + (k_gray,)
                labels, value = cached(key, lambda v=value, g=gray: (
                    imaging.label_mask(v, a["connectivity"])[0],
                    imaging.connected_components(v, a["connectivity"], source=g)))
            elif step.op == "filter_regions":
                value = [r for r in value if _keep(r, a)]
                window = (a["min_area"], a["max_area"])
            elif step.op == "emit_detections":
                detections = value = _to_detections(value, labels, window)
        except KgxError as exc:
            raise PlanExecutionError(i, exc) from exc
        k_value = key
    if detections is None:
        detections = _to_detections(value, labels, window)
    return ExtractionResult(plan.rule_id, detections, _scalar_features(detections))


def _keep(region, a) -> bool:
    if a["min_area"] is not None and region.area < a["min_area"]:
        return False
    if a["max_area"] is not None and region.area > a["max_area"]:
        return False
    if a["min_circularity"] is not None and region.circularity < a["min_circularity"]:
        return False
    if a["min_intensity"] is not None and region.mean_intensity < a["min_intensity"]:
        return False
    if a["max_intensity"] is not None and region.mean_intensity > a["max_intensity"]:
        return False
    return True


def _to_detections(regions, labels, window) -> list:
    dets = []
    for r in regions:
        b = r.bbox
        local = labels[b.y0:b.y1, b.x0:b.x1] == r.label
        dets.append(Detection(b, local, detection_score(r.circularity, r.area, window),
                              r.area, r.centroid, r.mean_intensity))
    return dets


def load_plan(path) -> ExtractionPlan:
    with open(path, encoding="utf-8") as fh:
        return parse_plan(fh.read())


def save_plan(plan: ExtractionPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_plan(plan))
