"""Pipeline configuration file: one JSON object, every section optional."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .classifiers import KINDS
from .errors import InvalidParameter
from .llm import BridgeConfig
from .rl import TUNING_PRESET, QConfig
from .verify import VerificationConfig

PATH_KEYS = ("corpus", "rulebase", "dataset", "plans", "predictions", "detections")


def _section(cls, doc, name):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise InvalidParameter(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise InvalidParameter(f"config section {name!r} has unknown keys {unknown}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise InvalidParameter(f"config section {name!r}: {exc}") from None


@dataclass(frozen=True)
class PipelineConfig:
    paths: dict = field(default_factory=dict)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    rl: QConfig = field(default_factory=lambda: QConfig(**TUNING_PRESET))
    classifier: str = "gradient_boosting"
    classifier_params: dict = field(default_factory=dict)
    fusion: bool = True

    def __post_init__(self):
        unknown = sorted(set(self.paths) - set(PATH_KEYS))
        if unknown:
            raise InvalidParameter(f"config paths has unknown keys {unknown}")
        if self.classifier not in KINDS:
            raise InvalidParameter(f"unknown classifier kind {self.classifier!r}; choose from {sorted(KINDS)}")
        try:
            KINDS[self.classifier](**self.classifier_params)
        except TypeError as exc:
            raise InvalidParameter(f"classifier_params: {exc}") from None

    @classmethod
    def from_dict(cls, doc) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise InvalidParameter("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidParameter(f"config has unknown keys {unknown}")
        rl = {**TUNING_PRESET, **(doc.get("rl") or {})}
        paths = doc.get("paths") or {}
        if not isinstance(paths, dict):
            raise InvalidParameter("config section 'paths' must be an object")
        return cls(
            paths=dict(paths),
            bridge=_section(BridgeConfig, doc.get("bridge"), "bridge"),
            verification=_section(VerificationConfig, doc.get("verification"), "verification"),
            rl=_section(QConfig, rl, "rl"),
            classifier=doc.get("classifier", "gradient_boosting"),
            classifier_params=dict(doc.get("classifier_params") or {}),
            fusion=bool(doc.get("fusion", True)),
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        if path is None:
            return cls()
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise InvalidParameter(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise InvalidParameter(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "paths": dict(sorted(self.paths.items())),
            "bridge": dataclasses.asdict(self.bridge),
            "verification": dataclasses.asdict(self.verification),
            "rl": dataclasses.asdict(self.rl),
            "classifier": self.classifier,
            "classifier_params": dict(self.classifier_params),
            "fusion": self.fusion,
        }

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)
