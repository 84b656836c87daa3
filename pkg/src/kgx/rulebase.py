"""Clinical rules, local-corpus retrieval and feature vectorization.

A rule base lists visual rules (one extraction plan each) and demographic
rules (one patient attribute each). Retrieval ranks plain-text documents by
TF-IDF cosine similarity; vectorization maps per-rule extraction results and
a demographic record onto a fixed, named feature layout.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import EmptyCorpus, InvalidParameter, RuleBaseError, SchemaMismatch

VISUAL_FEATURES = ("count", "total_area", "mean_area", "mean_intensity", "centroid_dispersion", "presence")
DEMOGRAPHIC_FIELDS = ("age", "diabetes_duration", "hba1c")
RULE_KINDS = ("visual", "demographic")


@dataclass(frozen=True)
class DemographicRecord:
    age: float
    diabetes_duration: float
    hba1c: float

    def __post_init__(self):
        if not 0 <= self.age <= 120:
            raise InvalidParameter(f"age {self.age} outside [0, 120]")
        if not 0 <= self.diabetes_duration <= self.age:
            raise InvalidParameter("diabetes_duration must lie in [0, age]")
        if not 3 <= self.hba1c <= 20:
            raise InvalidParameter(f"hba1c {self.hba1c} outside [3, 20]")


@dataclass(frozen=True)
class ClinicalRule:
    rule_id: str
    kind: str
    name: str
    description: str
    feature_names: tuple
    expected_count: dict | None = None     # severity context -> (lo, hi)

    def to_dict(self) -> dict:
        d = {"rule_id": self.rule_id, "kind": self.kind, "name": self.name,
             "description": self.description, "feature_names": list(self.feature_names)}
        if self.expected_count is not None:
            d["expected_count"] = {k: list(v) for k, v in self.expected_count.items()}
        return d


@dataclass(frozen=True)
class RuleBase:
    disease: str
    rules: tuple
    provenance: tuple = ()                  # ({"doc_id", "start", "end"}, ...)

    @property
    def visual(self) -> list:
        return [r for r in self.rules if r.kind == "visual"]

    @property
    def demographic(self) -> list:
        return [r for r in self.rules if r.kind == "demographic"]

    def rule(self, rule_id) -> ClinicalRule:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        raise KeyError(rule_id)

    def to_dict(self) -> dict:
        return {"disease": self.disease, "rules": [r.to_dict() for r in self.rules],
                "provenance": [dict(p) for p in self.provenance]}


def _rule_from_dict(d, i) -> ClinicalRule:
    if not isinstance(d, dict):
        raise RuleBaseError(f"rules[{i}] must be an object")
    missing = {"rule_id", "kind", "name", "description", "feature_names"} - d.keys()
    if missing:
        raise RuleBaseError(f"rules[{i}] lacks {sorted(missing)}")
    unknown = d.keys() - {"rule_id", "kind", "name", "description", "feature_names", "expected_count"}
    if unknown:
        raise RuleBaseError(f"rules[{i}] has unknown keys {sorted(unknown)}")
    if d["kind"] not in RULE_KINDS:
        raise RuleBaseError(f"rules[{i}].kind must be one of {RULE_KINDS}")
    if not isinstance(d["rule_id"], str) or not d["rule_id"]:
        raise RuleBaseError(f"rules[{i}].rule_id must be a non-empty string")
    names = d["feature_names"]
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise RuleBaseError(f"rules[{i}].feature_names must be a list of strings")
    if d["kind"] == "visual":
        if not names:
            raise RuleBaseError(f"visual rule {d['rule_id']!r} lists no features")
        bad = [n for n in names if n not in VISUAL_FEATURES]
        if bad:
            raise RuleBaseError(f"visual rule {d['rule_id']!r}: unknown features {bad}")
    elif any(n not in DEMOGRAPHIC_FIELDS for n in names):
        raise RuleBaseError(f"demographic rule {d['rule_id']!r}: features must be among {DEMOGRAPHIC_FIELDS}")
    expected = d.get("expected_count")
    if expected is not None:
        if not isinstance(expected, dict):
            raise RuleBaseError(f"rules[{i}].expected_count must be an object")
        parsed = {}
        for ctx, rng in expected.items():
            if (not isinstance(rng, list) or len(rng) != 2
                    or not all(isinstance(v, int) and v >= 0 for v in rng) or rng[0] > rng[1]):
                raise RuleBaseError(f"rules[{i}].expected_count[{ctx!r}] must be [lo, hi] with 0 <= lo <= hi")
            parsed[ctx] = tuple(rng)
        expected = parsed
    return ClinicalRule(d["rule_id"], d["kind"], str(d["name"]), str(d["description"]),
                        tuple(names), expected)


def load_rulebase(document) -> RuleBase:
    """Validate a rule-base document (JSON text or an already parsed dict)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise RuleBaseError(f"rule base is not valid JSON: {exc}") from None
    if not isinstance(document, dict):
        raise RuleBaseError("rule base must be an object")
    for key in ("disease", "rules"):
        if key not in document:
            raise RuleBaseError(f"rule base lacks {key!r}")
    unknown = document.keys() - {"disease", "rules", "provenance"}
    if unknown:
        raise RuleBaseError(f"rule base has unknown keys {sorted(unknown)}")
    if not isinstance(document["rules"], list):
        raise RuleBaseError("'rules' must be a list")
    rules = tuple(_rule_from_dict(d, i) for i, d in enumerate(document["rules"]))
    seen = set()
    for r in rules:
        if r.rule_id in seen:
            raise RuleBaseError(f"duplicate rule_id {r.rule_id!r}")
        seen.add(r.rule_id)
    if not any(r.kind == "visual" for r in rules):
        raise RuleBaseError("rule base has no visual rule")
    prov = document.get("provenance", [])
    if not isinstance(prov, list):
        raise RuleBaseError("'provenance' must be a list")
    for p in prov:
        if not (isinstance(p, dict) and isinstance(p.get("doc_id"), str)
                and isinstance(p.get("start"), int) and isinstance(p.get("end"), int)
                and 0 <= p["start"] <= p["end"]):
            raise RuleBaseError("provenance entries need doc_id and 0 <= start <= end")
    return RuleBase(str(document["disease"]), rules, tuple(dict(p) for p in prov))


def dump_rulebase(rb: RuleBase) -> str:
    return json.dumps(rb.to_dict(), sort_keys=True, indent=2) + "\n"


def read_rulebase(path) -> RuleBase:
    return load_rulebase(Path(path).read_text())


def bundled_rulebase_text() -> str:
    return resources.files("kgx").joinpath("data/rulebase_dr.json").read_text()


def bundled_rulebase() -> RuleBase:
    return load_rulebase(bundled_rulebase_text())


def bundled_corpus_dir() -> Path:
    return Path(str(resources.files("kgx").joinpath("data/corpus")))


# ---------------------------------------------------------------- retrieval

DEFAULT_QUERY = ("diabetic retinopathy exudates hemorrhages microaneurysms cotton wool spots "
                 "age diabetes duration hba1c")

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def load_corpus(directory) -> dict:
    """doc_id (file name) -> text for every regular file in ``directory``."""
    d = Path(directory)
    if not d.is_dir():
        raise EmptyCorpus(f"corpus directory {d} does not exist")
    return {p.name: p.read_text() for p in sorted(d.iterdir()) if p.is_file()}


class TfidfIndex:
    """Raw term counts times smoothed idf ``ln((1+N)/(1+df)) + 1``, L2-normalised."""

    def __init__(self, corpus: dict):
        if not corpus:
            raise EmptyCorpus("cannot index an empty corpus")
        self.doc_ids = sorted(corpus)
        self.texts = [corpus[d] for d in self.doc_ids]
        counts = [Counter(tokenize(t)) for t in self.texts]
        df = Counter(term for c in counts for term in c)
        n = len(self.doc_ids)
        self.idf = {t: math.log((1 + n) / (1 + k)) + 1.0 for t, k in df.items()}
        self.vectors = [self._weigh(c) for c in counts]

    def _weigh(self, counts: Counter) -> dict:
        v = {t: c * self.idf[t] for t, c in counts.items() if t in self.idf}
        norm = math.sqrt(sum(x * x for x in v.values()))
        return {t: x / norm for t, x in v.items()} if norm > 0 else {}

    def query(self, text: str, k: int):
        if k < 1:
            raise InvalidParameter("k must be >= 1")
        q = self._weigh(Counter(tokenize(text)))
        scored = []
        for doc_id, text_, vec in zip(self.doc_ids, self.texts, self.vectors):
            s = sum(w * vec.get(t, 0.0) for t, w in q.items())
            scored.append((-min(max(s, 0.0), 1.0), doc_id, text_))
        scored.sort(key=lambda x: (x[0], x[1]))
        return [(doc_id, text_, -neg) for neg, doc_id, text_ in scored[:k]]


def retrieve_passages(corpus, query: str, k: int = 5):
    """Top-``k`` ``(doc_id, passage, score)``; ``corpus`` is a dict or a directory."""
    if not isinstance(corpus, dict):
        corpus = load_corpus(corpus)
    return TfidfIndex(corpus).query(query, k)


# ---------------------------------------------------------------- vectorization

@dataclass(frozen=True)
class FeatureSchema:
    """Ordered ``(rule_id, feature)`` entries plus demographic standardization stats."""
    entries: tuple                                   # ((rule_id, kind, feature), ...)
    stats: dict = field(default_factory=dict)        # feature -> (mean, std)

    @property
    def names(self) -> list[str]:
        return [f"{rid}.{feat}" for rid, _, feat in self.entries]

    def __len__(self):
        return len(self.entries)

    @property
    def visual_rules(self) -> list[str]:
        seen = []
        for rid, kind, _ in self.entries:
            if kind == "visual" and rid not in seen:
                seen.append(rid)
        return seen

    def to_dict(self) -> dict:
        return {"entries": [list(e) for e in self.entries],
                "stats": {k: list(v) for k, v in sorted(self.stats.items())}}

    @classmethod
    def from_dict(cls, d) -> "FeatureSchema":
        try:
            entries = tuple(tuple(e) for e in d["entries"])
            stats = {k: (float(v[0]), float(v[1])) for k, v in d.get("stats", {}).items()}
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise SchemaMismatch(f"malformed schema document: {exc}") from None
        schema = cls(entries, stats)
        schema.check()
        return schema

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def check(self) -> None:
        for rid, kind, feat in self.entries:
            if kind == "visual" and feat not in VISUAL_FEATURES:
                raise SchemaMismatch(f"unknown visual feature {feat!r} for rule {rid!r}")
            if kind == "demographic" and feat not in DEMOGRAPHIC_FIELDS:
                raise SchemaMismatch(f"unknown demographic field {feat!r} for rule {rid!r}")
            if kind not in RULE_KINDS:
                raise SchemaMismatch(f"unknown rule kind {kind!r}")


def schema_for(rb: RuleBase, demographics=()) -> FeatureSchema:
    """Schema over every rule of ``rb``; demographic stats fitted on ``demographics``."""
    entries = []
    for r in rb.visual:
        entries += [(r.rule_id, "visual", f) for f in VISUAL_FEATURES if f in r.feature_names]
    for r in rb.demographic:
        entries += [(r.rule_id, "demographic", f) for f in r.feature_names]
    stats = {}
    demographics = list(demographics)
    for _, kind, f in entries:
        if kind != "demographic":
            continue
        if demographics:
            vals = np.array([getattr(d, f) for d in demographics], dtype=np.float64)
            sd = float(vals.std())
            stats[f] = (float(vals.mean()), sd if sd > 0 else 1.0)
        else:
            stats[f] = (0.0, 1.0)
    return FeatureSchema(tuple(entries), stats)


def vectorize(results, demo: DemographicRecord | None, schema: FeatureSchema) -> np.ndarray:
    """Feature vector in schema order.

    ``results`` is an iterable of ExtractionResult (or a rule_id -> result
    mapping). A visual rule without a result contributes zeros, including a
    zero presence flag.
    """
    if isinstance(results, dict):
        by_rule = dict(results)
    else:
        by_rule = {}
        for res in results:
            by_rule[res.rule_id] = res
    known = set(schema.visual_rules)
    stray = sorted(set(by_rule) - known)
    if stray:
        raise SchemaMismatch(f"results for rules absent from the schema: {stray}")
    out = np.zeros(len(schema.entries))
    for i, (rid, kind, feat) in enumerate(schema.entries):
        if kind == "visual":
            res = by_rule.get(rid)
            if res is None:
                continue
            out[i] = 1.0 if feat == "presence" else float(res.scalar_features[feat])
        elif kind == "demographic":
            if demo is None:
                raise SchemaMismatch(f"schema needs demographic field {feat!r} but no record was given")
            mean, sd = schema.stats.get(feat, (0.0, 1.0))
            out[i] = (float(getattr(demo, feat)) - mean) / sd
        else:
            raise SchemaMismatch(f"unknown rule kind {kind!r}")
    return out


def write_feature_csv(path, schema: FeatureSchema, X) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.names)
        for row in np.asarray(X, dtype=np.float64):
            w.writerow([repr(float(v)) for v in row])


def read_feature_csv(path, schema: FeatureSchema | None = None) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaMismatch(f"{path} is empty")
    if schema is not None and rows[0] != schema.names:
        raise SchemaMismatch(f"{path}: header does not match the schema")
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(rows[0]))


def demographic_dict(d: DemographicRecord) -> dict:
    return asdict(d)
