"""Image + demographics -> rule-based feature vectors, as an sklearn transformer."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import InvalidParameter, SchemaMismatch
from .llm import bundled_plan_text
from .plan import concrete, execute_plan, parse_plan
from .rulebase import DemographicRecord, RuleBase, bundled_rulebase, schema_for, vectorize


def reference_plans(rb: RuleBase | None = None) -> dict:
    """Bundled plans for every visual rule that has one, keyed by rule id."""
    rb = rb or bundled_rulebase()
    out = {}
    for rule in rb.visual:
        text = bundled_plan_text(rule.rule_id)
        if text is not None:
            out[rule.rule_id] = parse_plan(text)
    return out


def _split_item(item):
    if isinstance(item, tuple) and len(item) == 2 and (item[1] is None or isinstance(item[1], DemographicRecord)):
        return item
    return item, None


def run_plans(plans: dict, images, workers: int = 1) -> list[dict]:
    """Execute every plan on every image; one ``rule_id -> ExtractionResult`` dict per image.

    With ``workers > 1`` images are spread over a thread pool; results keep input order.
    """
    bound = {rid: concrete(p) for rid, p in sorted(plans.items())}

    def one(img):
        return {rid: execute_plan(p, img) for rid, p in bound.items()}

    if workers <= 1:
        return [one(img) for img in images]     # lazily, one image in memory at a time
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, images))


class RuleFeatureExtractor(TransformerMixin, BaseEstimator):
    """Runs the extraction plans and lays the results out in schema order.

    ``X`` is a sequence of images or of ``(image, DemographicRecord)`` pairs.
    ``fit`` fixes the schema and fits the demographic standardization on the
    training records; visual rules without a plan are zero-filled.
    """

    def __init__(self, rulebase=None, plans=None, workers: int = 1):
        self.rulebase = rulebase
        self.plans = plans
        self.workers = workers

    def _resolved(self):
        rb = self.rulebase if self.rulebase is not None else bundled_rulebase()
        plans = self.plans if self.plans is not None else reference_plans(rb)
        unknown = sorted(set(plans) - {r.rule_id for r in rb.visual})
        if unknown:
            raise SchemaMismatch(f"plans for rules absent from the rule base: {unknown}")
        return rb, plans

    def fit(self, X, y=None):
        rb, plans = self._resolved()
        demos = [d for _, d in map(_split_item, X) if d is not None]
        self.schema_ = schema_for(rb, demos if rb.demographic else ())
        self.missing_rules_ = sorted({r.rule_id for r in rb.visual} - set(plans))
        self.n_features_out_ = len(self.schema_)
        return self

    def extract(self, X) -> list[dict]:
        _, plans = self._resolved()
        return run_plans(plans, (img for img, _ in map(_split_item, X)), self.workers)

    def transform(self, X, results=None):
        """``results`` may carry precomputed per-image plan outputs (from ``extract``)."""
        check_is_fitted(self, "schema_")
        items = [_split_item(x) for x in X]
        if results is None:
            results = run_plans(self._resolved()[1], [img for img, _ in items], self.workers)
        if len(results) != len(items):
            raise InvalidParameter("one result set per image is required")
        if not items:
            return np.zeros((0, len(self.schema_)))
        return np.vstack([vectorize(r, d, self.schema_) for r, (_, d) in zip(results, items)])

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "schema_")
        return np.array(self.schema_.names, dtype=object)
