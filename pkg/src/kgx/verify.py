"""Self-verification: per-image extraction scores, entropic gain, refinement loop."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameter, MissingGroundTruth, RetriesExhausted
from .imaging import box_iou, greedy_match
from .llm import RefinementFeedback
from .plan import ExtractionPlan, concrete, execute_plan, plan_to_dict
from .rl import unsupervised_reward
from .rng import SplitMix64, derive_seed

MODES = ("mean_score", "entropy")
REGIMES = ("supervised", "unsupervised")
MATCH_IOU = 0.5


def per_image_score(result, truth, regime: str = "supervised") -> float:
    """Extraction correctness of one image in [0, 1].

    supervised: ``truth`` is a list of boxes; the score is the mean over truth
    boxes of the best IoU with any detection. An image without truth boxes
    scores 1.0 when nothing was detected and 0.0 otherwise.
    unsupervised: ``truth`` is the expected count.
    """
    if regime not in REGIMES:
        raise InvalidParameter(f"regime must be one of {REGIMES}")
    if truth is None:
        raise MissingGroundTruth(f"{regime} scoring needs "
                                 + ("truth boxes" if regime == "supervised" else "an expected count"))
    if regime == "unsupervised":
        return unsupervised_reward(result.count, int(truth))
    boxes = result.boxes
    if len(truth) == 0:
        return 1.0 if not boxes else 0.0
    if not boxes:
        return 0.0
    return float(np.mean([max(box_iou(d, t) for d in boxes) for t in truth]))


def entropic_gain(scores) -> float:
    """Shannon entropy of the scores normalised to a distribution (uniform if they sum to 0)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2:
        raise InvalidParameter("entropic gain needs at least two scores")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise InvalidParameter("scores must be finite and non-negative")
    total = s.sum()
    p = np.full(len(s), 1.0 / len(s)) if total == 0 else s / total
    nz = p[p > 0]
    return float(max(0.0, -(nz * np.log(nz)).sum()))


@dataclass(frozen=True)
class VerificationConfig:
    mode: str = "mean_score"
    tau: float | None = None          # None -> mode default
    max_iterations: int = 5
    regime: str = "supervised"

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParameter(f"mode must be one of {MODES}")
        if self.regime not in REGIMES:
            raise InvalidParameter(f"regime must be one of {REGIMES}")
        if self.max_iterations < 1:
            raise InvalidParameter("max_iterations must be >= 1")
        if self.tau is not None and not math.isfinite(self.tau):
            raise InvalidParameter("tau must be finite")

    def threshold(self, k: int) -> float:
        if self.tau is not None:
            return float(self.tau)
        return 0.9 * math.log(k) if self.mode == "entropy" else 0.7


@dataclass
class PlanVersion:
    iteration: int
    plan: ExtractionPlan
    per_image_scores: list
    entropic_gain: float
    mean_score: float

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "plan": plan_to_dict(self.plan),
                "per_image_scores": list(self.per_image_scores),
                "entropic_gain": self.entropic_gain, "mean_score": self.mean_score}


@dataclass
class VerificationReport:
    plan_versions: list = field(default_factory=list)
    passed: bool = False
    stop_reason: str = "budget_exhausted"
    final_plan: ExtractionPlan | None = None
    tau: float = 0.0
    mode: str = "mean_score"
    refiner_error: str | None = None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "tau": self.tau, "passed": self.passed,
                "stop_reason": self.stop_reason, "refiner_error": self.refiner_error,
                "final_plan": plan_to_dict(self.final_plan) if self.final_plan else None,
                "plan_versions": [v.to_dict() for v in self.plan_versions]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def clamp_flags(plan: ExtractionPlan) -> list[str]:
    """Parameters whose current default sits on one of its bounds."""
    return sorted(n for n, p in plan.params.items() if p.default in (p.min, p.max) and p.min < p.max)


def feedback_for(plan, results, truths, regime, scores) -> RefinementFeedback:
    """Metrics handed to the refiner; precision/recall use IoU >= 0.5 matches
    (supervised) or count overlap min(n, n*) (unsupervised)."""
    bias, tp, n_det, n_true, ious = [], 0, 0, 0, []
    for res, truth in zip(results, truths):
        if regime == "supervised":
            matches = greedy_match(res.boxes, truth)
            tp += sum(1 for _, _, v in matches if v >= MATCH_IOU)
            n_det += res.count
            n_true += len(truth)
            bias.append(res.count - len(truth))
            best = {j: v for _, j, v in matches}
            ious += [best.get(j, 0.0) for j in range(len(truth))]
        else:
            tp += min(res.count, int(truth))
            n_det += res.count
            n_true += int(truth)
            bias.append(res.count - int(truth))
    ious = ious or list(scores)
    return RefinementFeedback(
        per_image_scores=list(scores),
        entropic_gain=entropic_gain(scores),
        mean_score=float(np.mean(scores)),
        iou_summary=(float(np.mean(ious)), float(np.min(ious))),
        precision=tp / n_det if n_det else (1.0 if n_true == 0 else 0.0),
        recall=tp / n_true if n_true else 1.0,
        clamp_flags=clamp_flags(plan),
        count_bias=float(np.mean(bias)),
    )


def select_validation(ids, k: int, seed: int) -> list:
    """``k`` ids drawn without replacement with a seeded permutation, in input order."""
    ids = list(ids)
    if k < 2:
        raise InvalidParameter("verification needs K >= 2 validation images")
    if len(ids) < k:
        raise InvalidParameter(f"need {k} validation images, only {len(ids)} are eligible")
    perm = SplitMix64(derive_seed(seed, "validation")).permutation(len(ids))
    return [ids[i] for i in sorted(int(j) for j in perm[:k])]


def _meets(cfg, tau, e, mean) -> bool:
    return (e >= tau) if cfg.mode == "entropy" else (mean >= tau)


def verify_and_refine(plan: ExtractionPlan, validation, refiner, config: VerificationConfig = VerificationConfig()):
    """Execute, score, and refine until the criterion holds or the budget runs out.

    ``validation`` is a list of ``(image, truth)`` pairs kept fixed across
    iterations; ``refiner(plan, feedback)`` returns the next plan version.
    """
    validation = list(validation)
    k = len(validation)
    if k < 2:
        raise InvalidParameter("verification needs K >= 2 validation images")
    tau = config.threshold(k)
    report = VerificationReport(tau=tau, mode=config.mode)
    current = plan
    for it in range(config.max_iterations):
        bound = concrete(current)
        results = [execute_plan(bound, img) for img, _ in validation]
        truths = [t for _, t in validation]
        scores = [per_image_score(r, t, config.regime) for r, t in zip(results, truths)]
        e = entropic_gain(scores)
        mean = float(np.mean(scores))
        report.plan_versions.append(PlanVersion(it, current, scores, e, mean))
        if _meets(config, tau, e, mean):
            report.passed = True
            report.stop_reason = "threshold_met"
            report.final_plan = current
            return report
        if it == config.max_iterations - 1:
            break
        fb = feedback_for(current, results, truths, config.regime, scores)
        try:
            current = refiner(current, fb)
        except RetriesExhausted as exc:
            report.refiner_error = str(exc)
            break
    best = max(report.plan_versions, key=lambda v: (v.mean_score, -v.iteration))
    report.final_plan = best.plan
    return report
