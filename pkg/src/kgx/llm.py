"""Three-prompt bridge to a chat-completion backend.

consolidate_rules -> RuleBase, generate_plan -> ExtractionPlan and
refine_plan -> ExtractionPlan all go through the same loop: render a prompt,
ask the backend, validate the reply with the library parser, and on failure
re-ask with the validator's message appended. Nothing unvalidated is
returned. Every attempt is logged to the bridge transcript.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import httpx

from .errors import KgxError, InvalidParameter, RetriesExhausted, WrongRuleTarget
from .plan import OPS, ExtractionPlan, parse_plan, serialize_plan, with_defaults
from .rulebase import ClinicalRule, RuleBase, bundled_rulebase_text, load_rulebase

PROMPT_VERSION = "v1"
PROMPT_KINDS = ("consolidate", "generate", "refine")


@dataclass(frozen=True)
class BridgeConfig:
    backend: str = "mock"
    endpoint_url: str = ""
    model_name: str = "mock"
    api_key_env: str = "KGX_API_KEY"
    max_retries: int = 3
    temperature: float = 0.0
    seed: int = 0
    timeout: float = 60.0

    def __post_init__(self):
        if self.backend not in ("mock", "remote"):
            raise InvalidParameter(f"backend must be 'mock' or 'remote', got {self.backend!r}")
        if self.max_retries < 1:
            raise InvalidParameter("max_retries must be >= 1")
        if self.backend == "remote" and not self.endpoint_url:
            raise InvalidParameter("remote backend needs endpoint_url")


@dataclass
class RefinementFeedback:
    per_image_scores: list
    entropic_gain: float
    mean_score: float
    iou_summary: tuple            # (mean, min)
    precision: float
    recall: float
    clamp_flags: list = field(default_factory=list)
    count_bias: float = 0.0       # mean (detected - expected) per image

    def __post_init__(self):
        if not self.per_image_scores:
            raise InvalidParameter("feedback needs at least one per-image score")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iou_summary"] = list(self.iou_summary)
        return d


def load_prompt(kind: str, version: str = PROMPT_VERSION) -> str:
    if kind not in PROMPT_KINDS:
        raise InvalidParameter(f"unknown prompt kind {kind!r}")
    return resources.files("kgx").joinpath(f"data/prompts/{kind}_{version}.txt").read_text()


def render(template: str, **values) -> str:
    out = template
    for k, v in values.items():
        out = out.replace("{{" + k + "}}", str(v))
    return out


_FENCE = re.compile(r"^```[a-zA-Z]*\s*\n(.*?)\n```\s*$", re.S)


def strip_fences(text: str) -> str:
    """Chat models like to wrap JSON in markdown fences; drop them."""
    m = _FENCE.match(text.strip())
    return m.group(1) if m else text


# ---------------------------------------------------------------- backends

def bundled_plan_text(rule_id: str) -> str | None:
    res = resources.files("kgx").joinpath(f"data/plans/{rule_id}.json")
    return res.read_text() if res.is_file() else None


def slot_of(plan: ExtractionPlan, op: str, arg: str):
    for step in plan.steps:
        if step.op == op and isinstance(step.args.get(arg), str) and step.args[arg].startswith("$"):
            return step.args[arg][1:]
    return None


def mock_refine(plan: ExtractionPlan, feedback: RefinementFeedback) -> ExtractionPlan:
    """Deterministic stand-in for an LLM rewrite.

    Perfect feedback leaves the plan alone. Otherwise a clamp-flagged
    parameter is moved one grid step back inside its range; failing that the
    minimum-area filter moves one grid step against the sign of the count
    error (too many detections -> larger minimum area).
    """
    if feedback.mean_score >= 1.0:
        return plan
    for name in sorted(feedback.clamp_flags):
        spec = plan.params.get(name)
        if spec is None:
            continue
        mid = (spec.min + spec.max) / 2.0
        step = spec.grid_step if spec.default < mid else -spec.grid_step
        return with_defaults(plan, **{name: spec.default + step})
    slot = slot_of(plan, "filter_regions", "min_area")
    if slot is None or feedback.count_bias == 0:
        return plan
    spec = plan.params[slot]
    step = spec.grid_step if feedback.count_bias > 0 else -spec.grid_step
    return with_defaults(plan, **{slot: spec.default + step})


class MockBackend:
    """Fixture lookup plus the deterministic refinement policy.

    ``script`` maps a prompt kind to replies that are served, in order,
    before the fixture behaviour kicks in; it is how tests inject malformed
    output.
    """

    def __init__(self, seed: int = 0, script=None):
        self.seed = seed
        self.script = {k: list(v) for k, v in (script or {}).items()}

    def complete(self, kind: str, prompt: str, payload: dict) -> str:
        queued = self.script.get(kind)
        if queued:
            return queued.pop(0)
        if kind == "consolidate":
            return bundled_rulebase_text()
        if kind == "generate":
            text = bundled_plan_text(payload["rule"]["rule_id"])
            return text if text is not None else "no fixture plan for this rule"
        if kind == "refine":
            plan = parse_plan(payload["plan"])
            fb = RefinementFeedback(**payload["feedback"])
            return serialize_plan(mock_refine(plan, fb))
        raise InvalidParameter(f"unknown prompt kind {kind!r}")


class IdentityBackend:
    """Refiner that always hands the plan back unchanged."""

    def complete(self, kind: str, prompt: str, payload: dict) -> str:
        if kind != "refine":
            raise InvalidParameter("the identity backend only refines")
        return payload["plan"]


class RemoteBackend:
    """OpenAI-compatible chat-completion client (one POST per attempt)."""

    def __init__(self, config: BridgeConfig, client: httpx.Client | None = None):
        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout)

    def complete(self, kind: str, prompt: str, payload: dict) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": "Reply with a single JSON document."},
                {"role": "user", "content": prompt},
            ],
            "temperature": self.config.temperature,
            "seed": self.config.seed,
        }
        resp = self.client.post(self.config.endpoint_url, json=body, headers=headers)
        resp.raise_for_status()
        data = resp.json()
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise InvalidParameter("chat-completion response lacks choices[0].message.content") from None


class ReplayBackend:
    """Serves the replies recorded in an earlier transcript, in order."""

    def __init__(self, records):
        self.records = list(records)
        self.pos = 0

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def complete(self, kind: str, prompt: str, payload: dict) -> str:
        if self.pos >= len(self.records):
            raise InvalidParameter("transcript exhausted during replay")
        rec = self.records[self.pos]
        self.pos += 1
        if rec["kind"] != kind or rec["prompt"] != prompt:
            raise InvalidParameter(f"replay diverged at record {self.pos - 1} ({rec['kind']} vs {kind})")
        if "response" not in rec:
            raise InvalidParameter(f"recorded failure: {rec.get('verdict')}")
        return rec["response"]


def make_backend(config: BridgeConfig, script=None):
    if config.backend == "mock":
        return MockBackend(config.seed, script)
    return RemoteBackend(config)


# ---------------------------------------------------------------- bridge

class Bridge:
    def __init__(self, config: BridgeConfig = BridgeConfig(), backend=None):
        self.config = config
        self.backend = backend if backend is not None else make_backend(config)
        self.transcript: list[dict] = []

    def _ask(self, kind, prompt, payload, validate):
        last = None
        attempt_prompt = prompt
        for attempt in range(1, self.config.max_retries + 1):
            rec = {"kind": kind, "attempt": attempt, "prompt": attempt_prompt}
            try:
                reply = self.backend.complete(kind, attempt_prompt, payload)
            except (httpx.HTTPError, ValueError, KgxError) as exc:
                last = f"backend error: {exc}"
                rec["verdict"] = last
                self.transcript.append(rec)
                continue
            rec["response"] = reply
            try:
                value = validate(strip_fences(reply))
            except KgxError as exc:
                last = f"{type(exc).__name__}: {exc}"
                rec["verdict"] = last
                self.transcript.append(rec)
                attempt_prompt = (prompt + "\n\nYour previous reply was rejected by the validator:\n"
                                  + last + "\nReturn a corrected document.")
                continue
            rec["verdict"] = "ok"
            self.transcript.append(rec)
            return value
        raise RetriesExhausted(self.config.max_retries, last)

    def consolidate_rules(self, passages, disease: str = "diabetic retinopathy") -> RuleBase:
        passages = list(passages)
        if not passages:
            raise InvalidParameter("consolidation needs at least one passage")
        listing = "\n".join(f"[{p[0]}] {p[1].strip()}" for p in passages)
        prompt = render(load_prompt("consolidate"), disease=disease, passages=listing)
        payload = {"disease": disease, "doc_ids": [p[0] for p in passages]}
        return self._ask("consolidate", prompt, payload, load_rulebase)

    def generate_plan(self, rule: ClinicalRule) -> ExtractionPlan:
        if rule.kind != "visual":
            raise WrongRuleTarget(f"rule {rule.rule_id!r} is {rule.kind}; plans are generated for visual rules")
        ops = "\n".join(f"  {name}: {sig.takes} -> {sig.gives}; args {list(sig.required) + list(sig.optional)}"
                        for name, sig in sorted(OPS.items()))
        rule_text = json.dumps(rule.to_dict(), sort_keys=True, indent=2)
        prompt = render(load_prompt("generate"), rule=rule_text, ops=ops, rule_id=rule.rule_id)

        def validate(text):
            plan = parse_plan(text)
            if plan.rule_id != rule.rule_id:
                raise WrongRuleTarget(f"plan targets {plan.rule_id!r}, expected {rule.rule_id!r}")
            return plan

        return self._ask("generate", prompt, {"rule": rule.to_dict()}, validate)

    def refine_plan(self, plan: ExtractionPlan, feedback: RefinementFeedback) -> ExtractionPlan:
        plan_text = serialize_plan(plan)
        fb = feedback.to_dict()
        prompt = render(load_prompt("refine"), plan=plan_text,
                        feedback=json.dumps(fb, sort_keys=True, indent=2))

        def validate(text):
            new = parse_plan(text)
            if new.rule_id != plan.rule_id:
                raise WrongRuleTarget(f"refined plan targets {new.rule_id!r}, expected {plan.rule_id!r}")
            return new

        return self._ask("refine", prompt, {"plan": plan_text, "feedback": fb}, validate)

    def save_transcript(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for rec in self.transcript:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
