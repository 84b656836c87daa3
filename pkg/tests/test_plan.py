import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgx.errors import (
    ArityMismatch,
    MalformedDocument,
    PlanExecutionError,
    TypeChainBroken,
    UnboundSlot,
    UnknownOp,
)
from kgx.imaging import box_iou
from kgx.plan import (
    bind_params,
    concrete,
    detection_score,
    execute_plan,
    load_plan,
    parse_plan,
    plan_from_dict,
    save_plan,
    serialize_plan,
    with_defaults,
)
from kgx.synth import SceneSpec, generate_sample

from plangen import random_plan_dict

MINIMAL = {
    "plan_id": "p", "rule_id": "exudates", "params": {},
    "steps": [{"op": "to_grayscale"}, {"op": "otsu_threshold"},
              {"op": "threshold", "args": {"polarity": "above"}},
              {"op": "connected_components", "args": {"connectivity": 8}}],
}


def doc_with(steps, params=None):
    return {"plan_id": "p", "rule_id": "r", "params": params or {}, "steps": steps}


def test_minimal_plan_parses():
    plan = plan_from_dict(MINIMAL)
    assert len(plan.steps) == 4
    assert plan.is_concrete()


@pytest.mark.parametrize("steps,params,err,step", [
    ([{"op": "to_grayscale"}, {"op": "clahe", "args": {"clip_limit": "$clip"}},
      {"op": "threshold", "args": {"polarity": "above", "t": 3}}, {"op": "connected_components"}],
     None, UnboundSlot, 1),
    ([{"op": "threshold", "args": {"polarity": "above", "t": 9}}, {"op": "connected_components"}],
     None, TypeChainBroken, 0),
    ([{"op": "to_grayscale"}, {"op": "blur"}], None, UnknownOp, 1),
    ([{"op": "to_grayscale"}, {"op": "clahe"}], None, ArityMismatch, 1),
    ([{"op": "to_grayscale"}, {"op": "clahe", "args": {"clip_limit": 2, "gain": 1}}], None, ArityMismatch, 1),
    ([{"op": "to_grayscale"}], None, TypeChainBroken, 0),
    ([{"op": "to_grayscale"}, {"op": "threshold", "args": {"polarity": "above"}},
      {"op": "connected_components"}], None, TypeChainBroken, 1),
    ([{"op": "to_grayscale"}, {"op": "threshold", "args": {"polarity": "above", "t": 5}},
      {"op": "exclude_disk"}, {"op": "connected_components"}], None, TypeChainBroken, 2),
])
def test_validation_errors_name_the_step(steps, params, err, step):
    with pytest.raises(err) as info:
        plan_from_dict(doc_with(steps, params))
    assert info.value.step == step
    assert f"step {step}" in str(info.value)


def test_int_argument_needs_int_slot():
    params = {"k": {"kind": "real", "min": 1, "max": 3, "default": 1, "grid_step": 1}}
    steps = [{"op": "to_grayscale"}, {"op": "threshold", "args": {"polarity": "above", "t": 1}},
             {"op": "morphology", "args": {"op": "open", "radius": "$k"}}, {"op": "connected_components"}]
    with pytest.raises(ArityMismatch):
        plan_from_dict(doc_with(steps, params))


@pytest.mark.parametrize("text", ["not json", "[]", '{"plan_id": "p"}',
                                  json.dumps({**MINIMAL, "extra": 1}),
                                  json.dumps({**MINIMAL, "steps": []})])
def test_malformed_documents(text):
    with pytest.raises(MalformedDocument):
        parse_plan(text)


def test_param_spec_invariants():
    bad = {"c": {"kind": "real", "min": 1, "max": 2, "default": 3, "grid_step": 0.5}}
    with pytest.raises(MalformedDocument):
        plan_from_dict(doc_with(MINIMAL["steps"], bad))
    bad = {"c": {"kind": "real", "min": 1, "max": 2, "default": 1, "grid_step": 0}}
    with pytest.raises(MalformedDocument):
        plan_from_dict(doc_with(MINIMAL["steps"], bad))


def test_serialization_is_canonical():
    text = serialize_plan(plan_from_dict(MINIMAL))
    assert serialize_plan(parse_plan(text)) == text
    shuffled = {k: MINIMAL[k] for k in reversed(list(MINIMAL))}
    assert serialize_plan(plan_from_dict(shuffled)) == text


@pytest.mark.parametrize("seed", range(40))
def test_random_plan_round_trip(seed):
    plan = plan_from_dict(random_plan_dict(seed))
    text = serialize_plan(plan)
    again = parse_plan(text)
    assert again == plan
    assert serialize_plan(again) == text


def test_bind_params_and_clamp():
    plan = load_plan_fixture()
    bound, clamped = bind_params(plan, {**plan.defaults(), "clip_limit": 2.0})
    assert bound.is_concrete() and not clamped
    assert bound.steps[plan.find_step("clahe")[0]].args["clip_limit"] == 2.0
    bound, clamped = bind_params(plan, {**plan.defaults(), "clip_limit": 9.0})
    assert clamped == {"clip_limit": (9.0, 5.0)}
    assert bound.steps[plan.find_step("clahe")[0]].args["clip_limit"] == 5.0
    with pytest.raises(UnboundSlot):
        bind_params(plan, {})


def test_with_defaults_clamps():
    plan = load_plan_fixture()
    assert with_defaults(plan, min_area=10_000).params["min_area"].default == plan.params["min_area"].max
    assert with_defaults(plan, min_area=33).params["min_area"].default == 33


def load_plan_fixture():
    from kgx.features import reference_plans
    return reference_plans()["exudates"]


def test_execute_requires_concrete_plan():
    with pytest.raises(UnboundSlot):
        execute_plan(load_plan_fixture(), np.zeros((64, 64, 3), np.uint8))


def test_black_image_gives_no_detections():
    res = execute_plan(concrete(plan_from_dict(MINIMAL)), np.zeros((64, 64, 3), np.uint8))
    assert res.count == 0 and res.detections == []
    assert res.scalar_features["count"] == 0.0


def test_black_image_through_exudate_plan():
    # brightest_region on an all-black raster keeps everything, and nothing is bright
    res = execute_plan(concrete(load_plan_fixture()), np.zeros((128, 128, 3), np.uint8))
    assert res.count == 0


def test_imaging_errors_carry_the_step():
    steps = [{"op": "to_grayscale"}, {"op": "clahe", "args": {"clip_limit": 2.0, "tiles_x": 64}},
             {"op": "threshold", "args": {"polarity": "above", "t": 3}}, {"op": "connected_components"}]
    plan = plan_from_dict(doc_with(steps))
    with pytest.raises(PlanExecutionError) as info:
        execute_plan(plan, np.zeros((16, 16, 3), np.uint8))
    assert info.value.step == 1


def test_reference_exudate_plan_on_planted_sample():
    s = generate_sample(SceneSpec(seed=21, exudates=4, hemorrhages=2))
    res = execute_plan(concrete(load_plan_fixture()), s.image)
    assert abs(res.count - 4) <= 1
    truth = s.boxes("exudate")
    for d in res.detections:
        assert max(box_iou(d.box, t) for t in truth) >= 0.5
    assert all(0.0 <= d.score <= 1.0 for d in res.detections)
    assert res.scalar_features["count"] == res.count


def test_execution_is_deterministic():
    s = generate_sample(SceneSpec(seed=4, exudates=3))
    plan = concrete(load_plan_fixture())
    a, b = execute_plan(plan, s.image), execute_plan(plan, s.image)
    assert a.boxes == b.boxes and a.scalar_features == b.scalar_features
    assert all(np.array_equal(x.mask, y.mask) for x, y in zip(a.detections, b.detections))


def test_detection_score_formula():
    assert detection_score(1.0, 50, (20, 80)) == 1.0
    assert detection_score(1.0, 20, (20, 80)) == 0.5
    assert detection_score(0.5, 50, (None, None)) == 0.5
    assert detection_score(1.0, 500, (20, 80)) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(1, 2000), st.integers(1, 500), st.integers(1, 500))
def test_detection_score_in_unit_interval(c, area, lo, width):
    assert 0.0 <= detection_score(c, area, (lo, lo + width)) <= 1.0


def test_save_and_load(tmp_path):
    plan = load_plan_fixture()
    save_plan(plan, tmp_path / "p.json")
    assert load_plan(tmp_path / "p.json") == plan
    assert replace(plan, plan_id="other") != plan
