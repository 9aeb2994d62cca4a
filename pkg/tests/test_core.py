from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import rep, record, report, scene
from policy_router.core import (
    EpisodeTrace,
    EvaluationReport,
    ExecutionRecord,
    Frame,
    PolicyDescriptor,
    PolicyKind,
    RoutingDecision,
    SerializationError,
    Stage,
    TaskInstance,
    TaskMetadata,
    TaskRepresentation,
    deserialize,
    serialize,
    validate,
)


def test_validate_accepts_consistent_success():
    rec = record("r1", rep([1.0, 0.0, 0.0]))
    assert validate(rec) == []


def test_validate_flags_success_with_failure_stage():
    bad = EvaluationReport(True, 1.0, {}, Stage.GRASP, 1.0, "")
    rec = ExecutionRecord("r1", rep([1.0, 0.0]), "A", bad, 0)
    assert "success implies failure_stage none" in validate(rec)


def test_validate_flags_non_unit_vector():
    r = TaskRepresentation((0.5, 0.0, 0.0), TaskMetadata())
    rec = ExecutionRecord("r1", r, "A", report(True), 0)
    assert "vector must have unit norm" in validate(rec)


def test_validate_other_invariants():
    assert validate(EvaluationReport(False, 1.0, {}, Stage.GRASP, 0.3, "")) == ["grasp failure implies progress 0"]
    assert validate(TaskMetadata(frozenset({"a"}), 2)) == ["object_count must equal |involved_objects|"]
    assert validate(PolicyDescriptor("p", PolicyKind.SINGLE_TASK)) == ["single_task policy requires training_task_id"]
    assert validate(TaskInstance("", "x", scene())) == ["task_id must be non-empty"]
    dup = scene(("a", (0, 0, 0), ""), ("a", (1, 0, 0), ""))
    assert validate(dup) == ["scene object names must be unique"]
    d = RoutingDecision("A", {"A": 0.2, "B": 0.9})
    assert validate(d) == ["chosen_policy must have the maximal score"]
    with pytest.raises(TypeError):
        validate(3)


def test_validate_trace():
    f = [Frame(0.0, scene()), Frame(1.0, scene()), Frame(2.5, scene())]
    assert validate(EpisodeTrace(tuple(f), (False,) * 3, True, 2.5)) == []
    assert "elapsed_s must equal last minus first timestamp" in validate(EpisodeTrace(tuple(f), (), True, 2.0))
    assert "frame timestamps must be strictly increasing" in validate(EpisodeTrace((f[1], f[0]), (), True, -1.0))
    assert validate(EpisodeTrace((), (), True, 0.0)) == ["trace needs at least one frame"]


def test_serialize_canonical_vector():
    r = TaskRepresentation((1.0, 0.0, 0.0), TaskMetadata())
    text = serialize(r)
    assert '"vector":[1.0,0.0,0.0]' in text
    assert text == serialize(deserialize(text, TaskRepresentation))
    # keys sorted, no whitespace
    assert text.index('"metadata"') < text.index('"source_task_id"') < text.index('"vector"')
    assert " " not in text


def test_deserialize_names_missing_field():
    data = json.loads(serialize(record("r1", rep([0.0, 1.0]))))
    del data["policy_id"]
    with pytest.raises(SerializationError) as info:
        deserialize(json.dumps(data), ExecutionRecord)
    assert info.value.field == "policy_id"
    assert "policy_id" in str(info.value)


def test_deserialize_reports_byte_offset():
    with pytest.raises(SerializationError) as info:
        deserialize('{"a": "é", oops}', ExecutionRecord)
    # 'é' is two bytes in UTF-8, so the byte offset exceeds the char offset
    assert info.value.offset == len('{"a": "é", '.encode())


def test_deserialize_rejects_bad_enum_and_types():
    data = json.loads(serialize(report(False, Stage.TRANSPORT)))
    data["failure_stage"] = "flying"
    with pytest.raises(SerializationError):
        deserialize(json.dumps(data), EvaluationReport)
    data["failure_stage"] = "transport"
    data["success"] = "no"
    with pytest.raises(SerializationError):
        deserialize(json.dumps(data), EvaluationReport)


def test_serialize_rejects_nan():
    with pytest.raises(SerializationError):
        serialize(EvaluationReport(False, float("nan")))


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
names = st.text(st.characters(codec="utf-8"), max_size=8)


@st.composite
def records(draw):
    vec = draw(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
    vec[0] = 1.0 if abs(vec[0]) < 1e-3 else vec[0]
    objs = draw(st.frozensets(names, max_size=4))
    r = rep(vec, objs, draw(names))
    stage = draw(st.sampled_from(list(Stage)))
    metrics = draw(st.dictionaries(names, finite, max_size=4))
    rpt = EvaluationReport(stage is Stage.NONE, draw(finite.map(abs)), metrics, stage, draw(st.floats(0, 1)), draw(st.text()))
    episode = draw(st.dictionaries(names, st.one_of(st.integers(), finite, names), max_size=3))
    return ExecutionRecord(
        draw(names), r, draw(names), rpt, draw(st.integers(0, 2**53)), draw(st.integers(1, 9)),
        tuple(draw(st.lists(names, max_size=2))), episode,
    )


@settings(max_examples=200, deadline=None)
@given(records())
def test_serialization_round_trip_is_identity(rec):
    text = serialize(rec)
    back = deserialize(text, ExecutionRecord)
    assert back == rec
    assert serialize(back) == text


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=1, max_size=6))
def test_float_emission_round_trips_exactly(xs):
    r = TaskRepresentation(tuple(xs), TaskMetadata())
    assert deserialize(serialize(r), TaskRepresentation).vector == tuple(xs)


def test_decision_round_trip():
    d = RoutingDecision("B", {"A": 0.25, "B": 0.75}, ("r1", "r2"), 1.5, False, "D1")
    assert deserialize(serialize(d), RoutingDecision) == d
