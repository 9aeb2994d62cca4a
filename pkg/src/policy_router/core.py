"""Domain types shared by every part of the router, plus validation and
canonical JSON serialization.

All types are frozen dataclasses. Collections are stored as tuples or
frozensets so values can be shared across threads without copying.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import types
import typing
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

UNIT_NORM_TOL = 1e-9


class SerializationError(ValueError):
    """Malformed or incomplete serialized text.

    ``offset`` is the byte offset of a syntax error (``None`` for
    structural problems such as a missing field); ``field`` names the
    offending field when known.
    """

    def __init__(self, message: str, *, offset: int | None = None, field: str | None = None):
        super().__init__(message)
        self.offset = offset
        self.field = field


class Stage(str, enum.Enum):
    NONE = "none"
    GRASP = "grasp"
    TRANSPORT = "transport"
    PLACEMENT = "placement"
    TIMEOUT = "timeout"


class PolicyKind(str, enum.Enum):
    SINGLE_TASK = "single_task"
    MULTI_TASK = "multi_task"


@dataclass(frozen=True)
class SceneObject:
    name: str
    position: tuple[float, float, float]
    category: str = ""


@dataclass(frozen=True)
class SceneFeatures:
    """Feature-level stand-in for a visual observation."""

    objects: tuple[SceneObject, ...] = ()
    camera_pose: tuple[float, float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    extra: dict[str, float] = field(default_factory=dict)

    def object(self, name: str) -> SceneObject:
        for obj in self.objects:
            if obj.name == name:
                return obj
        raise KeyError(name)

    def moved(self, name: str, delta: Iterable[float]) -> SceneFeatures:
        """Copy of the scene with one object translated by ``delta``."""
        d = tuple(delta)
        objs = tuple(
            dataclasses.replace(o, position=tuple(p + q for p, q in zip(o.position, d)))
            if o.name == name
            else o
            for o in self.objects
        )
        return dataclasses.replace(self, objects=objs)


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    instruction: str
    scene: SceneFeatures = field(default_factory=SceneFeatures)
    timestamp: int = 0


@dataclass(frozen=True)
class TaskMetadata:
    involved_objects: frozenset[str] = frozenset()
    object_count: int = 0
    tags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class TaskRepresentation:
    vector: tuple[float, ...]
    metadata: TaskMetadata = field(default_factory=TaskMetadata)
    source_task_id: str = ""


@dataclass(frozen=True)
class PolicyDescriptor:
    policy_id: str
    kind: PolicyKind = PolicyKind.MULTI_TASK
    training_task_id: str | None = None
    endpoint: str = ""


@dataclass(frozen=True)
class EvaluationReport:
    success: bool
    elapsed_s: float
    metrics: dict[str, float] = field(default_factory=dict)
    failure_stage: Stage = Stage.NONE
    progress: float = 1.0
    summary: str = ""


@dataclass(frozen=True)
class ExecutionRecord:
    record_id: str
    representation: TaskRepresentation
    policy_id: str
    report: EvaluationReport
    created_at: int
    # Bumped by human review; the log keeps every version.
    version: int = 1
    flags: tuple[str, ...] = ()
    # Free-form JSON describing how the episode was produced (task id,
    # simulator axis values, ...). Needed to re-run a configuration.
    episode: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class RoutingDecision:
    chosen_policy: str
    scores: dict[str, float]
    evidence: tuple[str, ...] = ()
    routing_latency_ms: float = 0.0
    fallback: bool = False
    decision_id: str = ""


@dataclass(frozen=True)
class Frame:
    t: float
    scene: SceneFeatures


@dataclass(frozen=True)
class EpisodeTrace:
    frames: tuple[Frame, ...]
    gripper_states: tuple[bool, ...] = ()
    outcome: bool = False
    elapsed_s: float = 0.0


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def vector_norm(vec: Iterable[float]) -> float:
    return math.sqrt(math.fsum(x * x for x in vec))


def _finite(xs: Iterable[float]) -> bool:
    return all(math.isfinite(x) for x in xs)


def validate_scene(scene: SceneFeatures) -> list[str]:
    out = []
    names = [o.name for o in scene.objects]
    if len(names) != len(set(names)):
        out.append("scene object names must be unique")
    for o in scene.objects:
        if len(o.position) != 3 or not _finite(o.position):
            out.append(f"object {o.name!r} position must be a finite 3-vector")
    if len(scene.camera_pose) != 6 or not _finite(scene.camera_pose):
        out.append("camera_pose must be a finite 6-vector")
    return out


def validate_task(task: TaskInstance) -> list[str]:
    out = []
    if not task.task_id:
        out.append("task_id must be non-empty")
    if not task.instruction.strip():
        out.append("instruction must be non-empty")
    return out + validate_scene(task.scene)


def validate_metadata(meta: TaskMetadata) -> list[str]:
    if meta.object_count != len(meta.involved_objects):
        return ["object_count must equal |involved_objects|"]
    return []


def validate_representation(rep: TaskRepresentation, dim: int | None = None) -> list[str]:
    out = []
    if dim is not None and len(rep.vector) != dim:
        out.append(f"dimension {len(rep.vector)} != configured {dim}")
    if not _finite(rep.vector):
        out.append("vector must be finite")
    elif abs(vector_norm(rep.vector) - 1.0) > UNIT_NORM_TOL:
        out.append("vector must have unit norm")
    return out + validate_metadata(rep.metadata)


def validate_report(report: EvaluationReport) -> list[str]:
    out = []
    if report.elapsed_s < 0 or not math.isfinite(report.elapsed_s):
        out.append("elapsed_s must be a nonnegative finite number")
    if not 0.0 <= report.progress <= 1.0:
        out.append("progress must lie in [0, 1]")
    if report.success and report.failure_stage is not Stage.NONE:
        out.append("success implies failure_stage none")
    if report.success and report.progress != 1.0:
        out.append("success implies progress 1")
    if report.failure_stage is Stage.GRASP and report.progress != 0.0:
        out.append("grasp failure implies progress 0")
    if not _finite(report.metrics.values()):
        out.append("metrics must be finite")
    return out


def validate_policy(policy: PolicyDescriptor) -> list[str]:
    if policy.kind is PolicyKind.SINGLE_TASK and not policy.training_task_id:
        return ["single_task policy requires training_task_id"]
    return []


def validate_pool(pool: Iterable[PolicyDescriptor]) -> list[str]:
    out = []
    seen: set[str] = set()
    for p in pool:
        if p.policy_id in seen:
            out.append(f"duplicate policy_id {p.policy_id!r}")
        seen.add(p.policy_id)
        out += validate_policy(p)
    return out


def validate_record(
    record: ExecutionRecord,
    *,
    dim: int | None = None,
    pool: Iterable[str] | None = None,
) -> list[str]:
    out = []
    if not record.record_id:
        out.append("record_id must be non-empty")
    if pool is not None and record.policy_id not in set(pool):
        out.append(f"policy {record.policy_id!r} is not registered")
    return out + validate_representation(record.representation, dim) + validate_report(record.report)


def validate_decision(decision: RoutingDecision) -> list[str]:
    out = []
    if decision.chosen_policy not in decision.scores:
        return ["chosen_policy must be scored"]
    if decision.scores[decision.chosen_policy] < max(decision.scores.values()):
        out.append("chosen_policy must have the maximal score")
    if any(not 0.0 <= s <= 1.0 for s in decision.scores.values()):
        out.append("scores must lie in [0, 1]")
    if decision.routing_latency_ms < 0:
        out.append("routing_latency_ms must be nonnegative")
    return out


def validate_trace(trace: EpisodeTrace) -> list[str]:
    out = []
    if not trace.frames:
        return ["trace needs at least one frame"]
    ts = [f.t for f in trace.frames]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        out.append("frame timestamps must be strictly increasing")
    if abs(trace.elapsed_s - (ts[-1] - ts[0])) > 1e-9:
        out.append("elapsed_s must equal last minus first timestamp")
    if trace.gripper_states and len(trace.gripper_states) != len(trace.frames):
        out.append("gripper_states must align with frames")
    return out


_VALIDATORS = {
    ExecutionRecord: validate_record,
    EvaluationReport: validate_report,
    TaskRepresentation: validate_representation,
    TaskMetadata: validate_metadata,
    TaskInstance: validate_task,
    SceneFeatures: validate_scene,
    PolicyDescriptor: validate_policy,
    RoutingDecision: validate_decision,
    EpisodeTrace: validate_trace,
}


def validate(value: Any, **kwargs: Any) -> list[str]:
    """Return every violated invariant of ``value`` (empty list means ok)."""
    try:
        fn = _VALIDATORS[type(value)]
    except KeyError:
        raise TypeError(f"no validator for {type(value).__name__}") from None
    return fn(value, **kwargs)


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------


def to_jsonable(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (set, frozenset)):
        return sorted(to_jsonable(v) for v in value)
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, float) and not math.isfinite(value):
        raise SerializationError(f"non-finite number {value!r}")
    return value


def dumps(data: Any) -> str:
    """Canonical JSON text: sorted keys, no whitespace, shortest
    round-trip float representation (at most 17 significant digits)."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False, ensure_ascii=False)


def serialize(value: Any) -> str:
    return dumps(to_jsonable(value))


_hints_cache: dict[type, dict[str, Any]] = {}


def _hints(cls: type) -> dict[str, Any]:
    try:
        return _hints_cache[cls]
    except KeyError:
        h = _hints_cache[cls] = typing.get_type_hints(cls)
        return h


def from_jsonable(tp: Any, data: Any, path: str = "$") -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp is Any:
        return data
    if origin in (typing.Union, types.UnionType):
        if data is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return from_jsonable(inner[0], data, path)
    if isinstance(tp, type) and dataclasses.is_dataclass(tp):
        if not isinstance(data, dict):
            raise SerializationError(f"{path}: expected object for {tp.__name__}")
        hints = _hints(tp)
        kwargs = {}
        for f in dataclasses.fields(tp):
            if f.name in data:
                kwargs[f.name] = from_jsonable(hints[f.name], data[f.name], f"{path}.{f.name}")
            elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise SerializationError(
                    f"{path}: missing required field {f.name!r} for {tp.__name__}", field=f.name
                )
        return tp(**kwargs)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(data)
        except ValueError:
            raise SerializationError(f"{path}: invalid {tp.__name__} value {data!r}") from None
    if origin is tuple:
        if not isinstance(data, list):
            raise SerializationError(f"{path}: expected array")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(from_jsonable(args[0], v, f"{path}[{i}]") for i, v in enumerate(data))
        if len(args) != len(data):
            raise SerializationError(f"{path}: expected {len(args)} items, got {len(data)}")
        return tuple(from_jsonable(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, data)))
    if origin in (frozenset, set):
        if not isinstance(data, list):
            raise SerializationError(f"{path}: expected array")
        return frozenset(from_jsonable(args[0], v, path) for v in data)
    if origin in (list,):
        return [from_jsonable(args[0], v, path) for v in data]
    if origin in (dict,):
        if not isinstance(data, dict):
            raise SerializationError(f"{path}: expected object")
        return {k: from_jsonable(args[1], v, f"{path}.{k}") for k, v in data.items()}
    if tp is float:
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise SerializationError(f"{path}: expected number")
        return float(data)
    if tp is int:
        if isinstance(data, bool) or not isinstance(data, int):
            raise SerializationError(f"{path}: expected integer")
        return data
    if tp is bool:
        if not isinstance(data, bool):
            raise SerializationError(f"{path}: expected boolean")
        return data
    if tp is str:
        if not isinstance(data, str):
            raise SerializationError(f"{path}: expected string")
        return data
    return data


def loads(text: str | bytes) -> Any:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise SerializationError(f"parse error at byte {offset}: {exc.msg}", offset=offset) from None


def deserialize(text: str | bytes, cls: type) -> Any:
    return from_jsonable(cls, loads(text))
