"""Post-execution evaluation: turn an episode trace into a compact report.

Pipeline: keyframe sampling -> rule-based metric tools -> failure-stage
classification -> summary text. Tools come from a declarative manifest of
built-in kinds; summaries come from a template or a remote VQA service.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .core import EpisodeTrace, EvaluationReport, Stage, TaskInstance, to_jsonable

log = logging.getLogger(__name__)

DEFAULT_PROGRESS = {
    Stage.NONE: 1.0,
    Stage.PLACEMENT: 0.6,
    Stage.TRANSPORT: 0.3,
    Stage.TIMEOUT: 0.2,
    Stage.GRASP: 0.0,
}
GRASP_KEYS = ("grasped", "contact")
SUMMARY_LIMIT = 512


@dataclass(frozen=True)
class ToolFn:
    tool_id: str
    applies_to: str  # fnmatch pattern over task ids
    body: Callable[[EpisodeTrace], Mapping[str, float]]

    def matches(self, task_id: str) -> bool:
        return fnmatch.fnmatchcase(task_id, self.applies_to)


@dataclass(frozen=True)
class FrameSamplePlan:
    m: int = 2

    def indices(self, T: int) -> list[int]:
        return sample_frames(T, self.m)


def sample_frames(T: int, m: int) -> list[int]:
    """Endpoints plus ``m`` uniformly spaced intermediate frames."""
    if T < 1 or m < 0:
        raise ValueError("need T >= 1 and m >= 0")
    last = T - 1
    idx = {0, last}
    den = m + 1
    for i in range(1, m + 1):
        # round half away from zero of i*last/den, in exact integers
        idx.add((2 * i * last + den) // (2 * den))
    return sorted(idx)


# -- built-in tool kinds -----------------------------------------------------


def _positions(trace: EpisodeTrace, name: str) -> np.ndarray:
    return np.asarray([f.scene.object(name).position for f in trace.frames], dtype=float)


def distance_threshold(a: str, b: str, threshold: float, flag: str = "contact", metric: str = "min_distance"):
    def body(trace: EpisodeTrace) -> dict[str, float]:
        d = float(np.min(np.linalg.norm(_positions(trace, a) - _positions(trace, b), axis=1)))
        return {metric: d, flag: 1.0 if d <= threshold else 0.0}

    return body


def region_containment(obj: str, target: str, radius: float, flag: str = "placed"):
    def body(trace: EpisodeTrace) -> dict[str, float]:
        final = trace.frames[-1].scene
        d = math.dist(final.object(obj).position, final.object(target).position)
        return {flag: 1.0 if d <= radius else 0.0}

    return body


def pose_delta(obj: str, threshold: float, flag: str = "moved", metric: str = "pose_delta"):
    def body(trace: EpisodeTrace) -> dict[str, float]:
        p = _positions(trace, obj)
        d = float(np.max(np.linalg.norm(p - p[0], axis=1)))
        return {metric: d, flag: 1.0 if d >= threshold else 0.0}

    return body


TOOL_KINDS: dict[str, Callable[..., Callable[[EpisodeTrace], Mapping[str, float]]]] = {
    "distance-threshold": distance_threshold,
    "region-containment": region_containment,
    "pose-delta": pose_delta,
}


@dataclass(frozen=True)
class ToolManifest:
    tools: tuple[ToolFn, ...] = ()
    # fnmatch pattern -> timeout in seconds; first match wins
    timeouts: tuple[tuple[str, float], ...] = ()

    def timeout_for(self, task_id: str) -> float | None:
        for pattern, seconds in self.timeouts:
            if fnmatch.fnmatchcase(task_id, pattern):
                return seconds
        return None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ToolManifest:
        tools = []
        for entry in data.get("tools", []):
            kind = entry["kind"]
            if kind not in TOOL_KINDS:
                raise ValueError(f"unknown tool kind {kind!r}")
            tools.append(
                ToolFn(entry["tool_id"], entry.get("applies_to", "*"), TOOL_KINDS[kind](**entry.get("params", {})))
            )
        timeouts = data.get("timeouts", {})
        return cls(tuple(tools), tuple((k, float(v)) for k, v in timeouts.items()))

    @classmethod
    def load(cls, path: str) -> ToolManifest:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def run_tools(trace: EpisodeTrace, registry: Sequence[ToolFn], task_id: str) -> dict[str, float]:
    metrics: dict[str, float] = {"elapsed_s": float(trace.elapsed_s), "frame_count": float(len(trace.frames))}
    for tool in registry:
        if not tool.matches(task_id):
            continue
        try:
            produced = {k: float(v) for k, v in tool.body(trace).items()}
            if not all(math.isfinite(v) for v in produced.values()):
                raise ValueError("non-finite metric")
        except Exception as exc:  # one broken tool must not stop evaluation
            log.warning("tool %s failed on %s: %s", tool.tool_id, task_id, exc)
            metrics[f"{tool.tool_id}:error"] = 1.0
            continue
        for name, value in produced.items():
            metrics[f"{tool.tool_id}:{name}" if name in metrics else name] = value
    return metrics


def _flag(metrics: Mapping[str, float], key: str) -> bool:
    return metrics.get(key, 0.0) >= 0.5


def classify_stage(
    metrics: Mapping[str, float],
    outcome: bool,
    *,
    timeout_s: float | None = None,
    progress: Mapping[Stage, float] = DEFAULT_PROGRESS,
) -> tuple[Stage, float]:
    if outcome:
        return Stage.NONE, progress[Stage.NONE]
    if not any(_flag(metrics, k) for k in GRASP_KEYS):
        return Stage.GRASP, progress[Stage.GRASP]
    approach_key = "approached" if "approached" in metrics else "contact"
    if not _flag(metrics, approach_key):
        return Stage.TRANSPORT, progress[Stage.TRANSPORT]
    if "placed" in metrics and not _flag(metrics, "placed"):
        return Stage.PLACEMENT, progress[Stage.PLACEMENT]
    if timeout_s is not None and metrics.get("elapsed_s", 0.0) >= timeout_s:
        return Stage.TIMEOUT, progress[Stage.TIMEOUT]
    return Stage.PLACEMENT, progress[Stage.PLACEMENT]


def _violated_metric(metrics: Mapping[str, float], stage: Stage) -> tuple[str, float]:
    if stage is Stage.GRASP:
        key = next((k for k in GRASP_KEYS if k in metrics), "contact")
    elif stage is Stage.TRANSPORT:
        key = "approached" if "approached" in metrics else "contact"
    elif stage is Stage.PLACEMENT:
        key = "placed" if "placed" in metrics else "min_distance"
    else:
        key = "elapsed_s"
    return key, metrics.get(key, 0.0)


def template_summary(task: TaskInstance, frames: Sequence[int], metrics: Mapping[str, float], stage: Stage) -> str:
    if stage is Stage.NONE:
        return f"Completed '{task.instruction}' in {metrics.get('elapsed_s', 0.0):g}s."
    name, value = _violated_metric(metrics, stage)
    return f"{stage.value} failure: {name}={value:g}."


class Summarizer(Protocol):
    def summarize(self, task: TaskInstance, frames: Sequence, metrics: Mapping[str, float], stage: Stage) -> str: ...


class TemplateSummarizer:
    def summarize(self, task, frames, metrics, stage):
        return template_summary(task, frames, metrics, stage)


class HttpSummarizer:
    """VQA backend: POST {instruction, frames[], metrics} -> {summary}."""

    def __init__(self, url: str, client: httpx.Client | None = None):
        self.url = url
        self.client = client or httpx.Client(timeout=120.0)

    def summarize(self, task, frames, metrics, stage):
        body = {
            "instruction": task.instruction,
            "frames": [to_jsonable(f) for f in frames],
            "metrics": dict(metrics),
        }
        resp = self.client.post(self.url, json=body)
        resp.raise_for_status()
        return str(resp.json()["summary"])


def summarize(task: TaskInstance, frames: Sequence[int], metrics: Mapping[str, float], stage: Stage) -> str:
    return template_summary(task, frames, metrics, stage)


@dataclass
class Evaluator:
    manifest: ToolManifest = field(default_factory=ToolManifest)
    plan: FrameSamplePlan = field(default_factory=FrameSamplePlan)
    tools_enabled: bool = True
    summary_enabled: bool = True
    summarizer: Summarizer = field(default_factory=TemplateSummarizer)
    progress: Mapping[Stage, float] = field(default_factory=lambda: dict(DEFAULT_PROGRESS))

    def __call__(self, task: TaskInstance, trace: EpisodeTrace) -> EvaluationReport:
        return evaluate(
            task,
            trace,
            self.manifest.tools if self.tools_enabled else (),
            self.plan,
            timeout_s=self.manifest.timeout_for(task.task_id),
            summarizer=self.summarizer if self.summary_enabled else None,
            progress=self.progress,
        )


def evaluate(
    task: TaskInstance,
    trace: EpisodeTrace,
    registry: Sequence[ToolFn],
    plan: FrameSamplePlan = FrameSamplePlan(),
    *,
    timeout_s: float | None = None,
    summarizer: Summarizer | None = TemplateSummarizer(),
    progress: Mapping[Stage, float] = DEFAULT_PROGRESS,
) -> EvaluationReport:
    """Compress a trace into an :class:`EvaluationReport`.

    Passing ``registry=()`` gives the tools-disabled ablation (built-in
    metrics only); ``summarizer=None`` gives the summary-disabled one.
    """
    if not trace.frames:
        raise ValueError("trace has no frames")
    keyframes = [trace.frames[i] for i in plan.indices(len(trace.frames))]
    metrics = run_tools(trace, registry, task.task_id)
    stage, prog = classify_stage(metrics, trace.outcome, timeout_s=timeout_s, progress=progress)
    summary = summarizer.summarize(task, keyframes, metrics, stage) if summarizer is not None else ""
    return EvaluationReport(
        success=trace.outcome,
        elapsed_s=float(trace.elapsed_s),
        metrics=metrics,
        failure_stage=stage,
        progress=prog,
        summary=summary[:SUMMARY_LIMIT],
    )
