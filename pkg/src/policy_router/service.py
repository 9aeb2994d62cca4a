"""HTTP JSON service over an :class:`Engine`.

Endpoints: POST /route, POST /feedback, POST /policies, GET /jobs/{id},
GET /context, GET /records. Blocking engine calls run in the server's
thread pool, so requests proceed concurrently; writes are serialized
inside the engine.
"""

from __future__ import annotations

import itertools
import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

import httpx
from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse

from .core import (
    EpisodeTrace,
    PolicyDescriptor,
    SceneFeatures,
    SerializationError,
    TaskInstance,
    TaskRepresentation,
    from_jsonable,
    to_jsonable,
    validate_scene,
)
from .embedding import DegenerateInputError
from .engine import Engine, QueueFull, UnknownDecisionError, UnknownPolicyError
from .onboarding import DuplicatePolicyError, UnknownTaskError
from .router import EmptyPoolError

log = logging.getLogger(__name__)

RETRY_AFTER_S = 1
MAX_RECORDS_K = 1000


class HttpExecutor:
    """Runs a trial on a remote policy: POST {task, trial} to the policy's
    endpoint, which answers with an EpisodeTrace."""

    def __init__(self, endpoints: Callable[[str], str], client: httpx.Client | None = None):
        self.endpoints = endpoints
        self.client = client or httpx.Client(timeout=600.0)

    def __call__(self, policy_id: str, task: TaskInstance, trial: int) -> EpisodeTrace:
        endpoint = self.endpoints(policy_id)
        if not endpoint:
            raise ValueError(f"policy {policy_id!r} has no endpoint to execute trials on")
        resp = self.client.post(endpoint, json={"task": to_jsonable(task), "trial": trial})
        resp.raise_for_status()
        return from_jsonable(EpisodeTrace, resp.json())


@dataclass
class Job:
    job_id: str
    kind: str
    status: str = "pending"
    result: dict[str, Any] = field(default_factory=dict)
    error: str = ""


class JobRunner:
    def __init__(self):
        self.jobs: dict[str, Job] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def start(self, kind: str, fn: Callable[[], dict[str, Any]]) -> Job:
        with self._lock:
            job = Job(f"job-{next(self._ids):06d}", kind)
            self.jobs[job.job_id] = job

        def run():
            job.status = "running"
            try:
                job.result = fn()
                job.status = "done"
            except Exception as exc:
                log.exception("job %s failed", job.job_id)
                job.error = f"{type(exc).__name__}: {exc}"
                job.status = "failed"

        threading.Thread(target=run, name=job.job_id, daemon=True).start()
        return job

    def get(self, job_id: str) -> Job | None:
        return self.jobs.get(job_id)


def _error(status: int, message: str, headers: dict[str, str] | None = None) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=status, headers=headers)


async def _json_body(request: Request) -> dict[str, Any]:
    try:
        body = json.loads(await request.body())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"body is not valid JSON: {exc}") from None
    if not isinstance(body, dict):
        raise ValueError("body must be a JSON object")
    return body


def _task_from(body: dict[str, Any]) -> TaskInstance:
    if "instruction" not in body or "scene" not in body:
        raise ValueError("body needs 'instruction' and 'scene'")
    if not isinstance(body["instruction"], str):
        raise ValueError("'instruction' must be a string")
    scene = from_jsonable(SceneFeatures, body["scene"], "$.scene")
    problems = validate_scene(scene)
    if problems:
        raise ValueError("; ".join(problems))
    return TaskInstance(
        task_id=str(body.get("task_id", "")),
        instruction=body["instruction"],
        scene=scene,
        timestamp=int(body.get("timestamp", 0)),
    )


def create_app(
    engine: Engine,
    *,
    executor: Callable[[str, TaskInstance, int], EpisodeTrace] | None = None,
    onboarding_hooks: Any = None,
) -> FastAPI:
    """Build the app. ``onboarding_hooks`` (a simulator hook object with
    ``execute``/``instance_for``/``episode_for``/``seen_tasks``) takes
    precedence over ``executor`` for onboarding jobs."""
    app = FastAPI(title="policy-router")
    jobs = JobRunner()
    app.state.engine = engine
    app.state.jobs = jobs

    @app.post("/route")
    async def route_endpoint(request: Request):
        try:
            task = _task_from(await _json_body(request))
        except (ValueError, SerializationError) as exc:
            return _error(400, str(exc))
        try:
            decision = await _in_thread(engine.route, task)
        except EmptyPoolError as exc:
            return _error(409, str(exc))
        except DegenerateInputError as exc:
            return _error(400, str(exc))
        return to_jsonable(decision)

    @app.post("/feedback")
    async def feedback_endpoint(request: Request):
        try:
            body = await _json_body(request)
            policy_id = body["policy_id"]
            trace = from_jsonable(EpisodeTrace, body["trace"], "$.trace")
            kwargs: dict[str, Any] = {}
            if body.get("decision_id"):
                kwargs["decision_id"] = body["decision_id"]
            else:
                kwargs["task"] = _task_from(body.get("task") or {})
                if body.get("representation") is not None:
                    kwargs["rep"] = from_jsonable(TaskRepresentation, body["representation"], "$.representation")
            if "episode" in body:
                kwargs["episode"] = dict(body["episode"])
        except KeyError as exc:
            return _error(400, f"missing field {exc.args[0]!r}")
        except (ValueError, TypeError, SerializationError) as exc:
            return _error(400, str(exc))
        try:
            record = await _in_thread(lambda: engine.submit_feedback(policy_id, trace, **kwargs))
        except UnknownPolicyError:
            return _error(404, f"unknown policy {policy_id!r}")
        except UnknownDecisionError:
            return _error(404, f"unknown decision {body['decision_id']!r}")
        except QueueFull:
            return _error(503, "feedback queue is full", {"Retry-After": str(RETRY_AFTER_S)})
        if record is None:
            return JSONResponse({"accepted": True, "queued": True}, status_code=202)
        return {"accepted": True, "queued": False, "record_id": record.record_id}

    @app.post("/policies")
    async def onboard_endpoint(request: Request):
        try:
            body = await _json_body(request)
            if "policy" not in body:
                raise ValueError("body needs 'policy'")
            policy = from_jsonable(PolicyDescriptor, body["policy"], "$.policy")
            n_trials = int(body.get("n_trials", 10))
            k = body.get("k")
        except (ValueError, TypeError, SerializationError) as exc:
            return _error(400, str(exc))
        if any(p.policy_id == policy.policy_id for p in engine.pool):
            return _error(409, f"policy {policy.policy_id!r} already registered")

        def work():
            if onboarding_hooks is not None:
                plan, _ = engine.onboard(
                    policy,
                    onboarding_hooks.execute,
                    seen_tasks=onboarding_hooks.seen_tasks(),
                    instance_for=onboarding_hooks.instance_for,
                    episode_for=onboarding_hooks.episode_for,
                    k=k,
                    n_trials=min(n_trials, onboarding_hooks.n_trials),
                )
            else:
                run = executor or HttpExecutor(lambda pid: policy.endpoint)
                plan, _ = engine.onboard(policy, run, k=k, n_trials=n_trials)
            return {"policy_id": policy.policy_id, "episodes": plan.episodes, "pool_size": len(engine.pool)}

        job = jobs.start("onboard", work)
        return JSONResponse({"job_id": job.job_id, "status": job.status}, status_code=202)

    @app.get("/jobs/{job_id}")
    def job_endpoint(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            return _error(404, f"unknown job {job_id!r}")
        return {"job_id": job.job_id, "kind": job.kind, "status": job.status, "result": job.result, "error": job.error}

    @app.get("/context")
    def context_endpoint():
        return to_jsonable(engine.context.current)

    @app.get("/records")
    def records_endpoint(query: str | None = None, k: int = 10):
        if not 1 <= k <= MAX_RECORDS_K:
            return _error(400, f"k must lie in [1, {MAX_RECORDS_K}]")
        if query is None:
            return {"count": engine.store.count()}
        try:
            q = json.loads(query)
            if "vector" in q:
                rep = from_jsonable(TaskRepresentation, q, "$.query")
            else:
                rep = engine.embed(_task_from(q))
            hits = engine.store.top_k(rep, k)
        except (ValueError, TypeError, SerializationError) as exc:
            return _error(400, str(exc))
        return {"hits": [{"record": to_jsonable(h.record), "similarity": h.similarity} for h in hits]}

    @app.exception_handler(UnknownTaskError)
    async def _unknown_task(request, exc):
        return _error(404, f"unknown task {exc.args[0]!r}")

    @app.exception_handler(DuplicatePolicyError)
    async def _dup_policy(request, exc):
        return _error(409, f"policy {exc.args[0]!r} already registered")

    return app


async def _in_thread(fn, *args):
    return await run_in_threadpool(fn, *args)


def serve(engine: Engine, host: str = "127.0.0.1", port: int | None = None, **kwargs) -> None:
    import uvicorn

    uvicorn.run(create_app(engine, **kwargs), host=host, port=port or engine.config.port)
