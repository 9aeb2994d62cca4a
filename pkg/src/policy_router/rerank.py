"""Single-pass reranking of retrieved records.

The reference scorer blends normalized cosine similarity with the Jaccard
overlap of involved objects. Remote scorers receive the whole candidate
batch in one request, mirroring yes/no-probability scoring by a VLM.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx

from .core import TaskRepresentation, to_jsonable
from .store import RetrievalHit

DEFAULT_BETA = 0.1


@dataclass(frozen=True)
class RerankScore:
    record_id: str
    score: float


def jaccard(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def score_candidates(
    query: TaskRepresentation, hits: Sequence[RetrievalHit], beta: float = DEFAULT_BETA
) -> list[RerankScore]:
    if not hits:
        raise ValueError("no candidates to score")
    q_objects = query.metadata.involved_objects
    out = []
    for hit in hits:
        sim_norm = (hit.similarity + 1.0) / 2.0
        overlap = jaccard(q_objects, hit.record.representation.metadata.involved_objects)
        out.append(RerankScore(hit.record.record_id, min(1.0, max(0.0, sim_norm + beta * overlap))))
    return out


def order_by_scores(
    hits: Sequence[RetrievalHit], scores: Sequence[RerankScore]
) -> list[tuple[RetrievalHit, RerankScore]]:
    # sorted() is stable, so equal scores keep retrieval order.
    return sorted(zip(hits, scores), key=lambda pair: -pair[1].score)


class Reranker(Protocol):
    def score(self, query: TaskRepresentation, hits: Sequence[RetrievalHit]) -> list[RerankScore]: ...


class ReferenceReranker:
    def __init__(self, beta: float = DEFAULT_BETA):
        self.beta = beta

    def score(self, query, hits):
        return score_candidates(query, hits, self.beta)


class HttpReranker:
    """POST {query, candidates[]} -> {scores[]}, one request per batch."""

    def __init__(self, url: str, client: httpx.Client | None = None):
        self.url = url
        self.client = client or httpx.Client(timeout=60.0)

    def score(self, query, hits):
        if not hits:
            raise ValueError("no candidates to score")
        body = {
            "query": to_jsonable(query),
            "candidates": [
                {"record": to_jsonable(h.record), "similarity": h.similarity} for h in hits
            ],
        }
        resp = self.client.post(self.url, json=body)
        resp.raise_for_status()
        scores = resp.json()["scores"]
        if len(scores) != len(hits):
            raise ValueError(f"reranker returned {len(scores)} scores for {len(hits)} candidates")
        return [RerankScore(h.record.record_id, float(s)) for h, s in zip(hits, scores)]


def rerank(
    query: TaskRepresentation,
    hits: Sequence[RetrievalHit],
    scorer: Reranker | None = None,
) -> list[tuple[RetrievalHit, RerankScore]]:
    """Hits reordered by score descending, ties in retrieval order."""
    if not hits:
        return []
    scorer = scorer or ReferenceReranker()
    return order_by_scores(hits, scorer.score(query, hits))
