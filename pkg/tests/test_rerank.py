from __future__ import annotations

import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import record, rep
from policy_router.rerank import (
    HttpReranker,
    ReferenceReranker,
    RerankScore,
    jaccard,
    rerank,
    score_candidates,
)
from policy_router.store import RetrievalHit


def _hit(rid, sim, objects=()):
    return RetrievalHit(record(rid, rep([1.0, 0.0], objects)), sim)


def _query(objects=()):
    return rep([1.0, 0.0], objects)


class FixedScorer:
    def __init__(self, scores):
        self.scores = scores

    def score(self, query, hits):
        return [RerankScore(h.record.record_id, s) for h, s in zip(hits, self.scores)]


def test_score_examples():
    q = _query({"hammer", "block"})
    [s] = score_candidates(q, [_hit("r", 0.6, {"hammer"})])
    assert s.score == pytest.approx(0.85)
    [s] = score_candidates(q, [_hit("r", 1.0, {"hammer", "block"})])
    assert s.score == 1.0
    [s] = score_candidates(q, [_hit("r", -1.0, {"cup"})])
    assert s.score == 0.0


def test_score_requires_candidates():
    with pytest.raises(ValueError):
        score_candidates(_query(), [])


def test_jaccard():
    assert jaccard(set(), set()) == 0.0
    assert jaccard({"a", "b"}, {"b", "c"}) == pytest.approx(1 / 3)


def test_rerank_examples():
    hits = [_hit("first", 0.0), _hit("second", 0.0), _hit("third", 0.0)]
    out = rerank(_query(), hits, FixedScorer([0.3, 0.9, 0.5]))
    assert [h.record.record_id for h, _ in out] == ["second", "third", "first"]
    out = rerank(_query(), hits, FixedScorer([0.4, 0.4, 0.4]))
    assert [h.record.record_id for h, _ in out] == ["first", "second", "third"]
    assert [h.record.record_id for h, _ in rerank(_query(), hits[:1])] == ["first"]
    assert rerank(_query(), []) == []


object_sets = st.frozensets(st.sampled_from(["a", "b", "c", "d"]), max_size=4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), object_sets), min_size=1, max_size=12), object_sets)
def test_rerank_is_a_deterministic_permutation(cands, qobjs):
    hits = [_hit(f"r{i}", s, o) for i, (s, o) in enumerate(cands)]
    q = _query(qobjs)
    out = rerank(q, hits)
    assert sorted(h.record.record_id for h, _ in out) == sorted(h.record.record_id for h in hits)
    assert [h.record.record_id for h, _ in out] == [h.record.record_id for h, _ in rerank(q, hits)]
    scores = [s.score for _, s in out]
    assert scores == sorted(scores, reverse=True)
    assert all(0.0 <= s <= 1.0 for s in scores)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), object_sets), min_size=2, max_size=10), st.data())
def test_rerank_order_independent_of_input_order_up_to_ties(cands, data):
    hits = [_hit(f"r{i}", s, o) for i, (s, o) in enumerate(cands)]
    q = _query({"a", "b"})
    perm = data.draw(st.permutations(hits))
    a = [(s.score, h.record.record_id) for h, s in rerank(q, hits)]
    b = [(s.score, h.record.record_id) for h, s in rerank(q, perm)]
    # identical once each tie group is put in a canonical order
    assert sorted(a, key=lambda t: (-t[0], t[1])) == sorted(b, key=lambda t: (-t[0], t[1]))
    assert [s for s, _ in a] == [s for s, _ in b]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), object_sets), min_size=2, max_size=8), st.integers(0, 7))
def test_more_overlap_never_lowers_rank(cands, pick):
    i = pick % len(cands)
    q = _query({"a", "b", "c"})
    low = [_hit(f"r{j}", s, o) for j, (s, o) in enumerate(cands)]
    high = list(low)
    high[i] = _hit(f"r{i}", cands[i][0], {"a", "b", "c"})  # Jaccard 1
    assert jaccard(q.metadata.involved_objects, high[i].record.representation.metadata.involved_objects) >= jaccard(
        q.metadata.involved_objects, low[i].record.representation.metadata.involved_objects
    )
    rank = lambda out: [h.record.record_id for h, _ in out].index(f"r{i}")
    assert rank(rerank(q, high)) <= rank(rerank(q, low))


def test_http_reranker_single_batch_call():
    calls = []

    def handler(request):
        body = json.loads(request.content)
        calls.append(len(body["candidates"]))
        return httpx.Response(200, json={"scores": [0.2, 0.7]})

    scorer = HttpReranker("http://rr", httpx.Client(transport=httpx.MockTransport(handler)))
    out = rerank(_query(), [_hit("x", 0.1), _hit("y", 0.2)], scorer)
    assert calls == [2]
    assert [h.record.record_id for h, _ in out] == ["y", "x"]


def test_http_reranker_rejects_wrong_count():
    handler = lambda request: httpx.Response(200, json={"scores": [0.2]})
    scorer = HttpReranker("http://rr", httpx.Client(transport=httpx.MockTransport(handler)))
    with pytest.raises(ValueError):
        scorer.score(_query(), [_hit("x", 0.1), _hit("y", 0.2)])


def test_reference_reranker_beta_is_configurable():
    q = _query({"a"})
    [s] = ReferenceReranker(beta=0.0).score(q, [_hit("r", 0.0, {"a"})])
    assert s.score == 0.5
    assert np.isclose(ReferenceReranker().score(q, [_hit("r", 0.0, {"a"})])[0].score, 0.6)
