from __future__ import annotations

import base64
import json
import threading
import time
from datetime import timedelta

import httpx
import numpy as np
import pytest

from auvsurvey import report as rp
from auvsurvey.cluster import ClusterModel
from auvsurvey.dataset import BBox
from auvsurvey.detect import Detection
from auvsurvey.geo import EPOCH, DetectionEvent, GeoPoint
from auvsurvey.report import LLMClient, LLMConfig, ReportCache, SummaryReport


def _event(with_location=True, name="shark"):
    loc = GeoPoint(25.5, 52.25, EPOCH + timedelta(seconds=3)) if with_location else None
    return DetectionEvent(Detection("img", 0, BBox(0.5, 0.5, 0.2, 0.2), 0.87), loc, "c1", class_name=name)


def _model(k):
    return ClusterModel(np.zeros((k, 2)), np.zeros(0, int), 0.0)


# --- prompts -----------------------------------------------------------------

def test_detection_prompt_with_location():
    p = rp.build_detection_prompt(_event())
    assert "latitude 25.50000, longitude 52.25000" in p
    assert "shark" in p and "0.87" in p and "sea environment" in p


def test_detection_prompt_without_location():
    p = rp.build_detection_prompt(_event(False))
    assert "latitude" not in p and "longitude" not in p


def test_detection_prompt_six_fields():
    p = rp.build_detection_prompt(_event()).lower()
    for f in ("summary", "shape", "size", "texture", "discernible patterns", "environment"):
        assert f in p
    assert len(rp.DETECTION_FIELDS) == 6


@pytest.mark.parametrize("event", [_event(), _event(False), _event(name="{k}")])
def test_detection_prompt_fully_rendered(event):
    p = rp.build_detection_prompt(event)
    leftover = rp.DETECTION_TEMPLATE.placeholders() & {s.strip("{}") for s in p.split() if s.startswith("{")}
    assert not leftover
    assert "{confidence}" not in p and "{location_clause}" not in p


def test_template_missing_value():
    with pytest.raises(rp.TemplateError):
        rp.DETECTION_TEMPLATE.render(class_name="x")


def test_cluster_prompt_sizes():
    stats = rp.cluster_stats([0, 0, 0, 1, 1, 1, 1], [f"c{i}" for i in range(7)])
    p = rp.build_cluster_prompt(_model(2), stats)
    assert "2 clusters" in p and "cluster 0: 3 crops" in p and "cluster 1: 4 crops" in p
    assert "{" not in p


def test_cluster_representatives_capped():
    labels = [0] * 12
    stats = rp.cluster_stats(labels, [f"c{i:02d}" for i in range(12)], distances=np.arange(12)[::-1], k=1)
    assert stats.representatives[0] == ["c11", "c10", "c09", "c08", "c07"]


@pytest.mark.parametrize("seed", range(10))
def test_cluster_prompt_budget(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 51))
    n = int(rng.integers(k, 3000))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    ids = [f"{rng.integers(1 << 62):016x}" for _ in range(n)]
    stats = rp.cluster_stats(labels, ids, rng.random(n), k)
    p = rp.build_cluster_prompt(_model(k), stats)
    assert len(p) <= rp.CLUSTER_PROMPT_BUDGET
    assert f"{k} clusters" in p
    for lab in range(k):
        assert f"cluster {lab}:" in p


# --- cache -------------------------------------------------------------------

def _report(text="hello"):
    return SummaryReport("c1", "detection_analysis", text, "m", "1970-01-01T00:00:00Z", {"total_tokens": 3}, "k")


def test_cache_empty(tmp_path):
    assert ReportCache(tmp_path).get("0" * 64) is None


def test_cache_round_trip(tmp_path):
    c = ReportCache(tmp_path)
    c.put("ab", _report("  spaced\ntext "))
    assert c.get("ab") == _report("  spaced\ntext ")
    assert c.keys() == ["ab"]


def test_cache_corrupt_entry_is_miss(tmp_path, caplog):
    c = ReportCache(tmp_path)
    c.path("bad").write_text("{not json")
    with caplog.at_level("WARNING"):
        assert c.get("bad") is None
    assert "corrupt" in caplog.text


def test_keys_distinct_over_many_prompts():
    rng = np.random.default_rng(0)
    keys = {rp.cache_key(f"prompt {rng.integers(1 << 62)} {i}", None, "m") for i in range(10_000)}
    assert len(keys) == 10_000
    assert all(len(k) == 64 and int(k, 16) >= 0 for k in list(keys)[:10])


def test_key_depends_on_all_parts():
    base = rp.cache_key("p", b"img", "m")
    assert len({base, rp.cache_key("p", b"img2", "m"), rp.cache_key("p", b"img", "m2"),
                rp.cache_key("p2", b"img", "m"), rp.cache_key("p", None, "m")}) == 5


# --- mock client -------------------------------------------------------------

def test_mock_deterministic(tmp_path):
    a = LLMClient(LLMConfig(mock=True)).summarize("describe this", subject_id="x")
    b = LLMClient(LLMConfig(mock=True)).summarize("describe this", subject_id="x")
    assert a == b and a.model_tag == "mock:gpt-4o-mini"
    assert a.created_at == rp.MOCK_CREATED_AT
    for f in rp.DETECTION_FIELDS:
        assert f.capitalize() in a.response_text


def test_mock_embeds_prompt_hash():
    a = rp.mock_response("one", "detection_analysis")
    b = rp.mock_response("two", "detection_analysis")
    assert a != b and a.startswith("[mock response ")


def test_mock_second_call_cached(tmp_path):
    client = LLMClient(LLMConfig(mock=True), ReportCache(tmp_path))
    first = client.summarize("p", b"png-bytes", "c1")
    second = client.summarize("p", b"png-bytes", "c1")
    assert first == second and client.cache_hits == 1 and client.network_calls == 0


# --- HTTP client -------------------------------------------------------------

def _ok(text="A fish.", usage=None):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}], "usage": usage or {"total_tokens": 9}})


def _client(handler, tmp_path=None, **cfg):
    sleeps = []
    config = LLMConfig(base_url="https://llm.example/v1", **cfg)
    client = LLMClient(config, ReportCache(tmp_path) if tmp_path else None,
                       http=httpx.Client(transport=httpx.MockTransport(handler)), sleep=sleeps.append)
    return client, sleeps


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "sk-test")


def test_request_shape(api_key):
    seen = {}

    def handler(req):
        seen["url"] = str(req.url)
        seen["auth"] = req.headers["authorization"]
        seen["body"] = json.loads(req.content)
        return _ok()

    client, _ = _client(handler)
    rep = client.summarize("describe", b"\x89PNG", "c1")
    assert rep.response_text == "A fish." and rep.token_usage == {"total_tokens": 9}
    assert seen["url"] == "https://llm.example/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    content = seen["body"]["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "describe"}
    url = content[1]["image_url"]["url"]
    assert base64.b64decode(url.split(",", 1)[1]) == b"\x89PNG"
    assert seen["body"]["model"] == "gpt-4o-mini"


def test_retry_then_success(api_key):
    replies = iter([httpx.Response(503), httpx.Response(429), _ok()])
    client, sleeps = _client(lambda req: next(replies))
    assert client.summarize("p").response_text == "A fish."
    assert client.network_calls == 3 and sleeps == [1.0, 2.0]


def test_transport_errors_exhaust(api_key):
    def handler(req):
        raise httpx.ConnectError("boom", request=req)

    client, sleeps = _client(handler)
    with pytest.raises(rp.TransportError):
        client.summarize("p")
    assert client.network_calls == 3 and sleeps == [1.0, 2.0]


@pytest.mark.parametrize("status", [401, 403])
def test_credential_rejected(api_key, status):
    client, _ = _client(lambda req: httpx.Response(status))
    with pytest.raises(rp.CredentialError):
        client.summarize("p")
    assert client.network_calls == 1


def test_missing_key_is_credential_error():
    client, _ = _client(lambda req: _ok())
    with pytest.raises(rp.CredentialError):
        client.summarize("p")
    assert client.network_calls == 0


@pytest.mark.parametrize("content", ["", "   "])
def test_empty_reply(api_key, content):
    client, _ = _client(lambda req: _ok(content))
    with pytest.raises(rp.ProtocolError):
        client.summarize("p")


def test_malformed_reply(api_key):
    client, _ = _client(lambda req: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(rp.ProtocolError):
        client.summarize("p")


def test_live_result_cached(api_key, tmp_path):
    client, _ = _client(lambda req: _ok(), tmp_path)
    client.summarize("p", None, "c1")
    client.summarize("p", None, "c1")
    assert client.network_calls == 1 and client.cache_hits == 1


def test_concurrency_bounded(api_key):
    state = {"now": 0, "peak": 0}
    lock = threading.Lock()

    def handler(req):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.02)
        with lock:
            state["now"] -= 1
        return _ok(json.loads(req.content)["messages"][0]["content"][0]["text"])

    client, _ = _client(handler, max_concurrent=2)
    jobs = [{"prompt": f"p{i}", "subject_id": str(i)} for i in range(10)]
    out = client.summarize_many(jobs)
    assert [r.response_text for r in out] == [f"p{i}" for i in range(10)]
    assert state["peak"] <= 2
