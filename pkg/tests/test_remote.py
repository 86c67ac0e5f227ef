import json

import numpy as np
import pytest

from glyrag import remote
from glyrag.context import WindowSummaryFeatures
from mockserver import MockService

F = WindowSummaryFeatures(0.0, 0.0, 0.0, 0.0, 0.0, 120.0, 100.0, "stable")
X = np.full(36, 120.0)


def cfg(service, tmp_path, **kw):
    return remote.EndpointConfig(url=service.url + "/chat", embed_url=service.url + "/embed",
                                 cache_dir=tmp_path / "cache", backoff=0.01, **kw)


def test_echo_and_request_shape(tmp_path):
    with MockService() as svc:
        out = remote.summarize_remote(F, X, cfg(svc, tmp_path), "p@0")
        assert out.text == "TEST SUMMARY." and out.backend == "remote"
        body = svc.bodies[0]
        assert [m["role"] for m in body["messages"]] == ["system", "user"]
        assert "model" in body


def test_warm_cache_skips_network(tmp_path):
    with MockService() as svc:
        c = cfg(svc, tmp_path)
        first = remote.summarize_remote(F, X, c)
        second = remote.summarize_remote(F, X, c)
        assert svc.hits == 1 and first.text == second.text
    files = list((tmp_path / "cache").glob("*.json"))
    assert len(files) == 1
    entry = json.loads(files[0].read_text())
    assert set(entry) == {"prompt_hash", "backend", "text"}
    assert files[0].stem == entry["prompt_hash"][:32]


def test_http_500_falls_back_to_rule_based(tmp_path):
    with MockService(fail_times=3) as svc:
        out = remote.summarize_remote(F, X, cfg(svc, tmp_path))
        assert svc.hits == 3 and out.backend == "rule_based"


def test_retry_then_success(tmp_path):
    with MockService(fail_times=2) as svc:
        out = remote.summarize_remote(F, X, cfg(svc, tmp_path))
        assert svc.hits == 3 and out.backend == "remote"


def test_fail_hard(tmp_path):
    with MockService(fail_times=3) as svc:
        with pytest.raises(remote.RemoteError):
            remote.summarize_remote(F, X, cfg(svc, tmp_path, fail_hard=True))


def test_unreachable_endpoint_falls_back(tmp_path):
    c = remote.EndpointConfig(url="http://127.0.0.1:9/chat", cache_dir=tmp_path, backoff=0.0, timeout=0.5)
    assert remote.summarize_remote(F, X, c).backend == "rule_based"


def test_bounded_parallel_preserves_order(tmp_path):
    with MockService() as svc:
        items = [(F, X + i, f"w{i}") for i in range(6)]
        out = remote.summarize_many(items, cfg(svc, tmp_path, parallel=3))
        assert [s.window_ref for s in out] == [f"w{i}" for i in range(6)]
        assert svc.hits == 6


def test_remote_embedding_and_cache(tmp_path):
    vec = list(np.linspace(-1, 1, 768))
    with MockService(embedding=vec) as svc:
        c = cfg(svc, tmp_path)
        a = remote.embed_remote("glucose rising", c)
        b = remote.embed_remote("glucose rising", c)
        assert svc.hits == 1 and np.array_equal(a, b) and np.allclose(a, vec)
        assert svc.bodies[0] == {"input": "glucose rising"}


def test_bad_embedding_width(tmp_path):
    with MockService(embedding=[1.0, 2.0]) as svc:
        with pytest.raises(remote.RemoteError):
            remote.embed_remote("x", cfg(svc, tmp_path))
