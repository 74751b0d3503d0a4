import json

import numpy as np
import pytest

from glance.exceptions import ConfigError, MissingArtifactError, ProviderError
from glance.graph import build_graph
from glance.llm import (
    TERMINATOR, CachedProvider, EmbeddingCache, FileCacheProvider, HttpProvider, MockProvider, cache_key,
    embed_bundles, embed_node, make_provider, mock_embed, serialize_prompts,
)

from .stub_server import StubServer, stub_vector

VOCAB = [["alpha", "apex"], ["beta", "bolt"], ["gamma", "gist"]]


def star_graph(n_leaves, text="leaf"):
    recs = [{"text": "center text", "label": 0, "feature": [0.0]}]
    recs += [{"text": f"{text} {i}", "label": i % 3, "feature": [0.0]} for i in range(n_leaves)]
    return build_graph(recs, [(0, i + 1) for i in range(n_leaves)], 3)


def test_isolated_node_prompts_have_ego_only():
    g = build_graph([{"text": "lonely", "label": 0, "feature": [0.0]}], [], 1)
    b = serialize_prompts(g, 0, ["a"])
    assert b.n_hop1 == b.n_hop2 == 0
    for p in b.prompts:
        assert p.endswith(TERMINATOR) and "EGO:\nlonely" in p and "\n- " not in p


def test_hop1_capped_at_five():
    b = serialize_prompts(star_graph(12), 0, ["a", "b", "c"], seed=1)
    assert b.hop1_prompt.count("\n- ") == 5 and b.n_hop1 == 5


def test_hop2_capped_at_twenty_five():
    g = star_graph(40)
    b = serialize_prompts(g, 1, ["a", "b", "c"], seed=2)
    assert b.n_hop1 == 1 and b.n_hop2 == 5
    assert b.n_hop2 <= 25


def test_prompts_byte_identical_for_same_seed():
    g = star_graph(12)
    assert serialize_prompts(g, 0, ["a", "b", "c"], seed=4) == serialize_prompts(g, 0, ["a", "b", "c"], seed=4)


def test_class_names_length_checked():
    with pytest.raises(ConfigError):
        serialize_prompts(star_graph(2), 0, ["only"])


def test_char_caps_respected():
    g = star_graph(5, text="x" * 3000)
    b = serialize_prompts(g, 0, ["a", "b", "c"])
    assert len(b.ego_prompt) <= 1024 and len(b.hop1_prompt) <= 4096
    assert b.hop1_prompt.endswith(TERMINATOR) and b.hop1_prompt.count("\n- ") == 5


def test_mock_embed_class_histogram_one_hot():
    v = mock_embed("gamma gist gamma", 16, vocab=VOCAB)
    assert v[:3].tolist() == [0.0, 0.0, 1.0]


def test_mock_embed_deterministic():
    assert np.array_equal(mock_embed("alpha beta", 16, 5, VOCAB), mock_embed("alpha beta", 16, 5, VOCAB))


def test_mock_embed_noise_token_changes_only_noise():
    a = mock_embed("alpha beta zzz", 16, vocab=VOCAB)
    b = mock_embed("alpha beta qqq", 16, vocab=VOCAB)
    # oracle: recount the class tokens directly
    np.testing.assert_array_equal(a[:3], [0.5, 0.5, 0.0])
    np.testing.assert_array_equal(a[:3], b[:3])
    assert not np.array_equal(a[3:], b[3:])


def test_mock_embed_dim_floor():
    with pytest.raises(ConfigError):
        mock_embed("x", 10, vocab=VOCAB)


def test_embed_node_segments_normalised():
    p = MockProvider(dim=16, vocab=VOCAB)
    z = embed_node(p, serialize_prompts(star_graph(3), 0, ["a", "b", "c"]))
    assert z.shape == (48,)
    for s in range(3):
        assert abs(np.linalg.norm(z[16 * s:16 * (s + 1)]) - 1) <= 1e-6


def test_zero_mode_blanks_empty_segments():
    g = build_graph([{"text": "lonely", "label": 0, "feature": [0.0]}], [], 1)
    z = embed_node(MockProvider(dim=16), serialize_prompts(g, 0, ["a"]), empty_segments="zero")
    assert np.linalg.norm(z[:16]) == pytest.approx(1.0) and not z[16:].any()


def test_provider_dim_mismatch_is_config_error():
    class Wrong:
        dim = 8

        def embed(self, prompts):
            return np.ones((len(prompts), 4))

    with pytest.raises(ConfigError):
        embed_node(Wrong(), serialize_prompts(star_graph(2), 0, ["a", "b", "c"]))


def test_provider_failure_is_retryable_with_hash():
    class Broken:
        dim = 8

        def embed(self, prompts):
            raise RuntimeError("boom")

    b = serialize_prompts(star_graph(2), 0, ["a", "b", "c"])
    with pytest.raises(ProviderError) as info:
        embed_node(Broken(), b)
    assert info.value.retryable and info.value.prompt_hash == cache_key(b.ego_prompt)


def test_cache_put_get_and_idempotence(tmp_path):
    c = EmbeddingCache(tmp_path / "c.jsonl")
    c.put("k1", [1.0, 2.0])
    c.put("k1", [1.0, 2.0])
    assert c.get("k1").tolist() == [1.0, 2.0]
    assert len((tmp_path / "c.jsonl").read_text().splitlines()) == 1
    assert EmbeddingCache(tmp_path / "c.jsonl").get("k1").tolist() == [1.0, 2.0]


def test_cache_skips_corrupt_line_with_position(tmp_path, caplog):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps({"k": "a", "d": 1, "v": [1.0]}) + "\n{broken\n"
                    + json.dumps({"k": "b", "d": 2, "v": [1.0]}) + "\n")
    c = EmbeddingCache(path)
    assert "a" in c and "b" not in c and len(c) == 1
    assert ":2:" in caplog.text and ":3:" in caplog.text


def test_warm_cache_makes_no_calls(tmp_path):
    inner = MockProvider(dim=16, vocab=VOCAB)
    cached = CachedProvider(inner, EmbeddingCache(tmp_path / "c.jsonl"))
    first = cached.embed(["alpha", "beta", "alpha"])
    assert inner.calls == 2
    again = CachedProvider(MockProvider(dim=16, vocab=VOCAB), EmbeddingCache(tmp_path / "c.jsonl"))
    np.testing.assert_array_equal(again.embed(["alpha", "beta"]), first[:2])
    assert again.calls == 0


def test_file_cache_provider(tmp_path):
    with pytest.raises(MissingArtifactError):
        FileCacheProvider(tmp_path / "none.jsonl", 2)
    c = EmbeddingCache(tmp_path / "c.jsonl")
    c.put(cache_key("hi"), [1.0, 0.0])
    p = FileCacheProvider(tmp_path / "c.jsonl", 2)
    assert p.embed(["hi"]).tolist() == [[1.0, 0.0]]
    with pytest.raises(ProviderError):
        p.embed(["other"])


def test_http_round_trip_in_order():
    with StubServer(dim=4, reverse=True) as srv:
        p = HttpProvider(srv.url, "m", 4)
        out = p.embed(["a", "b", "c"])
    np.testing.assert_array_equal(out, [stub_vector(t, 4) for t in "abc"])
    assert len(srv.requests) == 1 and srv.requests[0]["input"] == ["a", "b", "c"]
    assert srv.requests[0]["model"] == "m"


def test_http_429_then_success_retries_once():
    with StubServer(dim=4, fail_first=1) as srv:
        p = HttpProvider(srv.url, "m", 4, backoff=0.01)
        p.embed(["a"])
    assert p.retries == 1 and len(srv.requests) == 2


def test_http_gives_up_after_retries():
    with StubServer(dim=4, fail_first=10) as srv:
        p = HttpProvider(srv.url, "m", 4, max_retries=2, backoff=0.001)
        with pytest.raises(ProviderError) as info:
            p.embed(["a"])
    assert info.value.retryable and len(srv.requests) == 3


def test_http_count_mismatch():
    with StubServer(dim=4) as srv:
        p = HttpProvider(srv.url, "m", 4)
        p._parse({"data": [{"index": 0, "embedding": [0, 0, 0, 0]}]}, ["a"])
        with pytest.raises(ProviderError):
            p._parse({"data": []}, ["a"])


def test_http_bearer_token(monkeypatch):
    monkeypatch.setenv("GLANCE_API_KEY", "secret")
    with StubServer(dim=4) as srv:
        HttpProvider(srv.url, "m", 4).embed(["a"])
    assert srv.auth == ["Bearer secret"]


def test_http_batches_by_size():
    with StubServer(dim=4) as srv:
        HttpProvider(srv.url, "m", 4, batch_size=2, max_in_flight=2).embed(list("abcde"))
    assert sorted(len(r["input"]) for r in srv.requests) == [1, 2, 2]


def test_providers_are_substitutable(tmp_path):
    g = star_graph(3)
    bundles = [serialize_prompts(g, v, ["a", "b", "c"]) for v in range(4)]
    with StubServer(dim=16) as srv:
        providers = [MockProvider(dim=16), make_provider({"kind": "http", "endpoint": srv.url, "dim": 16})]
        shapes = {embed_bundles(p, bundles).shape for p in providers}
    assert shapes == {(4, 48)}
