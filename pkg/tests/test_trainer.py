import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glance.exceptions import ArtifactHashError, ConfigError, MissingArtifactError, ProviderError
from glance.llm import CachedProvider, EmbeddingCache, MockProvider
from glance.refiner import refine_predict
from glance.router import schedule_k
from glance.trainer import (
    EmbeddingStore, GlanceClassifier, counterfactual_losses, expert_hash, load_bundle, records_objective, reward,
    save_bundle,
)


def make(world, provider=None, **kw):
    params = dict(max_epochs=3, seed=0)
    params.update(kw)
    return GlanceClassifier(world["gnn"], world["q"], provider or world["provider"](), **params)


@pytest.fixture(scope="module")
def fitted(small_world):
    return make(small_world).fit(small_world["graph"])


def step_setup(est, g):
    est = copy.deepcopy(est)
    F = est.routing_features(g)
    sig = est.expert_signals(g)
    store = EmbeddingStore(est.provider, g, est.sampler_seed_)
    batch = g.nodes_in("train")[:32]
    return est, F, sig, store, batch


def test_reward_examples():
    assert reward([True], [1.2], [0.4], 0.2)[0] == pytest.approx(0.6)
    assert reward([True], [0.9], [0.9], 0.0)[0] == 0.0
    assert reward([False], [0.7], [0.0], 0.1)[0] == -0.7


def test_negative_beta_rejected():
    with pytest.raises(ValueError):
        reward([True], [1.0], [1.0], -0.1)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 2))
def test_routed_reward_positive_iff_advantage_exceeds_cost(lg, ll, beta):
    r = reward([True], [lg], [ll], beta)[0]
    assert (r > 0) == (lg - ll > beta) or math.isclose(lg - ll, beta, abs_tol=1e-12)


def test_counterfactual_losses():
    p_H = np.array([[1.0, 0.0, 0.0]])
    p_C = np.full((1, 3), 1 / 3)
    lg, ll = counterfactual_losses(p_H, p_C, [0])
    assert lg[0] == 0.0 and ll[0] == pytest.approx(math.log(3))
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(4), 10)
    y = rng.integers(0, 4, 10)
    lg, _ = counterfactual_losses(P, P, y)
    for i in range(10):
        assert lg[i] == -math.log(P[i][y[i]])


def test_identical_experts_zero_beta_zero_reward():
    lg = np.array([0.3, 1.1, 2.0])
    assert np.all(reward([True] * 3, lg, lg.copy(), 0.0) == 0.0)


def test_setup_validation(small_world):
    g = small_world["graph"]
    with pytest.raises(ConfigError):
        GlanceClassifier(None, small_world["q"], MockProvider(16)).fit(g)
    with pytest.raises(ConfigError):
        make(small_world, beta=-1).fit(g)
    with pytest.raises(ConfigError):
        make(small_world, k_start=64).fit(g)
    with pytest.raises(ConfigError):
        make(small_world, router_loss="other").fit(g)


def test_zero_budget_leaves_refiner_and_uses_unrouted_branch(fitted, small_world):
    g = small_world["graph"]
    est, F, sig, store, batch = step_setup(fitted, g)
    before, calls = est.refiner_.to_json(), est.provider.calls
    res = est.batch_step(batch, F, sig, g.labels, 0, store)
    assert est.refiner_.to_json() == before and len(res.routed) == 0
    assert all(not r.routed and r.loss_llm is None and r.reward == -r.loss_gnn for r in res.records)
    assert est.provider.calls == calls


def test_full_budget_routes_every_node(fitted, small_world):
    g = small_world["graph"]
    est, F, sig, store, batch = step_setup(fitted, g)
    res = est.batch_step(batch, F, sig, g.labels, len(batch), store)
    assert all(r.routed and r.loss_llm is not None for r in res.records)


@pytest.mark.parametrize("mode", ["as_written", "action"])
@pytest.mark.parametrize("K", [0, 5, 32])
def test_objective_recomputes_from_records(fitted, small_world, mode, K):
    g = small_world["graph"]
    est, F, sig, store, batch = step_setup(fitted, g)
    est.router_loss = mode
    res = est.batch_step(batch, F, sig, g.labels, K, store)
    assert abs(records_objective(res.records, est.lambda_router, est.lambda_ent, mode) - res.objective) <= 1e-6


def test_records_match_straight_line_losses(fitted, small_world):
    g = small_world["graph"]
    est, F, sig, store, batch = step_setup(fitted, g)
    p_H = sig.p_H[batch]
    p_C = refine_predict(est.refiner_.model_, sig.z_G[batch], store.get(batch))
    res = est.batch_step(batch, F, sig, g.labels, 7, store)
    for i, r in enumerate(res.records):
        assert r.loss_gnn == pytest.approx(-math.log(p_H[i][g.labels[r.node]]), rel=1e-12)
        if r.routed:
            assert r.loss_llm == pytest.approx(-math.log(p_C[i][g.labels[r.node]]), rel=1e-12)
            assert r.reward == pytest.approx(r.loss_gnn - r.loss_llm - est.beta, rel=1e-12)


def test_retryable_provider_failure_retried_once(fitted, small_world):
    g = small_world["graph"]
    est, F, sig, _, batch = step_setup(fitted, g)

    class Flaky(MockProvider):
        fails = 1

        def embed(self, prompts):
            if self.fails:
                self.fails -= 1
                raise ProviderError("transient", "h")
            return super().embed(prompts)

    flaky = Flaky(dim=16, seed=3, vocab=small_world["vocab"])
    res = est.batch_step(batch, F, sig, g.labels, 4, EmbeddingStore(flaky, g, est.sampler_seed_))
    assert len(res.routed) == 4
    flaky.fails = 2
    with pytest.raises(ProviderError):
        est.batch_step(batch, F, sig, g.labels, 4, EmbeddingStore(flaky, g, est.sampler_seed_ + 1))


def test_every_batch_routes_min_k_and_batch(fitted, small_world):
    n_train = len(small_world["graph"].nodes_in("train"))
    sizes = [min(32, n_train - s) for s in range(0, n_train, 32)]
    for ep in fitted.report_["epochs"]:
        assert ep["routed_per_batch"] == [min(ep["k"], b) for b in sizes]
        assert ep["k"] == schedule_k(fitted.schedule, ep["epoch"])


def test_training_is_deterministic(fitted, small_world):
    again = make(small_world).fit(small_world["graph"])
    assert [e["val_accuracy"] for e in again.report_["epochs"]] == [e["val_accuracy"] for e in fitted.report_["epochs"]]
    assert again.policy_.to_json() == fitted.policy_.to_json()


def test_experts_hash_identical_after_fit(fitted, small_world):
    assert fitted.report_["expert_hashes"] == {"gnn": expert_hash(small_world["gnn"]),
                                               "q": expert_hash(small_world["q"])}


def test_call_count_bound_and_warm_cache(small_world, tmp_path):
    g = small_world["graph"]
    cache_path = tmp_path / "c.jsonl"
    cold = CachedProvider(small_world["provider"](), EmbeddingCache(cache_path))
    est = make(small_world, provider=cold).fit(g)
    n_train, n_val = len(g.nodes_in("train")), len(g.nodes_in("val"))
    bound = 0
    for ep in est.report_["epochs"]:
        bound += 3 * (sum(min(ep["k"], b) for b in [32] * (n_train // 32) + [n_train % 32]))
        bound += 3 * sum(min(est.k_test, b) for b in [32] * (n_val // 32) + [n_val % 32])
    assert 0 < est.report_["provider_calls"] <= bound
    warm = CachedProvider(small_world["provider"](), EmbeddingCache(cache_path))
    est2 = make(small_world, provider=warm).fit(g)
    assert est2.report_["provider_calls"] == 0 < est.report_["provider_calls"]
    assert est2.policy_.to_json() == est.policy_.to_json()


def test_zero_test_budget_equals_gnn(fitted, small_world):
    g = small_world["graph"]
    trace = fitted.route(g, k_test=0)
    gnn = small_world["gnn"].predict(g)[trace.nodes]
    assert np.array_equal(trace.predictions, gnn) and not trace.routed.any()
    assert trace.provider_calls == 0


def test_partial_final_batch(fitted, small_world):
    g = small_world["graph"]
    nodes = np.sort(g.nodes_in("test"))[:40]
    trace = fitted.route(g, nodes, k_test=12)
    assert [len(b) for b in trace.batches] == [12, 8]


def test_trace_replay_reproduces_labels(fitted, small_world):
    g = small_world["graph"]
    trace = fitted.route(g)
    sig = fitted.expert_signals(g)
    store = EmbeddingStore(small_world["provider"](), g, fitted.sampler_seed_)
    ids = trace.nodes[trace.routed]
    replay = refine_predict(fitted.refiner_.model_, sig.z_G[ids], store.get(ids)).argmax(axis=1)
    np.testing.assert_array_equal(trace.predictions[trace.routed], replay)
    np.testing.assert_array_equal(trace.predictions[~trace.routed], trace.gnn_predictions[~trace.routed])
    flat = sorted(v for b in trace.batches for v in b)
    assert flat == sorted(ids.tolist())


def test_bundle_round_trip_and_hash_check(fitted, small_world, tmp_path):
    g = small_world["graph"]
    (tmp_path / "gnn.json").write_text(small_world["gnn"].to_json())
    (tmp_path / "q.json").write_text(small_world["q"].to_json())
    paths = {"gnn": tmp_path / "gnn.json", "q": tmp_path / "q.json"}
    save_bundle(fitted, tmp_path / "b", paths, {"kind": "mock"})
    back = load_bundle(tmp_path / "b", small_world["provider"]())
    np.testing.assert_array_equal(back.predict(g), fitted.predict(g))
    assert back.hyperparams() == fitted.hyperparams()

    router = tmp_path / "b" / "router.json"
    doc = json.loads(router.read_text())
    doc["b"] += 1.0
    router.write_text(json.dumps(doc))
    with pytest.raises(ArtifactHashError):
        load_bundle(tmp_path / "b", small_world["provider"]())
    (tmp_path / "b" / "refiner.json").unlink()
    with pytest.raises((MissingArtifactError, ArtifactHashError)):
        load_bundle(tmp_path / "b", small_world["provider"]())


def test_bundle_rejects_wrong_provider_dim(fitted, small_world, tmp_path):
    (tmp_path / "gnn.json").write_text(small_world["gnn"].to_json())
    (tmp_path / "q.json").write_text(small_world["q"].to_json())
    save_bundle(fitted, tmp_path / "b", {"gnn": tmp_path / "gnn.json", "q": tmp_path / "q.json"})
    with pytest.raises(ConfigError):
        load_bundle(tmp_path / "b", MockProvider(dim=24, vocab=small_world["vocab"]))


def test_ablated_router_has_smaller_layout(small_world):
    est = make(small_world, ablate=("no-degree",), max_epochs=1).fit(small_world["graph"])
    assert "degree" not in est.layout_.names
