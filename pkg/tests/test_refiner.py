import numpy as np
import pytest

from glance.nn import MLP
from glance.refiner import Refiner, refine_predict, refiner_loss_grad

from .oracles import close, fd_grad


def model(gd=3, ld=6, C=4, seed=0):
    rng = np.random.default_rng(seed)
    m = MLP.init([gd + ld, 8, C], rng)
    for layer in m.layers:
        layer.bias[:] = rng.standard_normal(layer.bias.shape) * 0.1
    return m


def data(n=7, gd=3, ld=6, C=4, seed=1):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, gd)), rng.standard_normal((n, ld)), rng.integers(0, C, n)


def test_zero_weights_give_uniform():
    m = model()
    for layer in m.layers:
        layer.weight[:] = 0
        layer.bias[:] = 0
    zg, zl, _ = data()
    np.testing.assert_allclose(refine_predict(m, zg, zl), 0.25)


def test_rows_are_distributions():
    zg, zl, _ = data()
    p = refine_predict(model(), zg, zl)
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-6)


def test_concatenation_order_is_gnn_first():
    m = model()
    zg, zl, _ = data()
    from glance.nn import mlp_forward, softmax
    out, _ = mlp_forward(m, np.hstack([zg, zl]))
    np.testing.assert_array_equal(refine_predict(m, zg, zl), softmax(out))


def test_dim_mismatch():
    zg, zl, _ = data()
    with pytest.raises(ValueError):
        refine_predict(model(), zg, zl[:, :4])


def test_gradient_matches_finite_differences():
    m = model()
    zg, zl, y = data()
    rng = np.random.default_rng(9)

    def loss():
        return float(refiner_loss_grad(m, zg, zl, y)[0].mean())

    _, grads = refiner_loss_grad(m, zg, zl, y)
    probes = 0
    for p, g in zip(m.params(), grads):
        for _ in range(6):
            idx = tuple(rng.integers(s) for s in p.shape)
            assert close(g[idx], fd_grad(loss, p, idx))
            probes += 1
    assert probes >= 20


def test_duplicate_node_doubles_summed_gradient():
    m = model()
    zg, zl, y = data(n=1)
    _, one = refiner_loss_grad(m, zg, zl, y, weight=1.0)
    _, two = refiner_loss_grad(m, np.vstack([zg, zg]), np.vstack([zl, zl]), np.r_[y, y], weight=1.0)
    for a, b in zip(one, two):
        # BLAS may fuse multiply-adds, so allow last-bit differences
        np.testing.assert_allclose(b, 2 * a, rtol=1e-14, atol=1e-300)


def test_zero_learning_rate_leaves_weights():
    zg, zl, y = data()
    r = Refiner(learning_rate=0.0, weight_decay=0.0).initialize(3, 6, 4)
    before = r.to_json()
    r.step(zg, zl, y)
    assert r.to_json() == before


def test_inputs_not_modified():
    zg, zl, y = data()
    copies = zg.copy(), zl.copy()
    Refiner().initialize(3, 6, 4).step(zg, zl, y)
    np.testing.assert_array_equal(zg, copies[0])
    np.testing.assert_array_equal(zl, copies[1])


def test_separable_fusion_task_learns():
    from glance.llm import mock_embed
    vocab = [["aa", "ab"], ["ba", "bb"], ["ca", "cb"], ["da", "db"]]
    rng = np.random.default_rng(0)
    y = rng.integers(0, 4, 200)
    zl = np.array([mock_embed(f"{vocab[c][i % 2]} noise{i}", 16, vocab=vocab) for i, c in enumerate(y)])
    zg = rng.standard_normal((200, 8))
    r = Refiner(learning_rate=1e-2).fit(zg, zl, y, steps=300, num_classes=4)
    assert r.loss_curve_[-1] < 0.1


def test_checkpoint_round_trip():
    zg, zl, y = data()
    r = Refiner().fit(zg, zl, y, steps=5, num_classes=4)
    s = Refiner.from_json(r.to_json())
    np.testing.assert_array_equal(s.predict_proba(zg, zl), r.predict_proba(zg, zl))
    assert '"refiner"' in r.to_json()
