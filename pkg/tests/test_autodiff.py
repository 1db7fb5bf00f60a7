import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midaslab import autodiff as ad
from midaslab.autodiff import Graph

from gradcheck import central_diff, max_rel_error


def check_gradients(build, arrays, seed=0, eps=1e-5):
    """Compare reverse-mode gradients of sum(W * build(...)) against central differences."""
    rng = np.random.default_rng(seed)
    g = Graph()
    ts = [g.tensor(a, requires_grad=True) for a in arrays]
    out = build(*ts)
    weights = rng.normal(size=out.shape)
    loss = ad.reduce_sum(ad.mul(out, weights))
    g.backward(loss)
    errors = []
    for k, t in enumerate(ts):

        def f(x, k=k):
            g2 = Graph()
            args = [g2.tensor(x if j == k else a) for j, a in enumerate(arrays)]
            return float(np.sum(build(*args).values * weights))

        errors.append(max_rel_error(t.grad, central_diff(f, arrays[k], eps)))
    return max(errors)


def _ln(x, gamma, beta):
    return ad.layer_norm(x, gamma, beta)


OPS = {
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    "add_bias": (lambda a, b: a + b, [(3, 4), (4,)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: ad.scale(a, -2.5), [(2, 3)]),
    "transpose": (lambda a: ad.transpose(a), [(2, 3, 4)]),
    "softmax_rows": (lambda a: ad.softmax_rows(a, 0.7), [(2, 3)]),
    "concat_rows": (lambda a, b: ad.concat_rows([a, b]), [(2, 3), (1, 3)]),
    "concat_cols": (lambda a, b: ad.concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    "slice": (lambda a: a[:, 1:3], [(3, 4)]),
    "reduce_sum": (lambda a: ad.reduce_sum(a, axis=0), [(3, 4)]),
    "reduce_mean": (lambda a: ad.reduce_mean(a, axis=-1, keepdims=True), [(3, 4)]),
    "relu": (lambda a: ad.relu(a), [(4, 5)]),
    "gelu": (lambda a: ad.gelu(a), [(4, 5)]),
    "layer_norm": (_ln, [(3, 5), (5,), (5,)]),
    "embedding": (lambda t: ad.embedding_lookup(t, np.array([[0, 2, 2], [1, 0, 3]])), [(4, 3)]),
    "cross_entropy": (lambda z: ad.cross_entropy_with_logits(z, np.array([0, 1, 1, 0])), [(4, 2)]),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(3))
def test_op_gradients_match_finite_differences(name, seed):
    build, shapes = OPS[name]
    rng = np.random.default_rng(100 + seed)
    arrays = [rng.normal(size=s) for s in shapes]
    assert check_gradients(build, arrays, seed=seed) < 1e-5


@settings(max_examples=20, deadline=None)
@given(
    n=st.integers(1, 4),
    k=st.integers(1, 4),
    m=st.integers(1, 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_matmul_softmax_chain_random_shapes(n, k, m, seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=(n, k)), rng.normal(size=(k, m))]
    err = check_gradients(lambda a, b: ad.softmax_rows(a @ b), arrays, seed=seed)
    assert err < 1e-5


def test_matmul_identity():
    g = Graph()
    b = g.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = g.tensor(np.eye(2)) @ b
    np.testing.assert_array_equal(out.values, [[1, 2], [3, 4]])


def test_sum_of_product_gradient_is_row_sums_of_b():
    rng = np.random.default_rng(1)
    g = Graph()
    a = g.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = g.tensor(rng.normal(size=(4, 2)))
    g.backward(ad.reduce_sum(a @ b))
    expected = np.tile(b.values.sum(axis=1), (3, 1))
    np.testing.assert_allclose(a.grad, expected, rtol=0, atol=1e-14)


def test_matmul_shape_mismatch_names_both_shapes():
    g = Graph()
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        g.tensor(np.ones((2, 3))) @ g.tensor(np.ones((2, 3)))


def test_softmax_rows_uniform_and_stabilized():
    g = Graph()
    y = ad.softmax_rows(g.tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(y.values, [[1 / 3] * 3], atol=1e-15)
    y = ad.softmax_rows(g.tensor([[1000.0, 0.0]]))
    assert np.all(np.isfinite(y.values))
    assert y.values[0, 0] == pytest.approx(1.0)
    assert y.values[0, 1] < 1e-300


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    g = Graph()
    y = ad.softmax_rows(g.tensor(rng.normal(scale=5, size=(6, 7))), scale=0.3)
    assert np.max(np.abs(y.values.sum(axis=-1) - 1.0)) <= 1e-12


def test_softmax_rejects_non_finite():
    g = Graph()
    with pytest.raises(ad.NumericError):
        ad.softmax_rows(g.tensor([[0.0, np.inf]]))


def test_square_gradient():
    g = Graph()
    x = g.tensor(3.0, requires_grad=True)
    g.backward(ad.mul(x, x))
    assert x.grad == pytest.approx(6.0)


def test_detached_node_gets_zero_gradient():
    g = Graph()
    x = g.tensor([1.0, 2.0], requires_grad=True)
    y = ad.mul(x, x)
    d = g.detach(y)
    z = ad.reduce_sum(ad.mul(d, x))
    grads = g.backward(z)
    np.testing.assert_array_equal(grads[d.node_id], np.zeros(2))
    np.testing.assert_array_equal(grads[y.node_id], np.zeros(2))
    np.testing.assert_allclose(x.grad, d.values)


def test_independent_input_gets_exact_zero_gradient():
    g = Graph()
    x = g.tensor(np.ones((2, 2)), requires_grad=True)
    w = g.tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    _unused = ad.relu(x @ w)
    g.backward(ad.reduce_sum(ad.mul(w, w)))
    np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))


def test_intermediate_gradient_is_exposed():
    g = Graph()
    x = g.tensor([[1.0, -2.0]], requires_grad=True)
    a = ad.softmax_rows(x)
    loss = ad.reduce_sum(ad.mul(a, np.array([[3.0, 5.0]])))
    grads = g.backward(loss)
    np.testing.assert_array_equal(grads[a.node_id], [[3.0, 5.0]])
    assert a.grad is not None


def test_non_scalar_loss_rejected():
    g = Graph()
    x = g.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.GraphError):
        g.backward(x)


def test_mixed_graphs_rejected():
    a = Graph().tensor([1.0])
    b = Graph().tensor([1.0])
    with pytest.raises(ad.GraphError):
        ad.add(a, b)


def test_cross_entropy_matches_log_softmax():
    g = Graph()
    z = np.array([[2.0, -1.0], [0.5, 0.5]])
    loss = ad.cross_entropy_with_logits(g.tensor(z), np.array([1, 0]))
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert float(loss.values) == pytest.approx(-(logp[0, 1] + logp[1, 0]) / 2, abs=1e-15)


def _two_layer_net(params, x, y):
    g = Graph()
    p = {k: g.tensor(v, requires_grad=True) for k, v in params.items()}
    h = ad.relu(g.tensor(x) @ p["w1"] + p["b1"])
    h = ad.layer_norm(h, p["gamma"], p["beta"])
    logits = h @ p["w2"] + p["b2"]
    loss = ad.cross_entropy_with_logits(logits, y)
    return g, p, loss


@pytest.mark.parametrize("seed", range(4))
def test_two_layer_net_all_parameters(seed):
    rng = np.random.default_rng(seed)
    params = {
        "w1": rng.normal(size=(3, 5)),
        "b1": rng.normal(size=5),
        "gamma": rng.normal(size=5),
        "beta": rng.normal(size=5),
        "w2": rng.normal(size=(5, 2)),
        "b2": rng.normal(size=2),
    }
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 2, size=6)
    g, p, loss = _two_layer_net(params, x, y)
    g.backward(loss)
    for name in params:

        def f(v, name=name):
            return float(_two_layer_net({**params, name: v}, x, y)[2].values)

        assert max_rel_error(p[name].grad, central_diff(f, params[name])) < 1e-5, name


def test_forward_backward_is_bit_identical():
    rng = np.random.default_rng(9)
    params = {
        "w1": rng.normal(size=(3, 5)),
        "b1": rng.normal(size=5),
        "gamma": np.ones(5),
        "beta": np.zeros(5),
        "w2": rng.normal(size=(5, 2)),
        "b2": np.zeros(2),
    }
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 2, size=6)
    runs = []
    for _ in range(2):
        g, p, loss = _two_layer_net(params, x, y)
        g.backward(loss)
        runs.append((loss.values.copy(), {k: t.grad.copy() for k, t in p.items()}))
    assert runs[0][0].tobytes() == runs[1][0].tobytes()
    for k in params:
        assert runs[0][1][k].tobytes() == runs[1][1][k].tobytes()


def test_node_ids_unique_and_parents_precede_children():
    g = Graph()
    x = g.tensor(np.ones((2, 2)), requires_grad=True)
    ad.reduce_sum(ad.softmax_rows(x @ x))
    ids = [t.node_id for t in g.tensors]
    assert ids == list(range(len(g.nodes)))
    for i, node in enumerate(g.nodes):
        assert all(p < i for p in node.parents)
