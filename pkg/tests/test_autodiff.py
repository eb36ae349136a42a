import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microgrid_drl.autodiff import Graph, ShapeError, grad_check


def test_sigmoid_at_zero():
    g = Graph()
    assert g.sigmoid(g.input([0.0])).value.tolist() == [0.5]


def test_tanh_at_zero():
    g = Graph()
    assert g.tanh(g.input([0.0])).value.tolist() == [0.0]


def test_mean_squared_difference():
    g = Graph()
    x, y = g.input([1.0, 2.0]), g.input([1.0, 4.0])
    assert g.mean(g.square(g.sub(x, y))).value == 2.0


def test_square_gradient():
    g = Graph()
    x = g.param("x", np.array(3.0))
    assert g.backward(g.square(x))["x"] == 6.0


def test_clip_gradient_zero_outside_interval():
    g = Graph()
    w = g.param("w", np.array([1.5]))
    assert g.backward(g.sum(g.clip(w, 0.8, 1.2)))["w"].tolist() == [0.0]


@pytest.mark.parametrize("value, expected", [(1.0, 1.0), (0.8, 1.0), (1.2, 1.0), (0.5, 0.0)])
def test_clip_gradient_inside_and_at_boundary(value, expected):
    g = Graph()
    w = g.param("w", np.array([value]))
    assert g.backward(g.sum(g.clip(w, 0.8, 1.2)))["w"][0] == expected


def test_minimum_routes_to_smaller_and_ties_to_first():
    g = Graph()
    a = g.param("a", np.array([1.0, 2.0, 3.0]))
    b = g.param("b", np.array([2.0, 1.0, 3.0]))
    grads = g.backward(g.sum(g.minimum(a, b)))
    assert grads["a"].tolist() == [1.0, 0.0, 1.0]
    assert grads["b"].tolist() == [0.0, 1.0, 0.0]


def test_shape_mismatch_names_op_and_shapes():
    g = Graph()
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        g.matmul(g.input(np.ones((2, 3))), g.input(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        g.add(g.input(np.ones(3)), g.input(np.ones(4)))


def test_backward_before_forward_errors():
    with pytest.raises(RuntimeError):
        Graph().backward()


def test_backward_needs_scalar_output():
    g = Graph()
    x = g.param("x", np.ones(3))
    with pytest.raises(ShapeError):
        g.backward(g.tanh(x))


def test_backward_on_non_recording_graph_errors():
    g = Graph(record=False)
    g.square(g.input(np.array(2.0)))
    with pytest.raises(RuntimeError):
        g.backward()


def test_unreached_parameter_gets_zero_gradient():
    g = Graph()
    x = g.param("x", np.array([2.0]))
    g.param("unused", np.ones((2, 2)))
    grads = g.backward(g.sum(g.square(x)))
    assert np.array_equal(grads["unused"], np.zeros((2, 2)))


def test_each_node_visited_once_for_shared_subexpression():
    g = Graph()
    x = g.param("x", np.array([2.0]))
    y = g.mul(x, x)                     # x reused twice
    z = g.add(y, y)                     # y reused twice
    assert g.backward(g.sum(z))["x"][0] == 8.0


def test_concat_slice_stack_reshape_gradients():
    rng = np.random.default_rng(1)
    params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 2))}

    def loss(g, p):
        c = g.concat([p["a"], p["b"]], axis=1)
        s = g.stack([g.slice(c, (slice(None), 0)), g.slice(c, (slice(None), 4))])
        r = g.reshape(g.tanh(c), (10,))
        return g.add(g.sum(g.exp(s)), g.mean(g.square(r)))

    assert grad_check(loss, params).passed


def test_log_of_nonpositive_errors():
    g = Graph()
    with pytest.raises(ValueError, match="log"):
        g.log(g.input([0.0, 1.0]))


def test_grad_check_quadratic_tight():
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=(3, 2))}
    res = grad_check(lambda g, p: g.sum(g.square(p["w"])), params, tol=1e-6)
    assert res.passed, res


def test_grad_check_tanh_mlp():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 3))
    params = {"W0": rng.normal(size=(3, 4)), "b0": rng.normal(size=4),
              "W1": rng.normal(size=(4, 1)), "b1": rng.normal(size=1)}

    def loss(g, p):
        h = g.tanh(g.add(g.matmul(g.input(x), p["W0"]), p["b0"]))
        return g.mean(g.square(g.add(g.matmul(h, p["W1"]), p["b1"])))

    assert grad_check(loss, params, tol=1e-4).passed


def test_grad_check_detects_corrupted_gradient():
    rng = np.random.default_rng(3)
    params = {"w": rng.normal(size=4)}

    def loss(g, p):
        return g.sum(g.tanh(p["w"]))

    g = Graph()
    true = g.backward(loss(g, {"w": g.param("w", params["w"])}))
    bad = {"w": 2.0 * true["w"]}
    res = grad_check(loss, params, analytic=bad)
    assert not res.passed
    assert "w" in res.failures()


def test_grad_check_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        grad_check(lambda g, p: g.sum(p["w"]), {"w": np.ones(1)}, step=0.0)


def _cell_params(rng, n_in, n_h):
    p = {}
    for gate in "zrh":
        p[f"W{gate}"] = rng.normal(scale=0.5, size=(n_in, n_h))
        p[f"U{gate}"] = rng.normal(scale=0.5, size=(n_h, n_h))
        p[f"b{gate}"] = rng.normal(scale=0.1, size=n_h)
    return p


def _cell_args(p):
    return [p[k] for k in ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")]


def _composite_cell(g, x, h, p):
    z = g.sigmoid(g.add(g.add(g.matmul(x, p["Wz"]), g.matmul(h, p["Uz"])), p["bz"]))
    r = g.sigmoid(g.add(g.add(g.matmul(x, p["Wr"]), g.matmul(h, p["Ur"])), p["br"]))
    c = g.tanh(g.add(g.add(g.matmul(x, p["Wh"]), g.matmul(g.mul(r, h), p["Uh"])), p["bh"]))
    return g.add(g.mul(g.sub(1.0, z), h), g.mul(z, c))


@pytest.mark.parametrize("seed", range(3))
def test_gru_cell_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = _cell_params(rng, 2, 3)
    params["h0"] = rng.normal(size=(4, 3))
    x = rng.normal(size=(4, 2))

    def loss(g, p):
        return g.sum(g.square(g.gru_cell(g.input(x), p["h0"], *_cell_args(p))))

    assert grad_check(loss, params).passed


def test_gru_cell_matches_composite_forward_and_backward():
    rng = np.random.default_rng(7)
    p0 = _cell_params(rng, 3, 4)
    x, h = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    out = []
    for fused in (True, False):
        g = Graph()
        p = {k: g.param(k, v) for k, v in p0.items()}
        hx = g.param("h", h)
        y = g.gru_cell(g.input(x), hx, *_cell_args(p)) if fused else _composite_cell(g, g.input(x), hx, p)
        out.append((y.value, g.backward(g.sum(g.tanh(y)))))
    np.testing.assert_allclose(out[0][0], out[1][0], rtol=0, atol=1e-14)
    for name in out[0][1]:
        np.testing.assert_allclose(out[0][1][name], out[1][1][name], rtol=1e-12, atol=1e-14)


def test_gru_sequence_equals_stepped_cells_bitwise():
    rng = np.random.default_rng(8)
    p0 = _cell_params(rng, 2, 3)
    xs = rng.normal(size=(6, 4, 2))
    h0 = np.zeros((4, 3))

    g1 = Graph()
    p1 = {k: g1.param(k, v) for k, v in p0.items()}
    seq = g1.gru_sequence(g1.input(xs), h0, *_cell_args(p1))
    grads_seq = g1.backward(g1.sum(g1.square(seq)))

    g2 = Graph()
    p2 = {k: g2.param(k, v) for k, v in p0.items()}
    h = g2.input(h0)
    hs = []
    for t in range(6):
        h = g2.gru_cell(g2.input(xs[t]), h, *_cell_args(p2))
        hs.append(h)
    stacked = g2.stack(hs)
    grads_step = g2.backward(g2.sum(g2.square(stacked)))

    assert np.array_equal(seq.value, stacked.value)
    for name in grads_seq:
        np.testing.assert_allclose(grads_seq[name], grads_step[name], rtol=1e-12, atol=1e-14)


def test_gru_sequence_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    params = _cell_params(rng, 1, 3)
    xs = rng.normal(size=(7, 1))

    def loss(g, p):
        return g.mean(g.square(g.gru_sequence(g.input(xs), np.zeros(3), *_cell_args(p))))

    assert grad_check(loss, params).passed


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_backward_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    w0 = rng.normal(size=(3, 2))
    x = rng.normal(size=(4, 3))

    def grads(fn):
        g = Graph()
        w = g.param("w", w0)
        return g.backward(fn(g, w))["w"]

    def f(g, w):
        return g.sum(g.tanh(g.matmul(g.input(x), w)))

    def h(g, w):
        return g.mean(g.exp(g.mul(w, 0.3)))

    combined = grads(lambda g, w: g.add(g.mul(f(g, w), a), g.mul(h(g, w), b)))
    np.testing.assert_allclose(combined, a * grads(f) + b * grads(h), rtol=0, atol=1e-12)


def test_forward_is_deterministic():
    rng = np.random.default_rng(4)
    w, x = rng.normal(size=(3, 3)), rng.normal(size=(2, 3))

    def run():
        g = Graph()
        return g.sigmoid(g.matmul(g.input(x), g.input(w))).value

    assert np.array_equal(run(), run())


def test_operator_overloads():
    g = Graph()
    x = g.param("x", np.array([2.0]))
    y = (x * 3.0 + 1.0 - x) * x          # 2x^2 + x
    assert y.value[0] == 10.0
    assert g.backward(g.sum(y))["x"][0] == 9.0
