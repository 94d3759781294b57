import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustlens import autodiff as ad


def _relu_graph():
    g = ad.Graph()
    g.output("y", g.relu(g.input("x", (2,))))
    return g


def _mlp_graph(n_in=5, hidden=7, n_out=3):
    g = ad.Graph()
    x = g.input("x", (None, n_in))
    w1, b1 = g.input("w1", (hidden, n_in)), g.input("b1", (hidden,))
    w2, b2 = g.input("w2", (n_out, hidden)), g.input("b2", (n_out,))
    h = g.relu(g.add(g.matmul(x, w1, transpose_b=True), b1))
    out = g.add(g.matmul(h, w2, transpose_b=True), b2)
    g.output("out", out)
    g.output("loss", g.sum(g.log_softmax(out)))
    return g


def _mlp_bindings(rng, n=4, n_in=5, hidden=7, n_out=3):
    return {"x": rng.normal(size=(n, n_in)), "w1": rng.normal(size=(hidden, n_in)),
            "b1": rng.normal(size=hidden), "w2": rng.normal(size=(n_out, hidden)),
            "b2": rng.normal(size=n_out)}


# --- evaluate ---------------------------------------------------------------


def test_relu_forward():
    out = ad.evaluate(_relu_graph(), {"x": np.array([-1.0, 2.0])})
    np.testing.assert_array_equal(out["y"], [0.0, 2.0])


def test_identity_matmul():
    g = ad.Graph()
    g.output("y", g.matmul(g.const(np.eye(2)), g.input("x", (2,))))
    np.testing.assert_array_equal(ad.evaluate(g, {"x": np.array([3.0, 4.0])})["y"], [3.0, 4.0])


def test_log_softmax_equal_logits():
    g = ad.Graph()
    g.output("y", g.log_softmax(g.input("x", (2,))))
    y = ad.evaluate(g, {"x": np.zeros(2)})["y"]
    np.testing.assert_allclose(y, [-np.log(2.0)] * 2, rtol=0, atol=1e-15)


def test_unbound_input():
    with pytest.raises(ad.UnboundInputError):
        ad.evaluate(_relu_graph(), {})


def test_shape_mismatch_rejected_before_compute():
    g = ad.Graph()
    g.output("y", g.matmul(g.input("a", (2, 3)), g.input("b", (2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.evaluate(g, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})
    with pytest.raises(ad.ShapeError):
        ad.evaluate(_relu_graph(), {"x": np.ones(3)})


def test_non_finite_intermediate():
    g = ad.Graph()
    g.output("y", g.exp(g.input("x", (1,))))
    with pytest.raises(ad.NonFiniteError):
        ad.evaluate(g, {"x": np.array([1e4])})


def test_evaluate_is_pure_and_deterministic():
    rng = np.random.default_rng(0)
    g, b = _mlp_graph(), _mlp_bindings(rng)
    before = {k: v.copy() for k, v in b.items()}
    a, c = ad.evaluate(g, b), ad.evaluate(g, b)
    for k in a:
        assert a[k].tobytes() == c[k].tobytes()
    for k in b:
        np.testing.assert_array_equal(b[k], before[k])


# --- backward ---------------------------------------------------------------


def test_grad_of_squared_norm():
    g = ad.Graph()
    x = g.input("x", (2,))
    g.output("f", g.sum(g.mul(x, x)))
    np.testing.assert_allclose(ad.backward(g, {"x": np.array([1.0, 2.0])}, "f")["x"], [2.0, 4.0])


def test_grad_of_summed_relu():
    g = ad.Graph()
    g.output("f", g.sum(g.relu(g.input("x", (2,)))))
    np.testing.assert_array_equal(ad.backward(g, {"x": np.array([-1.0, 2.0])}, "f")["x"], [0.0, 1.0])


def test_relu_subgradient_zero_at_kink():
    g = ad.Graph()
    g.output("f", g.sum(g.relu(g.input("x", (3,)))))
    np.testing.assert_array_equal(ad.backward(g, {"x": np.array([0.0, 0.0, 1.0])}, "f")["x"], [0, 0, 1])


def test_backward_non_scalar_output_is_error():
    with pytest.raises(ad.ShapeError):
        ad.backward(_relu_graph(), {"x": np.ones(2)}, "y")


def test_disconnected_input_gets_zero_gradient():
    g = ad.Graph()
    x = g.input("x", (3,))
    g.input("unused", (2,))
    g.output("f", g.sum(x))
    grads = ad.backward(g, {"x": np.ones(3), "unused": np.ones(2)}, "f")
    np.testing.assert_array_equal(grads["unused"], np.zeros(2))


def test_mlp_gradient_matches_central_differences():
    rng = np.random.default_rng(1)
    g, b = _mlp_graph(), _mlp_bindings(rng)
    grads = ad.backward(g, b, "loss")
    h, worst = 1e-4, 0.0
    for name, v in b.items():
        for i in range(v.size):
            hi, lo = dict(b), dict(b)
            hi[name] = v.copy().ravel()
            lo[name] = v.copy().ravel()
            hi[name][i] += h
            lo[name][i] -= h
            hi[name], lo[name] = hi[name].reshape(v.shape), lo[name].reshape(v.shape)
            num = (float(ad.evaluate(g, hi, ["loss"])["loss"]) - float(ad.evaluate(g, lo, ["loss"])["loss"])) / (2 * h)
            ana = grads[name].ravel()[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-3))
    assert worst < 1e-6


# --- jvp --------------------------------------------------------------------


def test_jvp_linear_map():
    rng = np.random.default_rng(2)
    A, v = rng.normal(size=(3, 4)), rng.normal(size=4)
    g = ad.Graph()
    g.output("y", g.matmul(g.const(A), g.input("x", (4,))))
    out = ad.jvp(g, {"x": rng.normal(size=4)}, {"x": v})["y"]
    np.testing.assert_allclose(out, A @ v, rtol=1e-14)


def test_jvp_square():
    g = ad.Graph()
    x = g.input("x", ())
    g.output("y", g.mul(x, x))
    assert float(ad.jvp(g, {"x": np.array(3.0)}, {"x": np.array(1.0)})["y"]) == 6.0


def test_jvp_matches_central_differences_on_random_nets():
    rng = np.random.default_rng(3)
    for _ in range(5):
        g, b = _mlp_graph(), _mlp_bindings(rng)
        d = {k: rng.normal(size=v.shape) for k, v in b.items()}
        t = float(ad.jvp(g, b, d, ["loss"])["loss"])
        h = 1e-5
        hi = {k: b[k] + h * d[k] for k in b}
        lo = {k: b[k] - h * d[k] for k in b}
        num = (float(ad.evaluate(g, hi, ["loss"])["loss"]) - float(ad.evaluate(g, lo, ["loss"])["loss"])) / (2 * h)
        assert abs(t - num) / max(abs(t), 1e-12) < 1e-6


def test_jvp_equals_gradient_inner_product():
    rng = np.random.default_rng(4)
    g, b = _mlp_graph(), _mlp_bindings(rng)
    grads = ad.backward(g, b, "loss")
    d = {k: rng.normal(size=v.shape) for k, v in b.items()}
    t = float(ad.jvp(g, b, d, ["loss"])["loss"])
    ref = sum(float(np.sum(grads[k] * d[k])) for k in b)
    assert abs(t - ref) <= 1e-10 * abs(ref)


def test_jvp_direction_shape_checked():
    with pytest.raises(ad.ShapeError):
        ad.jvp(_relu_graph(), {"x": np.ones(2)}, {"x": np.ones(3)})


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.integers(0, 2**31 - 1))
def test_vjp_jvp_adjoint(xs, seed):
    # <u, J v> == <J^T u, v> for the log-softmax Jacobian
    rng = np.random.default_rng(seed)
    x = np.array(xs)
    g = ad.Graph()
    g.output("y", g.log_softmax(g.input("x", (len(x),))))
    u, v = rng.normal(size=len(x)), rng.normal(size=len(x))
    jv = ad.jvp(g, {"x": x}, {"x": v})["y"]
    jtu = ad.vjp(g, {"x": x}, "y", u)["x"]
    assert abs(u @ jv - jtu @ v) <= 1e-12 * (1 + abs(u @ jv))


# --- primitives and finite differences --------------------------------------


def _primitive_graphs(rng):
    cases = []
    for name, build, shape in [
        ("scale", lambda g, x: g.sum(g.mul(g.scale(x, 2.5), x)), (4,)),
        ("sub", lambda g, x: g.sum(g.mul(g.sub(x, g.const(np.arange(4.0))), x)), (4,)),
        ("exp", lambda g, x: g.sum(g.exp(x)), (4,)),
        ("l2", lambda g, x: g.l2_norm(x), (4,)),
        ("l2-axis", lambda g, x: g.sum(g.l2_norm(x, axis=-1)), (3, 4)),
        ("sum-axis", lambda g, x: g.sum(g.mul(g.sum(x, axis=0), g.sum(x, axis=0))), (3, 4)),
        ("logsoftmax", lambda g, x: g.sum(g.mul(g.log_softmax(x), g.const(rng.normal(size=(3, 4))))), (3, 4)),
        ("relu", lambda g, x: g.sum(g.mul(g.relu(x), x)), (6,)),
        ("reshape", lambda g, x: g.sum(g.mul(g.reshape(x, (3, 1)), g.const(np.arange(6.0).reshape(2, 3, 1)))), (2, 3)),
    ]:
        g = ad.Graph()
        g.output("f", build(g, g.input("x", shape)))
        cases.append((name, g, {"x": rng.normal(size=shape) + 0.1}))
    for stride in (1, 2):
        for padding in ("valid", "same"):
            g = ad.Graph()
            x, w = g.input("x", (2, 2, 7, 7)), g.input("w", (3, 2, 3, 3))
            y = g.conv2d(x, w, stride, padding)
            g.output("f", g.sum(g.mul(y, y)))
            cases.append((f"conv-s{stride}-{padding}", g,
                          {"x": rng.normal(size=(2, 2, 7, 7)), "w": rng.normal(size=(3, 2, 3, 3))}))
    return cases


def test_every_primitive_matches_finite_differences():
    for name, g, b in _primitive_graphs(np.random.default_rng(5)):
        rep = ad.finite_diff_check(g, b, h=1e-4, tol=1e-5)
        assert rep.passed, (name, rep.failures[:3])
        assert rep.checked > 0


def test_fd_quadratic_form_is_tight():
    rng = np.random.default_rng(6)
    M = rng.normal(size=(5, 5))
    g = ad.Graph()
    x = g.input("x", (5,))
    g.output("f", g.sum(g.mul(x, g.matmul(g.const(M @ M.T), x))))
    rep = ad.finite_diff_check(g, {"x": rng.normal(size=5)}, h=1e-4, tol=1e-5)
    assert rep.max_rel_error < 1e-9


def test_fd_relu_kink_is_excluded_not_failed():
    g = ad.Graph()
    g.output("f", g.sum(g.relu(g.input("x", (3,)))))
    rep = ad.finite_diff_check(g, {"x": np.array([0.0, 1.0, -2.0])})
    assert rep.passed
    assert ("x", 0) in rep.excluded


def test_fd_three_layer_mlp():
    rng = np.random.default_rng(7)
    g = ad.Graph()
    x = g.input("x", (2, 32))
    h = x
    for i, (o, n) in enumerate([(16, 32), (8, 16)]):
        h = g.relu(g.add(g.matmul(h, g.input(f"w{i}", (o, n)), transpose_b=True), g.input(f"b{i}", (o,))))
    g.output("f", g.sum(g.log_softmax(h)))
    b = {"x": rng.normal(size=(2, 32)), "w0": rng.normal(size=(16, 32)) / 4, "b0": rng.normal(size=16),
         "w1": rng.normal(size=(8, 16)) / 4, "b1": rng.normal(size=8)}
    assert ad.finite_diff_check(g, b, h=1e-4, tol=1e-5).passed


def test_fd_rejects_bad_h():
    with pytest.raises(ValueError):
        ad.finite_diff_check(_relu_graph(), {"x": np.ones(2)}, h=0.0)


def test_graph_errors():
    g = ad.Graph()
    g.input("x")
    with pytest.raises(ad.GraphError):
        g.input("x")
    other = ad.Graph()
    with pytest.raises(ad.GraphError):
        g.relu(other.input("y"))
