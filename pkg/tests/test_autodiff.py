import numpy as np
import pytest

from windinr import autodiff as ad
from windinr.autodiff import Graph, Tape, finite_diff_check
from windinr.linalg import cholesky_factor


def test_forward_square():
    g = Graph(lambda lv: ad.mul(lv["x"], lv["x"]), ["x"])
    assert g.forward({"x": np.array(3.0)}) == 9.0


def test_forward_trace_identity():
    g = Graph(lambda lv: ad.sum_(ad.mul(lv["a"], lv["b"])), ["a", "b"])
    eye = np.eye(2)
    assert g.forward({"a": eye, "b": eye}) == 2.0


def test_forward_unbound_leaf():
    g = Graph(lambda lv: lv["x"], ["x", "y"])
    with pytest.raises(ValueError, match="unbound"):
        g.forward({"x": np.array(1.0)})


def test_forward_shape_mismatch():
    g = Graph(lambda lv: ad.sum_(ad.matmul(lv["a"], lv["b"])), ["a", "b"])
    with pytest.raises(ValueError):
        g.forward({"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_forward_nonfinite():
    g = Graph(lambda lv: ad.log(lv["x"]), ["x"])
    with pytest.raises(ad.NonFiniteError):
        g.forward({"x": np.array(-1.0)})


def test_backward_square():
    g = Graph(lambda lv: ad.mul(lv["x"], lv["x"]), ["x"])
    g.forward({"x": np.array(3.0)})
    assert g.backward()["x"] == pytest.approx(6.0)


def test_backward_before_forward():
    g = Graph(lambda lv: lv["x"], ["x"])
    with pytest.raises(RuntimeError):
        g.backward()


def test_backward_quadratic_norm():
    # d/dz ||A z - y||^2 at z = 0 is -2 A^T y (hand expansion)
    rng = np.random.default_rng(7)
    A = rng.normal(size=(5, 3))
    y = rng.normal(size=(5, 1))

    def build(lv):
        r = ad.sub(ad.matmul(lv["z"].tape.constant(A), lv["z"]), y)
        return ad.sum_(ad.square(r))

    g = Graph(build, ["z"])
    g.forward({"z": np.zeros((3, 1))})
    grad = g.backward()["z"]
    np.testing.assert_allclose(grad, -2.0 * A.T @ y, rtol=1e-12)


def test_backward_disconnected_leaf_zero():
    g = Graph(lambda lv: ad.sum_(ad.square(lv["x"])), ["x", "unused"])
    g.forward({"x": np.ones(3), "unused": np.ones(4)})
    np.testing.assert_array_equal(g.backward()["unused"], np.zeros(4))


def test_backward_linearity():
    # grad(f + g) == grad f + grad g on shared leaves
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-1, 1, size=6)

    def f_build(lv):
        return ad.sum_(ad.mul(ad.sin(lv["x"]), lv["x"]))

    def g_build(lv):
        return ad.sum_(ad.exp(ad.mul(lv["x"], 0.5)))

    def both(lv):
        return ad.add(f_build(lv), g_build(lv))

    gf, gg, gb = Graph(f_build, ["x"]), Graph(g_build, ["x"]), Graph(both, ["x"])
    for gr in (gf, gg, gb):
        gr.forward({"x": x0})
    np.testing.assert_allclose(
        gb.backward()["x"], gf.backward()["x"] + gg.backward()["x"], rtol=1e-12
    )


def test_finite_diff_quadratic_exact():
    rng = np.random.default_rng(11)
    A = rng.normal(size=(4, 4))

    def build(lv):
        x = ad.reshape(lv["x"], (4, 1))
        return ad.sum_(ad.square(ad.matmul(lv["x"].tape.constant(A), x)))

    g = Graph(build, ["x"])
    g.forward({"x": rng.uniform(-1, 1, 4)})
    assert finite_diff_check(g, "x", 1e-5) < 1e-6


def test_finite_diff_constant_graph():
    g = Graph(lambda lv: ad.sum_(lv["x"].tape.constant(np.ones(3))), ["x"])
    g.forward({"x": np.ones(2)})
    assert finite_diff_check(g, "x", 1e-5) == 0.0
    np.testing.assert_array_equal(g.backward()["x"], np.zeros(2))


def test_finite_diff_requires_positive_step():
    g = Graph(lambda lv: ad.sum_(lv["x"]), ["x"])
    g.forward({"x": np.ones(2)})
    with pytest.raises(ValueError):
        finite_diff_check(g, "x", 0.0)


ELEMENTWISE = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "silu": ad.silu,
    "sin": ad.sin,
    "cos": ad.cos,
    "square": ad.square,
    "neg": ad.neg,
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_finite_diff_elementwise(name):
    op = ELEMENTWISE[name]
    g = Graph(lambda lv: ad.sum_(ad.mul(op(lv["x"]), lv["x"].tape.constant(WEIGHTS))), ["x"])
    rng = np.random.default_rng(hash(name) % 2**32)
    g.forward({"x": rng.uniform(-1, 1, 8)})
    assert finite_diff_check(g, "x", 1e-5) < 1e-4


WEIGHTS = np.linspace(0.5, 1.5, 8)


@pytest.mark.parametrize("seed", range(4))
def test_finite_diff_composite_graph(seed):
    rng = np.random.default_rng(seed)
    W1 = rng.normal(size=(6, 5))
    W2 = rng.normal(size=(5, 2))

    def build(lv):
        h = ad.tanh(ad.matmul(lv["x"], lv["x"].tape.constant(W1)))
        h = ad.silu(ad.matmul(h, h.tape.constant(W2)))
        s = ad.softmax(h, axis=1)
        return ad.sum_(ad.square(ad.sub(s, 0.3)))

    g = Graph(build, ["x"])
    g.forward({"x": rng.uniform(-1, 1, size=(3, 6))})
    assert finite_diff_check(g, "x", 1e-5) < 1e-4


def test_finite_diff_reductions_and_shapes():
    rng = np.random.default_rng(5)

    def build(lv):
        x = lv["x"]
        a = ad.mean_(x, axis=0)
        b = ad.max_(x, axis=1)
        c = ad.concat([a, b], axis=0)
        d = ad.reshape(c, (1, -1))
        return ad.sum_(ad.square(ad.transpose(d)))

    g = Graph(build, ["x"])
    g.forward({"x": rng.uniform(-1, 1, size=(4, 4))})
    assert finite_diff_check(g, "x", 1e-5) < 1e-4


def test_finite_diff_layer_norm():
    rng = np.random.default_rng(9)

    def build(lv):
        y = ad.layer_norm(lv["x"], lv["g"], lv["b"])
        return ad.sum_(ad.square(y))

    g = Graph(build, ["x", "g", "b"])
    g.forward(
        {
            "x": rng.uniform(-1, 1, size=(3, 6)),
            "g": rng.uniform(0.5, 1.5, 6),
            "b": rng.uniform(-0.5, 0.5, 6),
        }
    )
    for leaf in ("x", "g", "b"):
        assert finite_diff_check(g, leaf, 1e-5) < 1e-4


@pytest.mark.parametrize("pad_mode", ["zero", "periodic"])
def test_finite_diff_conv3x3(pad_mode):
    rng = np.random.default_rng(13)

    def build(lv):
        y = ad.conv3x3(lv["x"], lv["w"], lv["b"], pad_mode=pad_mode)
        return ad.sum_(ad.square(y))

    g = Graph(build, ["x", "w", "b"])
    g.forward(
        {
            "x": rng.uniform(-1, 1, size=(2, 5, 4)),
            "w": rng.uniform(-1, 1, size=(18, 3)),
            "b": rng.uniform(-1, 1, size=3),
        }
    )
    for leaf in ("x", "w", "b"):
        assert finite_diff_check(g, leaf, 1e-5) < 1e-4


def test_finite_diff_bilinear_sample():
    rng = np.random.default_rng(17)
    pts = rng.uniform(-1.2, 1.2, size=(7, 2))  # includes out-of-domain points

    def build(lv):
        s = ad.bilinear_sample(lv["f"], pts, (-1.0, 1.0))
        return ad.sum_(ad.square(s))

    g = Graph(build, ["f"])
    g.forward({"f": rng.uniform(-1, 1, size=(3, 5, 5))})
    assert finite_diff_check(g, "f", 1e-5) < 1e-4


def test_finite_diff_half_quad_chol():
    rng = np.random.default_rng(19)
    M = rng.normal(size=(5, 5))
    A = M @ M.T + np.eye(5)
    L = cholesky_factor(A)

    def build(lv):
        return ad.half_quad_chol(lv["x"], L)

    g = Graph(build, ["x"])
    x = rng.uniform(-1, 1, 5)
    g.forward({"x": x})
    assert g.root.value == pytest.approx(0.5 * x @ np.linalg.solve(A, x))
    assert finite_diff_check(g, "x", 1e-5) < 1e-4


def test_max_routes_gradient_to_argmax():
    g = Graph(lambda lv: ad.sum_(ad.max_(lv["x"], axis=0)), ["x"])
    g.forward({"x": np.array([[1.0, 5.0], [3.0, 2.0]])})
    np.testing.assert_array_equal(g.backward()["x"], [[0.0, 1.0], [1.0, 0.0]])


def test_broadcasting_vjp_shapes():
    def build(lv):
        return ad.sum_(ad.mul(lv["row"], lv["mat"]))

    g = Graph(build, ["row", "mat"])
    g.forward({"row": np.arange(3.0), "mat": np.ones((4, 3))})
    grads = g.backward()
    assert grads["row"].shape == (3,)
    assert grads["mat"].shape == (4, 3)
    np.testing.assert_allclose(grads["row"], 4.0 * np.ones(3))


def test_tape_gradient_multiple_roots():
    # Re-running backward with a different root resets adjoints.
    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]), "x")
    a = ad.sum_(ad.square(x))
    b = ad.sum_(ad.mul(x, 3.0))
    ga = tape.gradient(a, {"x": x})["x"]
    gb = tape.gradient(b, {"x": x})["x"]
    np.testing.assert_allclose(ga, [2.0, 4.0])
    np.testing.assert_allclose(gb, [3.0, 3.0])
