import zlib

import numpy as np
import pytest

from nmiconf import diffcore as dc

from conftest import random_spd

# (name, builder on leaf x, sampler) - samplers stay on well-conditioned domains
UNARY = {
    "softsign": (dc.softsign, lambda r: r.uniform(-3, 3, 5)),
    "softplus": (dc.softplus, lambda r: r.uniform(-3, 3, 5)),
    "exp": (dc.exp, lambda r: r.uniform(-2, 2, 5)),
    "log": (dc.log, lambda r: r.uniform(0.5, 3, 5)),
    "log2": (dc.log2, lambda r: r.uniform(0.5, 3, 5)),
    "square": (dc.square, lambda r: r.uniform(-2, 2, 5)),
    "leaky_relu": (dc.leaky_relu, lambda r: np.sign(r.uniform(-1, 1, 5)) * r.uniform(0.1, 2, 5)),
    "smooth_l1": (dc.smooth_l1, lambda r: np.concatenate([r.uniform(-0.9, 0.9, 3), r.choice([-1, 1], 2) * r.uniform(1.1, 3, 2)])),
    "relu_gate": (dc.relu_gate, lambda r: np.sign(r.uniform(-1, 1, 5)) * r.uniform(0.1, 2, 5)),
    "transpose": (dc.transpose, lambda r: r.normal(size=(4, 4))),
    "trace": (dc.trace, lambda r: r.normal(size=(4, 4))),
    "inv": (dc.inv, lambda r: random_spd(r)),
    "det": (dc.det, lambda r: random_spd(r)),
    "logdet": (dc.logdet, lambda r: random_spd(r)),
    "cholesky": (dc.cholesky, lambda r: random_spd(r)),
    "symmetrize": (dc.symmetrize, lambda r: r.normal(size=(4, 4))),
    "sum": (lambda x: dc.sum(x, axis=-1), lambda r: r.normal(size=(3, 4))),
    "mean": (dc.mean, lambda r: r.normal(size=(3, 4))),
}


def _weighted(builder, w):
    def f(leaves):
        out = builder(leaves["x"])
        return dc.sum(dc.mul(out, dc.const(w)))

    return f


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradients_on_100_random_inputs(name):
    builder, sample = UNARY[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        x = sample(rng)
        w = rng.normal(size=builder(dc.const(x)).shape)
        rep = dc.grad_check(_weighted(builder, w), {"x": x}, eps=1e-5)
        worst = max(worst, rep.worst)
    assert worst <= 1e-4, f"{name}: {worst}"


BINARY = {
    "add": (dc.add, (5,), (5,)),
    "sub": (dc.sub, (5,), (5,)),
    "mul": (dc.mul, (5,), (5,)),
    "matmul": (dc.matmul, (2, 4, 4), (2, 4, 4)),
    "matmul_shared": (dc.matmul, (3, 4), (4, 2)),
    "matvec": (dc.matvec, (3, 4, 4), (3, 4)),
    "concat": (lambda a, b: dc.concat([a, b], axis=-1), (2, 3), (2, 5)),
    "tril_assemble": (dc.tril_assemble, (2, 4), (2, 6)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name):
    op, sa, sb = BINARY[name]
    rng = np.random.default_rng(len(name))
    worst = 0.0
    for _ in range(100):
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        w = rng.normal(size=op(dc.const(a), dc.const(b)).shape)

        def f(lv):
            return dc.sum(dc.mul(op(lv["a"], lv["b"]), dc.const(w)))

        worst = max(worst, dc.grad_check(f, {"a": a, "b": b}).worst)
    assert worst <= 1e-4


def test_affine_gradient(rng):
    x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    out_w = rng.normal(size=(5, 2))
    rep = dc.grad_check(lambda lv: dc.sum(dc.mul(dc.affine(lv["x"], lv["w"], lv["b"]), dc.const(out_w))), {"x": x, "w": w, "b": b})
    assert rep.worst <= 1e-4


def test_evaluate_spot_values():
    assert dc.evaluate(dc.shift(dc.softsign(dc.const(0.0)), 1.0)) == 1.0
    assert dc.evaluate(dc.smooth_l1(dc.sub(dc.const(0.0), dc.const(0.0)))) == 0.0
    assert dc.evaluate(dc.logdet(dc.const(np.eye(4)))) == 0.0


def test_backprop_spot_values():
    x = dc.leaf(0.0)
    dc.backprop(dc.shift(dc.softsign(x), 1.0))
    assert x.grad == 1.0
    v = dc.leaf(np.eye(4))
    dc.backprop(dc.logdet(v))
    np.testing.assert_allclose(v.grad, np.eye(4), atol=1e-15)


def test_evaluate_recomputes_from_leaves():
    x = dc.leaf([1.0, 2.0])
    y = dc.sum(dc.square(x))
    assert y.item() == 5.0
    x.value = np.array([3.0, 4.0])
    assert dc.evaluate(y) == 25.0


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(dc.ShapeError, match=r"\(3,\) and \(4,\)"):
        dc.add(dc.const(np.zeros(3)), dc.const(np.zeros(4)))


def test_backprop_requires_scalar_root():
    with pytest.raises(dc.ShapeError):
        dc.backprop(dc.leaf(np.zeros(3)))


def test_repeated_backprop_accumulates():
    x = dc.leaf(np.array([1.0, -2.0]))
    y = dc.sum(dc.square(x))
    dc.backprop(y)
    dc.backprop(y)
    np.testing.assert_array_equal(x.grad, 2 * 2 * x.value)


def test_backprop_is_linear_over_loss_sums(rng):
    a = rng.normal(size=(4, 4))
    spd = random_spd(rng)

    def parts(x, v):
        return [dc.sum(dc.softplus(x)), dc.logdet(v), dc.trace(dc.matmul(v, v))]

    xs, vs = dc.leaf(a), dc.leaf(spd)
    p = parts(xs, vs)
    dc.backprop(dc.add(dc.add(p[0], p[1]), p[2]))
    summed = (xs.grad.copy(), vs.grad.copy())

    acc_x, acc_v = np.zeros_like(a), np.zeros_like(spd)
    for k in range(3):
        xk, vk = dc.leaf(a), dc.leaf(spd)
        dc.backprop(parts(xk, vk)[k])
        acc_x += xk.grad
        acc_v += vk.grad
    np.testing.assert_allclose(summed[0], acc_x, atol=1e-12, rtol=0)
    np.testing.assert_allclose(summed[1], acc_v, atol=1e-12, rtol=0)


def test_indicator_receives_no_gradient():
    x = dc.leaf(np.array([1.0, -1.0, 2.0]))
    c = dc.leaf(np.array([1.0, 1.0, -1.0]))
    dc.backprop(dc.sum(dc.gate(x, c)))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 0.0])
    np.testing.assert_array_equal(c.grad, [0.0, 0.0, 0.0])


def test_stop_rows_blocks_gradient():
    x = dc.leaf(np.ones((3, 2)))
    y = dc.stop_rows(x, np.array([False, True, False]), np.full((1, 2), 7.0))
    assert y.value[1].tolist() == [7.0, 7.0]
    dc.backprop(dc.sum(y))
    np.testing.assert_array_equal(x.grad, [[1, 1], [0, 0], [1, 1]])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_names_nonfinite_primitive():
    with pytest.raises(dc.NonFiniteError, match="log"):
        dc.grad_check(lambda lv: dc.sum(dc.log(lv["x"])), {"x": np.array([-1.0, 1.0])})


def test_grad_check_reports_each_leaf(rng):
    rep = dc.grad_check(lambda lv: dc.sum(dc.mul(lv["a"], lv["b"])), {"a": rng.normal(size=3), "b": rng.normal(size=3)})
    assert set(rep.max_rel_error) == {"a", "b"}
    assert rep.passed()


def test_graph_or_value_unwraps_arrays():
    @dc.graph_or_value
    def f(x):
        return dc.sum(dc.as_node(x))

    assert f(np.ones(3)) == 3.0
    assert isinstance(f(dc.leaf(np.ones(3))), dc.Node)
