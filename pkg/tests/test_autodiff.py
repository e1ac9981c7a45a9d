import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cagsplat import autodiff as ad
from cagsplat.errors import ContractError, DimensionError

from conftest import numeric_grad, rel_err


def test_matmul_examples():
    a = ad.Tensor(np.eye(2))
    b = ad.Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal((a @ b).data, [[3, 4], [5, 6]])
    np.testing.assert_array_equal(ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_grad_is_ones_column():
    a = ad.Parameter(np.random.default_rng(0).normal(size=(3, 2)), "a")
    b = ad.Tensor([[1.0], [1.0]])
    ad.backward(ad.sum_(a @ b))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)))
    num = numeric_grad(lambda: (a.data @ b.data).sum(), a.data, 1e-6)
    assert rel_err(a.grad, num) < 1e-8


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(ad.Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)
    assert ad.softmax(ad.Tensor([[5.0]])).data[0, 0] == 1.0
    out = ad.softmax(ad.Tensor([[1000.0, 1000.1]])).data
    assert np.all(np.isfinite(out))
    assert abs(out.sum() - 1.0) < 1e-12
    # log-domain oracle: p1 = 1 / (1 + e^{0.1})
    assert abs(out[0, 0] - 1.0 / (1.0 + np.exp(0.1))) < 1e-12


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        ad.softmax(ad.Tensor(np.zeros((3, 0))))


@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)), st.permutations(list(range(6))))
def test_softmax_sums_and_permutation_equivariance(x, perm):
    y = ad.softmax(ad.Tensor(x), axis=1).data
    assert np.all(y > 0) or np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    yp = ad.softmax(ad.Tensor(x[:, perm]), axis=1).data
    np.testing.assert_array_equal(yp, y[:, perm])


def test_backward_examples():
    p = ad.Parameter([1.0, 2.0, 3.0], "p")
    ad.backward(ad.sum_(ad.square(p)))
    np.testing.assert_array_equal(p.grad, [2.0, 4.0, 6.0])
    q = ad.Parameter([1.0, 2.0], "q")
    loss = ad.add(ad.scale(ad.sum_(q), 0.0), ad.Tensor(3.0))
    ad.backward(loss)
    np.testing.assert_array_equal(q.grad, [0.0, 0.0])


def test_backward_needs_scalar():
    p = ad.Parameter(np.ones(3), "p")
    with pytest.raises(ContractError):
        ad.backward(ad.scale(p, 2.0))


def test_accumulation_is_exactly_additive():
    rng = np.random.default_rng(1)
    w = ad.Parameter(rng.normal(size=(4, 3)), "w")
    x = ad.Tensor(rng.normal(size=(5, 4)))
    loss = ad.mean(ad.huber(ad.relu(x @ w), 0.1))
    ad.backward(loss)
    once = w.grad.copy()
    ad.backward(loss)
    np.testing.assert_array_equal(w.grad, 2 * once)
    w.zero_grad()
    assert not w.grad.any()


def test_parameter_grad_shape_tracks_value():
    p = ad.Parameter(np.zeros((2, 5)), "p")
    assert p.grad.shape == p.data.shape


def test_no_implicit_broadcasting():
    with pytest.raises(DimensionError):
        ad.add(np.ones((3, 2)), np.ones(2))
    b = ad.Parameter(np.array([1.0, 2.0]), "b")
    out = ad.repeat_rows(b, 3)
    assert out.shape == (3, 2)
    ad.backward(ad.sum_(out))
    np.testing.assert_array_equal(b.grad, [3.0, 3.0])


def _unary_ops():
    return {
        "relu": lambda t: ad.relu(t),
        "exp": lambda t: ad.exp(t),
        "sigmoid": lambda t: ad.sigmoid(t),
        "abs": lambda t: ad.abs_(t),
        "square": lambda t: ad.square(t),
        "huber": lambda t: ad.huber(t, 0.1),
        "softmax0": lambda t: ad.softmax(t, axis=0),
        "softmax1": lambda t: ad.softmax(t, axis=1),
        "transpose": lambda t: ad.transpose(t),
        "reshape": lambda t: ad.reshape(t, (2, 12)),
        "index": lambda t: ad.index_select(t, np.array([3, 0, 3, 1])),
        "getitem": lambda t: t[:, 1:3],
        "normalize_rows": lambda t: ad.normalize_rows(t),
        "avg_pool2": lambda t: ad.avg_pool2(ad.reshape(t, (2, 4, 3))),
        "diff0": lambda t: ad.diff(t, 0),
        "diff1": lambda t: ad.diff(t, 1),
        "mean": lambda t: ad.mean(t),
        "scale": lambda t: ad.scale(t, -1.7),
        "bmv": lambda t: ad.bmv(np.arange(4 * 6 * 6, dtype=float).reshape(4, 6, 6) / 50.0, t),
    }


@pytest.mark.parametrize("name", sorted(_unary_ops()))
def test_unary_vjp_matches_finite_differences(name):
    op = _unary_ops()[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for trial in range(100):
        x = ad.Parameter(rng.normal(size=(4, 6)), "x")
        # keep samples off the kinks of relu / abs / huber
        x.data[np.abs(x.data) < 1e-3] += 0.01
        x.data[np.abs(np.abs(x.data) - 0.1) < 1e-3] += 0.01
        w = rng.normal(size=op(ad.Tensor(x.data)).shape)
        loss = ad.sum_(ad.mul(op(x), ad.Tensor(w)))
        ad.backward(loss)
        num = numeric_grad(lambda: float((op(ad.Tensor(x.data)).data * w).sum()), x.data)
        worst = max(worst, rel_err(x.grad, num))
    assert worst < 1e-4


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "concat0", "concat1"])
def test_binary_vjp_matches_finite_differences(name):
    ops = {
        "add": (lambda a, b: ad.add(a, b), (3, 4), (3, 4)),
        "sub": (lambda a, b: ad.sub(a, b), (3, 4), (3, 4)),
        "mul": (lambda a, b: ad.mul(a, b), (3, 4), (3, 4)),
        "matmul": (lambda a, b: ad.matmul(a, b), (3, 4), (4, 2)),
        "concat0": (lambda a, b: ad.concat([a, b], axis=0), (3, 4), (2, 4)),
        "concat1": (lambda a, b: ad.concat([a, b], axis=1), (3, 4), (3, 2)),
    }
    op, sa, sb = ops[name]
    rng = np.random.default_rng(7)
    for _ in range(100):
        a = ad.Parameter(rng.normal(size=sa), "a")
        b = ad.Parameter(rng.normal(size=sb), "b")
        w = rng.normal(size=op(ad.Tensor(a.data), ad.Tensor(b.data)).shape)
        ad.backward(ad.sum_(ad.mul(op(a, b), ad.Tensor(w))))

        def f():
            return float((op(ad.Tensor(a.data), ad.Tensor(b.data)).data * w).sum())

        assert rel_err(a.grad, numeric_grad(f, a.data)) < 1e-4
        assert rel_err(b.grad, numeric_grad(f, b.data)) < 1e-4


def test_attention_mlp_graph_gradcheck():
    rng = np.random.default_rng(3)
    pe = ad.Tensor(rng.normal(size=(6, 5)))
    tok = ad.Tensor(rng.normal(size=(4, 3)))
    wq = ad.Parameter(rng.normal(size=(5, 8)), "wq")
    wk = ad.Parameter(rng.normal(size=(3, 8)), "wk")
    wv = ad.Parameter(rng.normal(size=(3, 4)), "wv")
    w1 = ad.Parameter(rng.normal(size=(9, 7)), "w1")
    b1 = ad.Parameter(rng.normal(size=7), "b1")

    def graph():
        att = ad.softmax(ad.scale((pe @ wq) @ (tok @ wk).T, 1 / np.sqrt(8)), axis=1)
        h = ad.concat([att @ (tok @ wv), pe], axis=1) @ w1 + ad.repeat_rows(b1, 6)
        return ad.mean(ad.huber(ad.relu(h), 0.1))

    ad.backward(graph())
    for p in (wq, wk, wv, w1, b1):
        assert rel_err(p.grad, numeric_grad(lambda: graph().item(), p.data)) < 1e-4, p.name


def test_precision_modes():
    ad.set_precision("fast")
    assert ad.Tensor([1.0]).data.dtype == np.float32
    ad.set_precision("verify")
    assert ad.Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        ad.set_precision("half")
