import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmuq import autodiff as ad
from dmuq.errors import UsageError

from _oracles import central_diff, rel_error


def check_grad(fn, *arrays, tol=1e-6, eps=1e-6):
    """Compare reverse-mode gradients of scalar ``fn`` with central differences."""
    params = [ad.parameter(np.array(a, dtype=np.float64)) for a in arrays]
    out = fn(*params)
    out.backward()
    for k, p in enumerate(params):
        def f(x, k=k):
            vals = [q.data if j != k else x for j, q in enumerate(params)]
            return fn(*[ad.as_tensor(v) for v in vals]).item()

        numeric = central_diff(f, p.data, eps)
        assert rel_error(p.grad, numeric) < tol, (k, p.grad, numeric)


UNARY = {
    "exp": ad.exp,
    "log": lambda t: ad.log(ad.exp(t) + 1.0),
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "softplus": ad.softplus,
    "clip": lambda t: ad.clip(t, -0.5, 0.5),
    "smooth_l1": lambda t: ad.smooth_l1(t, 0.7),
    "power": lambda t: ad.power(t * t + 1.0, 1.5),
    "neg": ad.neg,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name, rng):
    op = UNARY[name]
    for _ in range(5):
        x = rng.normal(size=(3, 4))
        if name in ("relu", "clip", "smooth_l1"):
            # keep away from kinks
            x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x + 0.2, x)
            x = np.where(np.abs(x) < 0.05, 0.3, x)
            x = np.where(np.abs(np.abs(x) - 0.7) < 0.05, x + 0.2, x)
        check_grad(lambda t: (op(t) * ad.as_tensor(np.arange(12.0).reshape(3, 4))).sum(), x)


@pytest.mark.parametrize(
    "fn",
    [ad.add, ad.sub, ad.mul, lambda a, b: ad.div(a, ad.exp(b))],
    ids=["add", "sub", "mul", "div"],
)
def test_binary_ops_with_broadcasting(fn, rng):
    for shape_a, shape_b in [((3, 4), (3, 4)), ((3, 4), (4,)), ((2, 1, 4), (3, 1)), ((), (2, 3))]:
        a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
        check_grad(lambda x, y: (fn(x, y) ** 2).sum(), a, b)


def test_reductions_and_shape_ops(rng):
    x = rng.normal(size=(2, 3, 4))
    check_grad(lambda t: (ad.tsum(t, axis=1) ** 2).sum(), x)
    check_grad(lambda t: (ad.mean(t, axis=(0, 2), keepdims=True) ** 2).sum(), x)
    check_grad(lambda t: (ad.reshape(t, (6, 4)) @ ad.as_tensor(np.ones((4, 2)))).sum() ** 2, x)
    check_grad(lambda t: (ad.transpose(t, (2, 0, 1)) ** 3).sum(), x)
    weights = ad.as_tensor(rng.normal(size=(2, 4, 3)))
    check_grad(lambda t: (ad.swap_last(t) * weights).sum(), x)
    check_grad(lambda t: (ad.max_reduce(t, axis=0) ** 2).sum(), x)


def test_indexing_concat_stack(rng):
    x = rng.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4])
    check_grad(lambda t: (ad.getitem(t, idx) ** 2).sum(), x)
    check_grad(lambda t: (t[1:4, ::2] ** 2).sum(), x)
    check_grad(lambda a, b: (ad.concat([a, b], axis=1) ** 2).sum(), x, rng.normal(size=(5, 2)))
    check_grad(lambda a, b: (ad.stack([a, b], axis=0) ** 3).sum(), x, rng.normal(size=(5, 3)))


def test_matmul_and_affine(rng):
    check_grad(lambda a, b: ((a @ b) ** 2).sum(), rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))
    check_grad(lambda a, b: ((a @ b) ** 2).sum(), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2)))
    check_grad(
        lambda x, w, b: (ad.tanh(ad.affine(x, w, b))).sum(),
        rng.normal(size=(5, 3)),
        rng.normal(size=(3, 2)),
        rng.normal(size=2),
    )


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_finite_differences(stride, padding, rng):
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    weights = rng.normal(size=ad.conv2d(ad.as_tensor(x), ad.as_tensor(w), stride=stride, padding=padding).shape)
    check_grad(lambda x_, w_, b_: (ad.conv2d(x_, w_, b_, stride, padding) * ad.as_tensor(weights)).sum(), x, w, b)


def test_conv2d_against_direct_loops(rng):
    x = rng.normal(size=(1, 4, 5, 2))
    w = rng.normal(size=(3, 2, 3, 3))
    out = ad.conv2d(ad.as_tensor(x), ad.as_tensor(w), stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 4, 5, 3))
    for i in range(4):
        for j in range(5):
            for o in range(3):
                ref[0, i, j, o] = np.sum(xp[0, i : i + 3, j : j + 3, :] * w[o].transpose(1, 2, 0))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_non_scalar_root_is_a_usage_error():
    x = ad.parameter(np.ones(3))
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_shared_subexpression_visited_once():
    # y = u * u + u with u = 3x: dy/dx = 3 (2u + 1)
    x = ad.parameter(np.array(2.0))
    u = x * 3.0
    y = u * u + u
    calls = []
    original = u._backward_fn
    u._backward_fn = lambda g: (calls.append(1), original(g))[1]
    y.backward()
    assert len(calls) == 1
    assert x.grad == pytest.approx(3 * (2 * 6 + 1))


def test_gradients_accumulate_across_calls():
    x = ad.parameter(np.array([1.0, 2.0]))
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None or not np.any(x.grad)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(1, 3), min_size=1, max_size=3),
    st.integers(0, 2**31 - 1),
)
def test_unbroadcast_restores_shape(shape, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    target = tuple(1 if rng.random() < 0.5 else s for s in shape)
    g = rng.normal(size=(2,) + shape)
    out = ad.unbroadcast(g, target)
    assert out.shape == target
    assert out.sum() == pytest.approx(g.sum())
