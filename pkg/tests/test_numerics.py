import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sceneforge import numerics as nx
from sceneforge.numerics import (
    ContractError,
    DimensionError,
    NumericError,
    ParameterStore,
    RegistryError,
    Tensor,
    finite_diff_check,
    primitive_forward,
)
from tests.oracles import layer_norm_direct

shapes = st.lists(st.integers(1, 8), min_size=1, max_size=3).map(tuple)
finite = st.floats(-5, 5, allow_nan=False, width=64)


def test_gelu_at_zero():
    assert primitive_forward("gelu", [[0.0]]).data.tolist() == [0.0]


def test_softmax_uniform_row():
    out = primitive_forward("softmax_rows", [[[0.0, 0.0, 0.0, 0.0]]])
    assert out.data.tolist() == [[0.25, 0.25, 0.25, 0.25]]


def test_layer_norm_two_values():
    out = primitive_forward("layer_norm_lastdim", [[1.0, 3.0]])
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-4)


def test_dropout_eval_is_identity(rng):
    x = rng.normal(size=(3, 5))
    out = primitive_forward("dropout", [x], mode="eval", keep_prob=0.5)
    assert np.array_equal(out.data, x)


def test_dropout_train_zeroes_and_rescales():
    x = np.ones((200, 50))
    out = primitive_forward("dropout", [x], mode="train", keep_prob=0.5, rng=np.random.default_rng(3)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs((out == 0).mean() - 0.5) < 0.02


def test_primitive_errors():
    with pytest.raises(DimensionError):
        primitive_forward("add", [np.ones((2, 3)), np.ones((4, 5))])
    with pytest.raises(NumericError):
        primitive_forward("gelu", [[np.nan]])
    with pytest.raises(ContractError):
        primitive_forward("tanh", [[1.0]])


def test_linear_examples():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert nx.linear(x, Tensor([[5.0, 6.0]])).data.tolist() == [[17.0], [39.0]]
    y = nx.linear(x, Tensor(np.zeros((2, 2))), Tensor([7.0, 7.0]))
    assert y.data.tolist() == [[7.0, 7.0], [7.0, 7.0]]
    assert np.array_equal(nx.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x.data)
    with pytest.raises(DimensionError):
        nx.linear(x, Tensor(np.ones((3, 3))))


def test_backward_product_rule():
    x = Tensor(3.0, requires_grad=True)
    y = Tensor(4.0, requires_grad=True)
    (x * y).backward()
    assert x.grad.item() == 4.0 and y.grad.item() == 3.0


def test_backward_accumulates_and_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nx.sum(nx.mul(x, x)).backward()
    nx.sum(nx.mul(x, x)).backward()
    assert x.grad.tolist() == [4.0, 8.0]
    with pytest.raises(ContractError):
        nx.mul(x, x).backward()


def test_constant_root_gives_zero_grads():
    store = ParameterStore(0)
    store.gaussian_init("w", (3,))
    store.zero_grad()
    Tensor(5.0).backward()
    assert not store["w"].grad.any()
    assert finite_diff_check(lambda s: Tensor(1.0), store) == 0.0


def test_finite_diff_linear_regression():
    rng = np.random.default_rng(0)
    store = ParameterStore(0, init_std=0.5)
    store.gaussian_init("w", (1, 4))
    store.gaussian_init("b", (1,), bias=True)
    x, y = Tensor(rng.normal(size=(10, 4))), Tensor(rng.normal(size=(10, 1)))

    def loss(s):
        r = nx.sub(nx.linear(x, s["w"], s["b"]), y)
        return nx.mean(nx.mul(r, r))

    assert finite_diff_check(loss, store) < 1e-4


def test_finite_diff_two_layer_ce():
    from sceneforge.objectives import multilabel_ce

    rng = np.random.default_rng(0)
    store = ParameterStore(0, init_std=0.5)
    for name, dims in (("w1", (8, 5)), ("w2", (6, 8))):
        store.gaussian_init(name, dims)
    x = Tensor(rng.normal(size=(3, 5)))
    pos = rng.random((3, 6)) < 0.4

    def loss(s):
        return multilabel_ce(nx.linear(nx.gelu(nx.linear(x, s["w1"])), s["w2"]), pos)

    assert finite_diff_check(loss, store) < 1e-4


def test_finite_diff_detects_nondeterminism():
    store = ParameterStore(0)
    store.gaussian_init("w", (2,))
    gen = np.random.default_rng(1)
    with pytest.raises(ContractError):
        finite_diff_check(lambda s: nx.sum(nx.mul(s["w"], Tensor(gen.normal(size=2)))), store)


def test_gaussian_init_contract():
    a, b = ParameterStore(7), ParameterStore(7)
    for s in (a, b):
        s.gaussian_init("w", (5, 3))
        s.gaussian_init("bias", (3,), bias=True)
    assert np.array_equal(a["w"].data, b["w"].data)
    assert not a["bias"].data.any()
    with pytest.raises(RegistryError):
        a.gaussian_init("w", (1,))


def test_gaussian_init_statistics():
    w = nx.gaussian_init(ParameterStore(0), "big", (768, 768)).data
    n = w.size
    assert abs(w.mean()) < 3 * 0.02 / np.sqrt(n)
    assert abs(w.std() - 0.02) < 0.1 * 0.02


def test_store_iterates_sorted():
    s = ParameterStore(0)
    for name in ("zeta", "alpha", "mid"):
        s.gaussian_init(name, (1,))
    assert list(s) == ["alpha", "mid", "zeta"]


@given(arrays(np.float64, shapes, elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = nx.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)
    assert ((out > 0) & (out < 1)).all() or x.shape[-1] == 1


@given(arrays(np.float64, shapes, elements=finite))
def test_layer_norm_moments(x):
    out = nx.layer_norm(Tensor(x)).data
    np.testing.assert_allclose(out, layer_norm_direct(x), atol=1e-12)
    spread = x.var(-1) > 1e-2
    if x.shape[-1] > 1 and spread.any():
        assert np.abs(out.mean(-1)[spread]).max() < 1e-5
        assert np.abs(out.var(-1)[spread] - 1).max() < 1e-3


@given(st.lists(arrays(np.float64, st.tuples(st.just(3), st.integers(1, 4)), elements=finite), min_size=1, max_size=4))
def test_concat_then_slice_recovers(parts):
    out = nx.concat([Tensor(p) for p in parts], axis=-1).data
    start = 0
    for p in parts:
        assert np.array_equal(out[:, start : start + p.shape[1]], p)
        start += p.shape[1]


PRIMITIVE_CASES = {
    "gelu": lambda t: nx.gelu(t),
    "softmax": lambda t: nx.softmax(t, axis=-1),
    "layer_norm": lambda t: nx.layer_norm(t),
    "add": lambda t: nx.add(t, nx.scale(t, 0.3)),
    "mul": lambda t: nx.mul(t, t),
    "scale": lambda t: nx.scale(t, -1.7),
    "sqrt": lambda t: nx.sqrt(nx.add(nx.mul(t, t), Tensor(1.0))),
    "concat": lambda t: nx.concat([t, nx.scale(t, 2.0)], axis=-1),
    "transpose": lambda t: nx.transpose(t, tuple(reversed(range(t.data.ndim)))),
    "take": lambda t: nx.take(t, [0, 0, t.shape[0] - 1], axis=0),
    "log1p_sum_exp": lambda t: nx.log1p_sum_exp(t, np.indices(t.shape).sum(0) % 2 == 0),
    "dropout_eval": lambda t: nx.dropout(t, 0.5, None, train=False),
}


@pytest.mark.parametrize("kind", sorted(PRIMITIVE_CASES))
@given(dims=shapes, seed=st.integers(0, 2**16))
def test_primitive_gradients(kind, dims, seed):
    r = np.random.default_rng(seed)
    store = ParameterStore(0)
    store.register("x", r.normal(size=dims))
    probe = Tensor(r.normal(size=PRIMITIVE_CASES[kind](Tensor(np.ones(dims))).shape))
    err = finite_diff_check(lambda s: nx.sum(nx.mul(PRIMITIVE_CASES[kind](s["x"]), probe)), store, samples_per_param=4)
    assert err < 1e-4


def test_matmul_and_linear_gradients():
    r = np.random.default_rng(0)
    store = ParameterStore(0)
    store.register("a", r.normal(size=(2, 3, 4)))
    store.register("b", r.normal(size=(4, 5)))
    store.register("bias", r.normal(size=5))
    probe = Tensor(r.normal(size=(2, 3, 5)))

    def loss(s):
        return nx.sum(nx.mul(nx.add(nx.matmul(s["a"], s["b"]), nx.linear(s["a"], nx.transpose(s["b"], (1, 0)), s["bias"])), probe))

    assert finite_diff_check(loss, store, samples_per_param=10) < 1e-4


def test_fixed_seed_repeats_bit_exact():
    def run():
        s = ParameterStore(11)
        s.gaussian_init("w", (4, 4))
        s.zero_grad()
        x = Tensor(np.arange(8.0).reshape(2, 4))
        out = nx.sum(nx.gelu(nx.linear(x, s["w"])))
        out.backward()
        return out.item(), s["w"].grad.copy()

    (v1, g1), (v2, g2) = run(), run()
    assert v1 == v2 and np.array_equal(g1, g2)
