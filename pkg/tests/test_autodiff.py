import numpy as np
import pytest

from embmmt import autodiff as ad
from embmmt.autodiff import Tensor
from embmmt.errors import ContractError, DimensionError


def check_grad(fn, inputs, seed=0):
    """Compare backward() with central differences for loss = sum(fn(*inputs) * R)."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    weight = rng.normal(size=out.shape)
    ad.backward(ad.sum_(out * weight))
    errors = []
    for t in tensors:
        arrays = [u.data for u in tensors]

        def f():
            with ad.no_grad():
                return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weight))

        numeric = ad.numerical_grad(f, t.data)
        errors.append(ad.relative_error(t.grad, numeric))
    return max(errors)


UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "neg": ad.neg,
    "softmax0": lambda x: ad.softmax(x, axis=0),
    "softmax1": lambda x: ad.softmax(x, axis=-1),
    "mean0": lambda x: ad.mean(x, axis=0),
    "mean_all": lambda x: ad.mean(x),
    "sum1": lambda x: ad.sum_(x, axis=-1, keepdims=True),
    "transpose": lambda x: ad.transpose(x),
    "reshape": lambda x: ad.reshape(x, (-1,)),
    "getitem": lambda x: x[:, 1:],
    "dropout_eval": lambda x: ad.dropout(x, 0.3, False),
}

BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, b * b + 1.0),
    "concat0": lambda a, b: ad.concat([a, b], axis=0),
    "concat1": lambda a, b: ad.concat([a, b], axis=1),
    "stack": lambda a, b: ad.stack([a, b], axis=1),
}


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 5, size=2))
    assert check_grad(UNARY[name], [rng.normal(size=shape)], seed) <= 1e-5


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 5, size=2))
    a, b = rng.normal(size=shape), rng.normal(size=shape)
    assert check_grad(BINARY[name], [a, b], seed) <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_matmul_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n, k, m = rng.integers(1, 5, size=3)
    assert check_grad(ad.matmul, [rng.normal(size=(n, k)), rng.normal(size=(k, m))], seed) <= 1e-5
    assert check_grad(ad.matmul, [rng.normal(size=(3, n, k)), rng.normal(size=(k, m))], seed) <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_broadcast_and_lookup_gradcheck(seed):
    rng = np.random.default_rng(seed)
    assert check_grad(ad.add, [rng.normal(size=(4, 3)), rng.normal(size=(3,))], seed) <= 1e-5
    ids = rng.integers(0, 6, size=(2, 5))
    assert check_grad(lambda t: ad.embedding_lookup(t, ids), [rng.normal(size=(6, 3))], seed) <= 1e-5
    idx = np.array([3, 0, 2])
    assert check_grad(lambda t: ad.scatter(t, idx, (5,)), [rng.normal(size=3)], seed) <= 1e-5
    x = rng.uniform(0.5, 2.0, size=(3, 3))
    assert check_grad(ad.log, [x], seed) <= 1e-5
    assert check_grad(ad.sqrt, [x], seed) <= 1e-5


def test_relu_away_from_kink():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 5))
    x[np.abs(x) < 0.01] = 0.5
    assert check_grad(ad.relu, [x]) <= 1e-5


def test_matmul_identity():
    x = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), x).data, x)


def test_tanh_of_zero():
    np.testing.assert_array_equal(ad.tanh(np.zeros((2, 3))).data, np.zeros((2, 3)))


def test_mean_tanh_linear_gradient():
    rng = np.random.default_rng(3)
    W = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    x = rng.normal(size=(5, 2))
    ad.backward(ad.mean(ad.tanh(ad.matmul(W, x))))

    def f():
        return float(np.mean(np.tanh(W.data @ x)))

    assert ad.relative_error(W.grad, ad.numerical_grad(f, W.data, 1e-5)) <= 1e-5


def test_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_dot_gives_twice_x():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    ad.backward(ad.sum_(x * x))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_two_consumers_accumulate():
    # f = sum(tanh(x) * x + 3x)  =>  f' = (1 - tanh^2) x + tanh + 3
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    y = ad.tanh(x)
    ad.backward(ad.sum_(y * x + 3.0 * x))
    t = np.tanh(x.data)
    np.testing.assert_allclose(x.grad, (1 - t**2) * x.data + t + 3.0, rtol=1e-12)


def test_leaf_grads_accumulate_across_backward_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    ad.backward(ad.sum_(x))
    ad.backward(ad.sum_(x * 2.0))
    np.testing.assert_array_equal(x.grad, np.full(3, 3.0))


def test_tape_is_topological_and_visits_each_node_once():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.tanh(x)
    z = ad.sum_(y * y + y)
    tape = ad.Tape.from_output(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for node in tape.nodes:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_shape_errors_name_primitive_and_shapes():
    with pytest.raises(DimensionError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError, match="add"):
        ad.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(DimensionError, match="concat"):
        ad.concat([np.ones((2, 3)), np.ones((3, 2))], axis=0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.tanh(x)
    assert not y.requires_grad and y._parents == ()


def test_dropout_identity_at_inference():
    x = Tensor(np.ones((4, 4)))
    assert ad.dropout(x, 0.5, training=False) is x


def test_dropout_rate_and_scaling():
    p = 0.3
    out = ad.dropout(Tensor(np.ones(100_000)), p, True, ad.make_rng(0)).data
    zeros = np.mean(out == 0)
    assert p - 0.05 <= zeros <= p + 0.05
    np.testing.assert_allclose(out[out != 0], 1.0 / (1.0 - p))


def test_dropout_needs_rng_in_training():
    with pytest.raises(ContractError):
        ad.dropout(Tensor(np.ones(3)), 0.5, True)


def test_clip_noop_below_threshold():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([0.3, 0.4])  # norm 0.5
    assert ad.clip_grad_norm([p], 1.0) == 1.0
    np.testing.assert_array_equal(p.grad, [0.3, 0.4])


def test_clip_factor_quarter():
    a, b = Tensor(np.zeros(1), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([4.0 * 0.6]), np.array([4.0 * 0.8])  # norm 4
    assert ad.clip_grad_norm([a, b], 1.0) == pytest.approx(0.25)
    assert ad.global_grad_norm([a, b]) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(10))
def test_clip_post_norm(seed):
    rng = np.random.default_rng(seed)
    params = [Tensor(np.zeros(s), requires_grad=True) for s in (3, 4, 5)]
    for p in params:
        p.grad = rng.normal(scale=rng.uniform(0.01, 2), size=p.shape)
    pre = np.sqrt(sum(np.sum(p.grad**2) for p in params))
    ad.clip_grad_norm(params, 1.0)
    post = np.sqrt(sum(np.sum(p.grad**2) for p in params))
    assert abs(post - min(pre, 1.0)) <= 1e-6


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = ad.AdamState.create({"p": p})
    p.grad = np.zeros(2)
    ad.adam_step({"p": p}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_by_hand():
    lr, b1, b2, eps, g = 4e-4, 0.9, 0.999, 1e-8, 0.7
    p = Tensor(np.array([2.0]), requires_grad=True)
    state = ad.AdamState.create({"p": p}, lr=lr, beta1=b1, beta2=b2, eps=eps)
    p.grad = np.array([g])
    ad.adam_step({"p": p}, state)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    assert p.data[0] == pytest.approx(2.0 - lr * m_hat / (np.sqrt(v_hat) + eps), abs=1e-15)


def test_adam_default_lr():
    assert ad.AdamState().lr == 4e-4


def test_adam_shape_drift_rejected():
    p = Tensor(np.zeros(2), requires_grad=True)
    state = ad.AdamState.create({"p": p})
    p.data = np.zeros(3)
    p.grad = np.zeros(3)
    with pytest.raises(ContractError):
        ad.adam_step({"p": p}, state)


def test_adam_skips_params_without_grad():
    p = Tensor(np.ones(2), requires_grad=True)
    state = ad.AdamState.create({"p": p})
    ad.adam_step({"p": p}, state)
    np.testing.assert_array_equal(state.m["p"], 0.0)
    np.testing.assert_array_equal(p.data, 1.0)


def test_determinism():
    def run():
        rng = ad.make_rng(5)
        W = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        state = ad.AdamState.create({"W": W})
        for _ in range(3):
            W.zero_grad()
            out = ad.dropout(ad.tanh(ad.matmul(W, np.ones((3, 2)))), 0.3, True, rng)
            ad.backward(ad.sum_(out))
            ad.adam_step({"W": W}, state)
        return W.data.copy()

    assert run().tobytes() == run().tobytes()


def test_float32_switch():
    ad.set_default_dtype(np.float32)
    try:
        assert Tensor([1.0]).data.dtype == np.float32
    finally:
        ad.set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64
