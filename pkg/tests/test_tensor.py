import threading

import numpy as np
import pytest

from grcvit.tensor import ParamStore, ShapeError, Tape, TapeError, Tensor, backward, grad_check, ops
from grcvit.tensor.gradcheck import analytic_grads


def leaf(r, shape):
    return Tensor(r.normal(size=shape), requires_grad=True)


def shape_for(r, ndim):
    return tuple(int(x) for x in r.integers(3, 6, size=ndim))


def weighted_sum(out, seed):
    # random projection so every output coordinate matters
    w = np.random.default_rng(seed + 99).normal(size=out.shape)
    return ops.sum_all(ops.mul(out, Tensor(w)))


PRIMITIVES = {
    "add": lambda r: ((leaf(r, (3, 4)), leaf(r, (4,))), lambda a, b: ops.add(a, b)),
    "sub": lambda r: ((leaf(r, (4, 3)), leaf(r, (4, 3))), lambda a, b: ops.sub(a, b)),
    "mul": lambda r: ((leaf(r, (3, 5)), leaf(r, (5,))), lambda a, b: ops.mul(a, b)),
    "scale": lambda r: ((leaf(r, (5,)),), lambda a: ops.scale(a, -1.7)),
    "matmul": lambda r: ((leaf(r, (2, 3, 4)), leaf(r, (4, 5))), lambda a, b: ops.matmul(a, b)),
    "bmm": lambda r: ((leaf(r, (2, 3, 4)), leaf(r, (2, 4, 3))), lambda a, b: ops.matmul(a, b)),
    "linear": lambda r: ((leaf(r, (3, 4)), leaf(r, (4, 5)), leaf(r, (5,))), lambda x, w, b: ops.linear(x, w, b)),
    "permute": lambda r: ((leaf(r, (3, 4, 5)),), lambda a: ops.permute(a, (2, 0, 1))),
    "transpose": lambda r: ((leaf(r, (3, 4)),), lambda a: ops.transpose(a)),
    "reshape": lambda r: ((leaf(r, (3, 4)),), lambda a: ops.reshape(a, (2, 6))),
    "expand": lambda r: ((leaf(r, (4,)),), lambda a: ops.expand(a, (3,))),
    "concat": lambda r: ((leaf(r, (3, 2)), leaf(r, (3, 4))), lambda a, b: ops.concat([a, b], axis=1)),
    "slice": lambda r: ((leaf(r, (5, 4)),), lambda a: a[1:4, ::2]),
    "gather": lambda r: ((leaf(r, (5, 3)),), lambda t: ops.gather(t, [4, 0, 0, 2])),
    "roll": lambda r: ((leaf(r, (4, 5)),), lambda a: ops.roll(a, (1, -2), (0, 1))),
    "softmax": lambda r: ((leaf(r, (3, 5)),), lambda a: ops.softmax(a)),
    "layer_norm": lambda r: ((leaf(r, (3, 5)), leaf(r, (5,)), leaf(r, (5,))), lambda x, w, b: ops.layer_norm(x, w, b)),
    "gelu": lambda r: ((leaf(r, (4, 3)),), lambda a: ops.gelu(a)),
    "mean": lambda r: ((leaf(r, (3, 4, 5)),), lambda a: ops.mean(a, axis=1)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_100_seeds(name):
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        inputs, fn = PRIMITIVES[name](r)
        worst = max(worst, grad_check(lambda *xs: weighted_sum(fn(*xs), seed), list(inputs), h=1e-5))
    assert worst < 1e-6


def test_cross_entropy_gradient_100_seeds():
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        logits = leaf(r, (4, 3))
        labels = r.integers(0, 3, size=4)
        worst = max(worst, grad_check(lambda x: ops.cross_entropy(x, labels), [logits]))
    assert worst < 1e-6


COMPOSITES = [
    lambda a, b, w, c: ops.sum_all(ops.softmax(ops.matmul(a, b))),
    lambda a, b, w, c: ops.sum_all(ops.gelu(ops.add(ops.matmul(a, b), w))),
    lambda a, b, w, c: ops.mean(ops.mean(ops.layer_norm(ops.mul(a, b), w, c), axis=1), axis=0),
    lambda a, b, w, c: ops.sum_all(ops.mul(ops.softmax(a), ops.transpose(b))),
    lambda a, b, w, c: ops.cross_entropy(ops.gelu(ops.matmul(a, b)), [0, 2, 1]),
]


@pytest.mark.parametrize("k", range(len(COMPOSITES)))
def test_composites_match_finite_differences(k):
    for seed in range(20):
        r = np.random.default_rng(seed)
        xs = [leaf(r, (3, 3)), leaf(r, (3, 3)), leaf(r, (3,)), leaf(r, (3,))]
        assert grad_check(COMPOSITES[k], xs, h=1e-4) < 1e-6


def test_deep_chain_error_is_truncation():
    # a steeper 6-op chain: the discrepancy must shrink as h^2
    r = np.random.default_rng(5)
    xs = [leaf(r, (3, 3)), leaf(r, (3, 3)), leaf(r, (3,)), leaf(r, (3,))]
    weights = Tensor(np.arange(9.0).reshape(3, 3))

    def f(a, b, w, bias):
        h = ops.gelu(ops.matmul(a, b))
        return ops.sum_all(ops.mul(ops.softmax(ops.layer_norm(h, w, bias)), weights))

    e4, e5 = grad_check(f, xs, h=1e-4), grad_check(f, xs, h=1e-5)
    assert e5 < 1e-6
    assert 50 < e4 / e5 < 200


def test_matmul_example():
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert out.data.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_softmax_singleton_and_layer_norm_constant():
    x = Tensor(np.array([[3.7], [-2.0]]), requires_grad=True)
    with Tape() as tape:
        y = ops.softmax(x)
        loss = ops.sum_all(ops.mul(y, Tensor(np.array([[2.0], [5.0]]))))
    assert np.all(y.data == 1.0)
    tape.backward(loss)
    assert np.all(x.grad == 0.0)
    ln = ops.layer_norm(Tensor(np.full((2, 4), 3.3)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(ln.data == 0.0)


def test_softmax_rows_sum_to_one_for_large_logits():
    r = np.random.default_rng(0)
    for scale in (1.0, 1e3, 1e6, 1e300):
        y = ops.softmax(Tensor(r.normal(size=(10, 7)) * scale)).data
        assert np.all(y >= 0)
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_reshape_permute_roundtrips():
    x = np.random.default_rng(1).normal(size=(2, 3, 4))
    back = ops.reshape(ops.reshape(Tensor(x), (6, 4)), (2, 3, 4)).data
    assert np.array_equal(back, x)
    p = ops.permute(ops.permute(Tensor(x), (2, 0, 1)), (1, 2, 0)).data
    assert np.array_equal(p, x)


def test_backward_basics():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        s = ops.sum_all(p)
    tape.backward(s)
    assert p.grad.tolist() == [1.0, 1.0, 1.0]
    p.grad = None
    with Tape():
        q = ops.scale(ops.sum_all(ops.mul(p, p)), 0.5)
    backward(q)
    assert np.array_equal(p.grad, p.data)


def test_backward_errors():
    p = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        v = ops.scale(p, 2.0)
        s = ops.sum_all(v)
    with pytest.raises(TapeError):
        tape.backward(v)
    tape.backward(s)
    with pytest.raises(TapeError):
        tape.backward(s)
    with pytest.raises(TapeError):
        with tape:
            pass
    other = Tape()
    with Tape():
        s2 = ops.sum_all(p)
    with pytest.raises(TapeError):
        other.backward(s2)


def test_unreached_parameter_gets_zero():
    store = ParamStore(np.float64)
    a = store.add("a", np.ones(2))
    store.add("dead", np.ones(3))
    fn = lambda a, d: ops.sum_all(ops.mul(a, a))
    grads = analytic_grads(fn, store.tensors())
    assert np.array_equal(grads[1], np.zeros(3))
    assert grad_check(fn, store.tensors()) < 1e-9
    store.zero_grad()
    with Tape() as tape:
        loss = ops.sum_all(a)
    tape.backward(loss)
    g = store.grads()
    assert g["dead"].shape == (3,) and not g["dead"].any()


def test_linear_function_gradcheck_is_exact():
    x = Tensor(np.random.default_rng(2).normal(size=(4, 3)), requires_grad=True)
    w = np.random.default_rng(3).normal(size=(4, 3))
    assert grad_check(lambda x: ops.sum_all(ops.mul(x, Tensor(w))), [x]) <= 1e-10


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    assert "matmul" in str(info.value) and "(2, 3)" in str(info.value) and "(4, 2)" in str(info.value)
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))
    with pytest.raises(ShapeError):
        ops.softmax(Tensor(np.ones((2, 0))))
    with pytest.raises(IndexError):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(IndexError):
        ops.gather(Tensor(np.zeros((2, 3))), [2])
    with pytest.raises(TypeError):
        Tensor(np.zeros(4))[np.array([0, 1])]


def test_tapes_are_thread_confined():
    results = {}

    def work(k):
        p = Tensor(np.full(3, float(k)), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(p, p))
        tape.backward(loss)
        results[k] = p.grad

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(1, 5):
        assert np.array_equal(results[k], np.full(3, 2.0 * k))


def test_no_recording_outside_tape():
    p = Tensor(np.ones(2), requires_grad=True)
    out = ops.sum_all(p)
    with pytest.raises(TapeError):
        backward(out)


def test_param_store_roundtrip_bit_exact(tmp_path):
    r = np.random.default_rng(5)
    store = ParamStore()
    store.add("w", r.normal(size=(3, 4)))
    store.add("b", r.normal(size=4))
    store.add("s", np.array(2.5))
    store.save(tmp_path / "p", header={"k": 1})
    loaded, header = ParamStore.load(tmp_path / "p")
    assert header == {"k": 1} and list(loaded) == ["w", "b", "s"]
    for name, t in store.items():
        assert loaded[name].data.dtype == np.float32
        assert loaded[name].data.tobytes() == t.data.tobytes()
    assert (tmp_path / "p.bin").stat().st_size == 4 * 17
    with pytest.raises(KeyError):
        store.add("w", np.zeros(1))


def test_param_store_float64_roundtrip(tmp_path):
    store = ParamStore(np.float64)
    store.add("x", np.array([1 / 3, np.pi]))
    store.save(tmp_path / "d")
    loaded, _ = ParamStore.load(tmp_path / "d")
    assert loaded["x"].data.tobytes() == store["x"].data.tobytes()
