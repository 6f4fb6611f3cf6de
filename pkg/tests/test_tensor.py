import numpy as np
import numpy.testing as npt
import pytest
from scipy.signal import correlate2d

from wxpower import tensor as T

from fd import numeric_grad, max_rel_err

GRAD_TOL = 1e-5


def t64(a, rg=True):
    return T.from_array(a, dtype=np.float64, requires_grad=rg)


# ---------------------------------------------------------------------------
# construction

def test_create_scalar_fill():
    x = T.create([2, 3], 1.5)
    assert x.shape == (2, 3)
    assert x.dtype == np.float32
    npt.assert_array_equal(x.data, np.full((2, 3), 1.5, np.float32))


def test_create_sequence_fill():
    x = T.create([3], [1, 2, 3])
    npt.assert_array_equal(x.data, np.array([1, 2, 3], np.float32))


def test_create_rejects_bad_fill_length():
    with pytest.raises(T.ShapeError):
        T.create([2, 2], [1, 2, 3])


def test_create_rejects_empty_shape():
    with pytest.raises(T.ShapeError):
        T.create([], 0.0)
    with pytest.raises(T.ShapeError):
        T.create([0, 3], 0.0)


def test_from_array_copies():
    src = np.ones((2, 2), np.float32)
    x = T.from_array(src)
    src[0, 0] = 5.0
    assert x.data[0, 0] == 1.0


def test_tensor_rejects_int_dtype():
    with pytest.raises(T.ShapeError):
        T.Tensor(np.ones((2, 2), np.int64))


# ---------------------------------------------------------------------------
# frozen forward values

def test_matmul_value():
    a = T.from_array([[1.0, 2.0]])
    b = T.from_array([[3.0], [4.0]])
    out = T.matmul(a, b)
    npt.assert_allclose(out.data, [[11.0]], atol=1e-6)


def test_conv2d_ones_3x3():
    x = T.create([1, 1, 3, 3], 1.0)
    k = T.create([1, 1, 3, 3], 1.0)
    b = T.create([1], 0.0)
    out = T.conv2d(x, k, b, stride=1, pad=0)
    assert out.shape == (1, 1, 1, 1)
    npt.assert_allclose(out.data, [[[[9.0]]]], atol=1e-6)


def test_avgpool_2x2():
    x = T.from_array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = T.avgpool2d(x, k=2, stride=1)
    npt.assert_allclose(out.data, [[[[2.5]]]], atol=1e-6)


def test_elementwise_values():
    a = T.from_array([[1.0, -2.0], [3.0, 0.0]])
    b = T.from_array([[4.0, 5.0], [6.0, 7.0]])
    npt.assert_allclose(T.add(a, b).data, [[5, 3], [9, 7]])
    npt.assert_allclose(T.sub(a, b).data, [[-3, -7], [-3, -7]])
    npt.assert_allclose(T.mul(a, b).data, [[4, -10], [18, 0]])
    npt.assert_allclose(T.scale(a, -0.5).data, [[-0.5, 1], [-1.5, 0]])
    npt.assert_allclose(T.relu(a).data, [[1, 0], [3, 0]])


def test_relu_idempotent():
    rng = np.random.default_rng(7)
    x = T.from_array(rng.normal(size=(4, 5)))
    once = T.relu(x)
    twice = T.relu(once)
    npt.assert_array_equal(once.data, twice.data)


def test_add_bias_value():
    x = T.from_array([[1.0, 2.0], [3.0, 4.0]])
    b = T.from_array([10.0, 20.0])
    npt.assert_allclose(T.add_bias(x, b).data, [[11, 22], [13, 24]])


def test_reduce_values():
    x = T.from_array([[1.0, 2.0], [3.0, 4.0]])
    npt.assert_allclose(T.reduce_sum(x).data, [10.0])
    npt.assert_allclose(T.reduce_mean(x).data, [2.5])
    npt.assert_allclose(T.reduce_sum(x, axes=0).data, [4.0, 6.0])
    npt.assert_allclose(T.reduce_mean(x, axes=(1,)).data, [1.5, 3.5])
    npt.assert_allclose(T.reduce_max(x, axis=1).data, [2.0, 4.0])


def test_reshape_value_and_invariants():
    x = T.from_array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    y = T.reshape(x, (3, 2))
    npt.assert_allclose(y.data, [[1, 2], [3, 4], [5, 6]])
    with pytest.raises(T.ShapeError):
        T.reshape(x, (4, 2))


# ---------------------------------------------------------------------------
# shape / dtype contract

def test_elementwise_rejects_broadcast():
    a = T.create([2, 3], 1.0)
    b = T.create([3], 1.0)
    with pytest.raises(T.ShapeError):
        T.add(a, b)
    with pytest.raises(T.ShapeError):
        T.mul(a, b)


def test_matmul_rejects_bad_inner_dim():
    with pytest.raises(T.ShapeError):
        T.matmul(T.create([2, 3], 1.0), T.create([2, 3], 1.0))


def test_mixed_dtype_rejected():
    a = T.create([2, 2], 1.0, dtype=np.float32)
    b = T.create([2, 2], 1.0, dtype=np.float64)
    with pytest.raises(T.ShapeError):
        T.add(a, b)


def test_conv2d_shape_errors():
    x = T.create([1, 2, 4, 4], 1.0)
    with pytest.raises(T.ShapeError):  # channel mismatch
        T.conv2d(x, T.create([1, 3, 3, 3], 1.0), T.create([1], 0.0))
    with pytest.raises(T.ShapeError):  # kernel larger than padded input
        T.conv2d(x, T.create([1, 2, 5, 5], 1.0), T.create([1], 0.0))
    with pytest.raises(T.ShapeError):  # bias length
        T.conv2d(x, T.create([2, 2, 3, 3], 1.0), T.create([1], 0.0))


def test_avgpool_window_too_large():
    with pytest.raises(T.ShapeError):
        T.avgpool2d(T.create([1, 1, 2, 2], 1.0), k=3, stride=1)


# ---------------------------------------------------------------------------
# conv/pool against independent references

def conv_ref(x, k, b, stride, pad):
    n, c, h, w = x.shape
    f = k.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    rows = []
    for i in range(n):
        chans = []
        for j in range(f):
            acc = sum(correlate2d(xp[i, q], k[j, q], mode="valid") for q in range(c))
            chans.append(acc[::stride, ::stride] + b[j])
        rows.append(chans)
    return np.array(rows)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 3), (2, 1)])
def test_conv2d_matches_scipy(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(t64(x, False), t64(k, False), t64(b, False), stride=stride, pad=pad)
    npt.assert_allclose(out.data, conv_ref(x, k, b, stride, pad), atol=1e-10)


def test_conv2d_stride2_7x7_stem_shape():
    x = T.create([1, 6, 115, 108], 0.0)
    k = T.create([32, 6, 7, 7], 0.0)
    b = T.create([32], 0.0)
    out = T.conv2d(x, k, b, stride=2, pad=3)
    assert out.shape == (1, 32, 58, 54)


def pool_ref(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = x[:, :, i * stride:i * stride + k,
                                j * stride:j * stride + k].mean(axis=(2, 3))
    return out


@pytest.mark.parametrize("k,stride", [(2, 2), (2, 1), (3, 2), (3, 3)])
def test_avgpool_matches_reference(k, stride):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.normal(size=(2, 3, 7, 8))
    out = T.avgpool2d(t64(x, False), k=k, stride=stride)
    npt.assert_allclose(out.data, pool_ref(x, k, stride), atol=1e-12)


# ---------------------------------------------------------------------------
# backward: frozen example + mechanics

def test_sum_of_squares_gradient():
    x = t64([1.0, 2.0])
    with T.Tape() as tape:
        loss = T.reduce_sum(T.mul(x, x))
        T.backward(tape, T.create([1], 1.0, dtype=np.float64))
    npt.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)


def test_fanout_accumulates():
    x = t64([3.0])
    with T.Tape() as tape:
        y = T.add(x, x)
        T.backward(tape, T.create([1], 1.0, dtype=np.float64))
    npt.assert_allclose(x.grad, [2.0])


def test_unreached_branch_gets_zero_grad():
    x = t64([1.0, 2.0])
    w = t64([3.0, 4.0])
    with T.Tape() as tape:
        T.mul(x, x)            # recorded but not feeding the final op
        T.reduce_sum(T.mul(w, w))
        T.backward(tape, T.create([1], 1.0, dtype=np.float64))
    npt.assert_allclose(x.grad, [0.0, 0.0])
    npt.assert_allclose(w.grad, [6.0, 8.0])


def test_grad_accumulates_across_backward_calls():
    x = t64([1.0, 2.0])
    for _ in range(2):
        with T.Tape() as tape:
            T.reduce_sum(T.mul(x, x))
            T.backward(tape, T.create([1], 1.0, dtype=np.float64))
    npt.assert_allclose(x.grad, [4.0, 8.0])
    T.clear_grads([x])
    assert x.grad is None


def test_backward_seed_shape_checked():
    x = t64([1.0, 2.0])
    with T.Tape() as tape:
        T.mul(x, x)
        with pytest.raises(T.ShapeError):
            T.backward(tape, T.create([1], 1.0, dtype=np.float64))


def test_no_tape_records_nothing():
    x = t64([1.0, 2.0])
    tape = T.Tape()
    T.mul(x, x)  # no active tape
    assert tape.ops == []
    with T.Tape() as t2:
        T.mul(x, x)
    assert len(t2.ops) == 1


def test_nested_tapes_capture_separately():
    x = t64([1.0])
    with T.Tape() as outer:
        T.add(x, x)
        with T.Tape() as inner:
            T.mul(x, x)
        assert len(inner.ops) == 1
    assert len(outer.ops) == 1


def test_untracked_ops_not_recorded():
    a = T.from_array([1.0], dtype=np.float64)  # requires_grad False
    with T.Tape() as tape:
        T.add(a, a)
    assert tape.ops == []


def test_empty_tape_backward_is_noop():
    tape = T.Tape()
    T.backward(tape, T.create([1], 1.0))


# ---------------------------------------------------------------------------
# finite-difference gradient checks (float64, independent oracle)

def check_unary(op_builder, shapes, seeds=range(5), **kw):
    for seed in seeds:
        rng = np.random.default_rng(seed)
        arrays = [rng.normal(size=s) for s in shapes]
        for idx in range(len(arrays)):
            tensors = [t64(a) for a in arrays]
            with T.Tape() as tape:
                out = op_builder(*tensors, **kw)
                loss = T.reduce_sum(out) if out.data.size > 1 or out.data.ndim > 1 else out
                T.backward(tape, T.create(loss.shape, 1.0, dtype=np.float64))
            analytic = tensors[idx].grad

            def f(*arrs):
                ts = [T.from_array(a, dtype=np.float64) for a in arrs]
                o = op_builder(*ts, **kw)
                return float(o.data.sum())

            numeric = numeric_grad(f, arrays, idx)
            assert max_rel_err(analytic, numeric) < GRAD_TOL, (
                f"{op_builder} input {idx} seed {seed}")


def test_grad_add():
    check_unary(T.add, [(3, 4), (3, 4)])


def test_grad_sub():
    check_unary(T.sub, [(3, 4), (3, 4)])


def test_grad_mul():
    check_unary(T.mul, [(3, 4), (3, 4)])


def test_grad_scale():
    check_unary(lambda x: T.scale(x, -1.7), [(3, 4)])


def test_grad_relu():
    # keep values away from 0 so FD does not straddle the kink
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(4, 4))
        a[np.abs(a) < 1e-2] = 0.5
        x = t64(a)
        with T.Tape() as tape:
            T.reduce_sum(T.relu(x))
            T.backward(tape, T.create([1], 1.0, dtype=np.float64))
        numeric = numeric_grad(
            lambda v: float(np.maximum(v, 0).sum()), [a], 0)
        assert max_rel_err(x.grad, numeric) < GRAD_TOL


def test_grad_add_bias():
    check_unary(T.add_bias, [(5, 3), (3,)])


def test_grad_matmul():
    check_unary(T.matmul, [(3, 4), (4, 2)])


def test_grad_linear():
    check_unary(T.linear, [(5, 4), (3, 4), (3,)])


def test_grad_reshape():
    check_unary(lambda x: T.reshape(x, (2, 6)), [(3, 4)])


def test_grad_reduce_sum_axes():
    check_unary(lambda x: T.reduce_sum(x, axes=(1,)), [(3, 4)])
    check_unary(T.reduce_sum, [(2, 3, 2)])


def test_grad_reduce_mean():
    check_unary(lambda x: T.reduce_mean(x, axes=(0, 2)), [(2, 3, 4)])
    check_unary(T.reduce_mean, [(3, 4)])


def test_grad_reduce_max():
    # unique entries so the max is FD-differentiable
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a = rng.permutation(24).astype(np.float64).reshape(2, 3, 4) * 0.37
        x = t64(a)
        with T.Tape() as tape:
            T.reduce_sum(T.reduce_max(x, axis=1))
            T.backward(tape, T.create([1], 1.0, dtype=np.float64))
        numeric = numeric_grad(lambda v: float(v.max(axis=1).sum()), [a], 0)
        assert max_rel_err(x.grad, numeric) < GRAD_TOL


def test_reduce_max_tie_goes_to_first():
    x = t64([[2.0, 2.0, 1.0]])
    with T.Tape() as tape:
        T.reduce_sum(T.reduce_max(x, axis=1))
        T.backward(tape, T.create([1], 1.0, dtype=np.float64))
    npt.assert_allclose(x.grad, [[1.0, 0.0, 0.0]])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 3)])
def test_grad_conv2d(stride, pad):
    for seed in range(3):
        rng = np.random.default_rng(100 * stride + 10 * pad + seed)
        x = rng.normal(size=(2, 2, 5, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        arrays = [x, k, b]
        for idx in range(3):
            ts = [t64(a) for a in arrays]
            with T.Tape() as tape:
                T.reduce_sum(T.conv2d(ts[0], ts[1], ts[2], stride=stride, pad=pad))
                T.backward(tape, T.create([1], 1.0, dtype=np.float64))
            analytic = ts[idx].grad

            def f(xv, kv, bv):
                o = T.conv2d(T.from_array(xv, dtype=np.float64),
                             T.from_array(kv, dtype=np.float64),
                             T.from_array(bv, dtype=np.float64),
                             stride=stride, pad=pad)
                return float(o.data.sum())

            numeric = numeric_grad(f, arrays, idx)
            assert max_rel_err(analytic, numeric) < GRAD_TOL


@pytest.mark.parametrize("k,stride", [(2, 2), (3, 1), (3, 2)])
def test_grad_avgpool(k, stride):
    for seed in range(3):
        rng = np.random.default_rng(10 * k + stride + seed)
        a = rng.normal(size=(2, 2, 6, 5))
        x = t64(a)
        with T.Tape() as tape:
            T.reduce_sum(T.avgpool2d(x, k=k, stride=stride))
            T.backward(tape, T.create([1], 1.0, dtype=np.float64))

        def f(v):
            o = T.avgpool2d(T.from_array(v, dtype=np.float64), k=k, stride=stride)
            return float(o.data.sum())

        numeric = numeric_grad(f, [a], 0)
        assert max_rel_err(x.grad, numeric) < GRAD_TOL


def test_grad_composite_chain():
    # linear -> relu -> linear -> mean, all inputs checked together
    for seed in range(3):
        rng = np.random.default_rng(seed)
        arrays = [rng.normal(size=s) for s in [(4, 3), (5, 3), (5,), (2, 5), (2,)]]

        def build(x, w1, b1, w2, b2):
            return T.reduce_mean(T.linear(T.relu(T.linear(x, w1, b1)), w2, b2))

        for idx in range(len(arrays)):
            ts = [t64(a) for a in arrays]
            with T.Tape() as tape:
                build(*ts)
                T.backward(tape, T.create([1], 1.0, dtype=np.float64))

            def f(*arrs):
                o = build(*[T.from_array(a, dtype=np.float64) for a in arrs])
                return o.item()

            numeric = numeric_grad(f, arrays, idx)
            assert max_rel_err(ts[idx].grad, numeric) < GRAD_TOL
