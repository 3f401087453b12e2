import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from group_attention import functional as F
from group_attention.gradcheck import check_gradient, finite_difference_gradient
from group_attention.rng import make_rng
from group_attention.tensor import (
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    dot,
    matmul,
    mean,
    relu,
    rowdot,
    total,
    transpose,
    weighted_sum,
)

# e / (e + 1) and 1 / (e + 1), evaluated with mpmath at 30 digits
SOFTMAX_1_0 = (0.731058578630004879, 0.268941421369995121)
LN3 = 1.09861228866810969
NEG_LN_1E12 = 27.6310211159285482


def t64(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# --- primitive examples -----------------------------------------------------


def test_matmul_example():
    out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert out.data.tolist() == [[3], [7]]


def test_relu_example():
    assert relu(Tensor([-1, 0, 2])).data.tolist() == [0, 0, 2]


def test_concat_example():
    assert concat([Tensor([1, 2]), Tensor([3])]).data.tolist() == [1, 2, 3]


def test_weighted_sum_rows():
    out = weighted_sum(Tensor([0.25, 0.75]), Tensor([[4, 0], [0, 4]]))
    assert out.data.tolist() == [1, 3]


def test_default_dtype_is_float32():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64


@pytest.mark.parametrize(
    "op, a, b",
    [
        (matmul, (2, 3), (2, 3)),
        (dot, (3,), (4,)),
        (rowdot, (2, 3), (3, 2)),
        (weighted_sum, (3,), (2, 4)),
    ],
)
def test_shape_mismatch_names_both_shapes(op, a, b):
    with pytest.raises(ShapeError) as exc:
        op(Tensor(np.zeros(a)), Tensor(np.zeros(b)))
    assert str(a) in str(exc.value) and str(b) in str(exc.value)


def test_add_shape_mismatch():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))


# --- softmax / cross-entropy --------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(F.softmax(Tensor([1.0, 0.0])).data, SOFTMAX_1_0, atol=1e-5)
    out = F.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_softmax_rejects_empty():
    with pytest.raises(ValueError):
        F.softmax(Tensor(np.zeros(0, dtype=np.float32)))


finite_vectors = arrays(
    np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
)


@given(finite_vectors, st.floats(-1e3, 1e3))
@settings(max_examples=200, deadline=None)
def test_softmax_is_distribution_and_shift_invariant(x, c):
    p = F.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-6
    np.testing.assert_allclose(F.softmax(Tensor(x + c)).data, p, atol=1e-6)


def test_cross_entropy_examples():
    assert F.cross_entropy(Tensor([1.0, 0.0, 0.0]), 0).item() == 0.0
    for label in range(3):
        assert abs(F.cross_entropy(t64([1 / 3] * 3), label).item() - LN3) < 1e-4
    clamped = F.cross_entropy(t64([0.0, 1.0, 0.0]), 0).item()
    assert np.isfinite(clamped)
    assert abs(clamped - NEG_LN_1E12) < 1e-6


@pytest.mark.parametrize("label", [-1, 3, 1.5])
def test_cross_entropy_rejects_bad_label(label):
    with pytest.raises(ValueError):
        F.cross_entropy(Tensor([0.2, 0.3, 0.5]), label)


def test_fused_cross_entropy_matches_composition():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 3))
    labels = rng.integers(0, 3, size=5)
    fused = F.softmax_cross_entropy(t64(z), labels).item()
    composed = F.cross_entropy(F.softmax(t64(z), axis=1), labels).item()
    assert abs(fused - composed) < 1e-12


def test_softmax_cross_entropy_gradient_identity():
    z = t64([0.3, -1.2, 2.0])
    backward(F.softmax_cross_entropy(z, 1))
    expected = F.softmax(Tensor(z.data)).data - np.eye(3)[1]
    np.testing.assert_allclose(z.grad, expected, atol=1e-12)
    fd = finite_difference_gradient(lambda x: F.softmax_cross_entropy(Tensor(x), 1).item(), z.data)
    np.testing.assert_allclose(z.grad, fd, rtol=1e-6)
    # the unfused path gives the same gradient
    z2 = t64(z.data)
    backward(F.cross_entropy(F.softmax(z2), 1))
    np.testing.assert_allclose(z2.grad, expected, atol=1e-12)


# --- batch norm and dropout -------------------------------------------------


def _bn(x, gamma=None, beta=None, training=True):
    d = np.asarray(x).shape[1]
    gamma = t64(np.ones(d) if gamma is None else gamma)
    beta = t64(np.zeros(d) if beta is None else beta)
    rm, rv = np.zeros(d), np.ones(d)
    return F.batch_norm(t64(x), gamma, beta, rm, rv, training), rm, rv


def test_batch_norm_example():
    out, rm, rv = _bn([[1.0], [3.0]])
    np.testing.assert_allclose(out.data, [[-1], [1]], atol=1e-4)
    # momentum 0.1 towards batch mean 2 and biased variance 1
    np.testing.assert_allclose(rm, [0.2])
    np.testing.assert_allclose(rv, [1.0])


def test_batch_norm_zero_gamma_collapses_to_beta():
    out, _, _ = _bn(np.random.default_rng(1).normal(size=(4, 3)), gamma=np.zeros(3), beta=[1.0, -2.0, 0.5])
    np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0, 0.5], (4, 1)))


def test_batch_norm_eval_is_deterministic():
    x = np.random.default_rng(2).normal(size=(3, 4)).astype(np.float32)
    g, b = Tensor(np.ones(4, np.float32)), Tensor(np.zeros(4, np.float32))
    rm, rv = np.full(4, 0.3, np.float32), np.full(4, 2.0, np.float32)
    first = F.batch_norm(Tensor(x), g, b, rm, rv, training=False).data
    second = F.batch_norm(Tensor(x), g, b, rm, rv, training=False).data
    assert first.tobytes() == second.tobytes()
    assert np.array_equal(rm, np.full(4, 0.3, np.float32))


def test_batch_norm_needs_two_rows_in_train_mode():
    with pytest.raises(ValueError, match="at least 2"):
        _bn([[1.0, 2.0]])


@given(st.integers(2, 40), st.integers(1, 8), st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_batch_norm_train_statistics(b, d, seed):
    x = np.random.default_rng(seed).normal(3.0, 2.0, size=(b, d))
    out, _, _ = _bn(x)
    assert np.all(np.abs(out.data.mean(axis=0)) < 1e-5)
    v = x.var(axis=0)
    assert np.all(np.abs(out.data.var(axis=0) - v / (v + F.BN_EPS)) < 1e-6)


def test_dropout_examples():
    x = Tensor(np.ones(10000, dtype=np.float32))
    assert F.dropout(x, 0.0, True, make_rng(0)) is x
    assert F.dropout(x, 0.7, False) is x
    out = F.dropout(x, 0.5, True, make_rng(0)).data
    assert 0.97 <= out.mean() <= 1.03
    assert set(np.unique(out)) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        F.dropout(x, 1.0, True, make_rng(0))


def test_dropout_mask_is_reproducible():
    x = Tensor(np.ones(64, dtype=np.float32))
    a = F.dropout(x, 0.3, True, make_rng(5, 2)).data
    b = F.dropout(x, 0.3, True, make_rng(5, 2)).data
    assert a.tobytes() == b.tobytes()


# --- backward and the tape --------------------------------------------------


def test_dot_gradient_is_other_operand():
    x, w = t64([1.0, -2.0, 3.0]), t64([0.5, 4.0, -1.0], grad=False)
    backward(dot(x, w))
    np.testing.assert_array_equal(x.grad, w.data)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        backward(t64([1.0, 2.0]) * 2.0)


def test_fan_out_accumulates():
    x = t64(np.random.default_rng(3).normal(size=4))
    f = lambda v: total(relu(v) * v)  # noqa: E731
    backward(f(x))
    single = x.grad.copy()
    x.grad = None
    backward(f(x) + f(x))
    np.testing.assert_allclose(x.grad, 2 * single, atol=1e-6)


def test_tape_is_topological_and_visits_each_node_once():
    x = t64([1.0, 2.0])
    y = x * 3.0
    z = total(y * y + y)
    tape = Tape.record(z)
    ids = [id(n) for n in tape]
    assert len(ids) == len(set(ids))
    position = {id(n): i for i, n in enumerate(tape)}
    for node in tape:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]
    assert tape.nodes[-1] is z


def test_constants_are_not_recorded():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]))
    assert not out.requires_grad and out._parents == ()


# --- finite differences -----------------------------------------------------


def test_finite_difference_examples():
    np.testing.assert_allclose(finite_difference_gradient(lambda x: x[0] ** 2, [3.0], 1e-3), [6.0], atol=1e-6)
    np.testing.assert_array_equal(finite_difference_gradient(lambda x: 7.0, np.ones(5)), np.zeros(5))
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda x: 0.0, [1.0], 0.0)


def _check(build, inputs, seed):
    """Compare tape gradients of ``sum(out * probe)`` with central differences."""
    tensors = [t64(a) for a in inputs]
    out = build(*tensors)
    probe = np.random.default_rng(seed).normal(size=out.shape)
    backward(total(out * Tensor(probe)))
    for i, t in enumerate(tensors):

        def f(x, i=i):
            args = [Tensor(a.data) for a in tensors]
            args[i] = Tensor(x)
            return float((build(*args).data * probe).sum())

        err = check_gradient(f, t.data, t.grad)
        assert err.max() < 1e-4, (build, i, err.max())


shapes = st.tuples(st.integers(1, 64), st.integers(1, 64), st.integers(1, 8))


@given(shapes, st.integers(0, 2**31 - 1))
@settings(max_examples=12, deadline=None)
def test_matmul_and_transpose_gradients(shape, seed):
    m, k, n = shape
    rng = np.random.default_rng(seed)
    _check(matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))], seed)
    _check(lambda a: transpose(a), [rng.normal(size=(m, k))], seed)


@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**31 - 1))
@settings(max_examples=12, deadline=None)
def test_elementwise_gradients(n, d, seed):
    rng = np.random.default_rng(seed)
    # keep relu inputs away from the kink
    x = rng.normal(size=(n, d))
    x = np.where(np.abs(x) < 1e-2, 0.5, x)
    _check(relu, [x], seed)
    _check(lambda a, b: a + b, [rng.normal(size=(n, d)), rng.normal(size=d)], seed)
    _check(lambda a, b: a * b, [rng.normal(size=(n, d)), rng.normal(size=(n, d))], seed)
    _check(rowdot, [rng.normal(size=(n, d)), rng.normal(size=(n, d))], seed)
    _check(weighted_sum, [rng.normal(size=n), rng.normal(size=(n, d))], seed)
    _check(lambda a, b: concat([a, b], axis=1), [rng.normal(size=(n, d)), rng.normal(size=(n, 2))], seed)
    _check(lambda a: F.softmax(a, axis=1), [rng.normal(size=(n, d))], seed)
    _check(lambda a: F.log_softmax(a, axis=1), [rng.normal(size=(n, d))], seed)
    _check(mean, [rng.normal(size=(n, d))], seed)


@given(st.integers(1, 64), st.integers(0, 2**31 - 1))
@settings(max_examples=12, deadline=None)
def test_dot_gradient_random(n, seed):
    rng = np.random.default_rng(seed)
    _check(dot, [rng.normal(size=n), rng.normal(size=n)], seed)


@given(st.integers(2, 64), st.integers(1, 16), st.booleans(), st.integers(0, 2**31 - 1))
@settings(max_examples=12, deadline=None)
def test_batch_norm_gradients(b, d, training, seed):
    rng = np.random.default_rng(seed)
    rm, rv = rng.normal(size=d), rng.uniform(0.5, 2, size=d)

    def build(x, g, bt):
        return F.batch_norm(x, g, bt, rm.copy(), rv.copy(), training)

    _check(build, [rng.normal(size=(b, d)), rng.normal(size=d), rng.normal(size=d)], seed)


def test_cross_entropy_gradients():
    rng = np.random.default_rng(9)
    labels = rng.integers(0, 3, size=6)
    probs = rng.dirichlet(np.ones(3), size=6) + 0.05
    _check(lambda p: F.cross_entropy(p, labels), [probs], 0)
    _check(lambda z: F.softmax_cross_entropy(z, labels), [rng.normal(size=(6, 3))], 0)


def test_dropout_gradient_uses_same_mask():
    x = t64(np.ones(50))
    y = F.dropout(x, 0.4, True, make_rng(1))
    backward(total(y))
    np.testing.assert_array_equal(x.grad, y.data)


@given(st.lists(st.integers(1, 6), min_size=1, max_size=5), st.integers(1, 8), st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_segment_op_gradients(counts, d, seed):
    rng = np.random.default_rng(seed)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    n, b = offsets[-1], len(counts)
    _check(lambda s: F.segment_softmax(s, offsets), [rng.normal(size=n)], seed)
    _check(lambda w, x: F.segment_weighted_sum(w, x, offsets), [rng.normal(size=n), rng.normal(size=(n, d))], seed)
    _check(lambda q: F.expand_rows(q, offsets), [rng.normal(size=(b, d))], seed)


def test_segment_softmax_normalizes_each_set():
    offsets = np.array([0, 1, 4, 6])
    w = F.segment_softmax(Tensor(np.array([5.0, 1.0, 2.0, 3.0, -1.0, 1000.0])), offsets).data
    sums = np.add.reduceat(w, offsets[:-1])
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)
    assert w[0] == 1.0


def test_segment_ops_reject_empty_sets():
    with pytest.raises(ValueError):
        F.check_offsets([0, 2, 2, 3], 3)
    with pytest.raises(ShapeError):
        F.check_offsets([0, 2], 3)


@pytest.mark.parametrize("seed", range(20))
def test_two_layer_network_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 5))
    labels = rng.integers(0, 3, size=6)
    w1, b1 = rng.normal(size=(5, 7)), rng.normal(size=7)
    w2, b2 = rng.normal(size=(7, 3)), rng.normal(size=3)

    def build(w1, b1, w2, b2):
        h = relu(matmul(Tensor(x), w1) + b1)
        return F.softmax_cross_entropy(matmul(h, w2) + b2, labels)

    _check(build, [w1, b1, w2, b2], seed)
