"""Tensor-core tests: every primitive against central finite differences,
plus the structural graph invariants (topological order, gradient
accumulation on shared subexpressions)."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nncap import autodiff as ad

F32_EPS = 1e-2
F64_EPS = 1e-6
F32_TOL = 1e-4
F64_TOL = 1e-6


def _rand(rng, shape, dtype, lo=-1.5, hi=1.5, kink_margin=0.0):
    """Uniform values, optionally pushed away from zero (ReLU/max kinks
    make central differences one-sided, which is not a gradient bug)."""
    x = rng.uniform(lo, hi, size=shape)
    if kink_margin:
        x = np.sign(x) * (np.abs(x) + kink_margin)
    return x.astype(dtype)


class TestMatmul:
    def test_identity(self):
        a = ad.tensor(np.eye(2))
        b = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(a, b)
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_arithmetic(self):
        out = ad.matmul(ad.tensor([[1.0, 2.0]]), ad.tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_shape_error_reports_both_shapes(self):
        with pytest.raises(ad.ShapeError) as exc:
            ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(exc.value)

    @pytest.mark.parametrize("dtype,eps,tol", [(np.float32, F32_EPS, F32_TOL),
                                               (np.float64, F64_EPS, F64_TOL)])
    def test_gradient_3x4_4x2(self, dtype, eps, tol):
        rng = np.random.default_rng(0)
        a = ad.tensor(_rand(rng, (3, 4), dtype), requires_grad=True, dtype=dtype)
        b_const = ad.constant(_rand(rng, (4, 2), dtype), dtype=dtype)
        w = ad.constant(_rand(rng, (3, 2), dtype), dtype=dtype)
        err = ad.grad_check(
            lambda t: ad.sum_all(ad.mul(ad.matmul(t, b_const), w)), a, eps=eps)
        assert err < tol

    def test_batched_matches_per_sample_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(4, 5, 2))
        out = ad.matmul(ad.tensor(a, dtype=np.float64),
                        ad.tensor(b, dtype=np.float64))
        expect = np.stack([a[i] @ b[i] for i in range(4)])
        np.testing.assert_allclose(out.data, expect, rtol=1e-12)

    def test_shared_weight_matches_per_sample_loop(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(4, 3, 5))
        w = rng.normal(size=(5, 2))
        out = ad.matmul(ad.tensor(a, dtype=np.float64),
                        ad.tensor(w, dtype=np.float64))
        expect = np.stack([a[i] @ w for i in range(4)])
        np.testing.assert_allclose(out.data, expect, rtol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(ad.tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-7)

    def test_closed_form(self):
        out = ad.softmax(ad.tensor([np.log(1.0), np.log(3.0)], dtype=np.float64))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_large_logits_stable(self):
        # reference computed with the shifted closed form at float64
        out = ad.softmax(ad.tensor([1000.0, 1000.5], dtype=np.float64))
        assert np.all(np.isfinite(out.data))
        z = np.exp(0.5)
        np.testing.assert_allclose(out.data, [1 / (1 + z), z / (1 + z)],
                                   rtol=1e-12)
        assert abs(out.data.sum() - 1.0) < 1e-6

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8),
           st.floats(-100, 100))
    @settings(max_examples=100, deadline=None)
    def test_sum_one_and_shift_invariance(self, logits, shift):
        x = np.array(logits, dtype=np.float64)
        a = ad.softmax(ad.tensor(x, dtype=np.float64)).data
        b = ad.softmax(ad.tensor(x + shift, dtype=np.float64)).data
        assert abs(a.sum() - 1.0) < 1e-6
        assert np.argmax(a) == np.argmax(b)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_masked_entries_exactly_zero(self):
        x = ad.tensor([[1.0, 2.0, 3.0]])
        mask = np.array([[False, True, False]])
        out = ad.softmax(ad.masked_fill(x, mask, -np.inf))
        assert out.data[0, 1] == 0.0
        assert abs(out.data.sum() - 1.0) < 1e-6


class TestLayernorm:
    def test_constant_row_maps_to_bias(self):
        g = ad.tensor(np.ones(3))
        b = ad.tensor(np.zeros(3))
        out = ad.layernorm(ad.tensor([5.0, 5.0, 5.0]), g, b)
        np.testing.assert_allclose(out.data, [0, 0, 0], atol=1e-6)

    def test_two_point_row(self):
        g = ad.tensor(np.ones(2), dtype=np.float64)
        b = ad.tensor(np.zeros(2), dtype=np.float64)
        out = ad.layernorm(ad.tensor([1.0, 3.0], dtype=np.float64), g, b)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-4)

    @pytest.mark.parametrize("dtype,eps,tol", [(np.float32, F32_EPS, F32_TOL),
                                               (np.float64, F64_EPS, F64_TOL)])
    def test_gradient(self, dtype, eps, tol):
        rng = np.random.default_rng(3)
        x = ad.tensor(_rand(rng, (3, 5), dtype), requires_grad=True, dtype=dtype)
        g = ad.constant(_rand(rng, (5,), dtype), dtype=dtype)
        b = ad.constant(_rand(rng, (5,), dtype), dtype=dtype)
        w = ad.constant(_rand(rng, (3, 5), dtype), dtype=dtype)
        err = ad.grad_check(
            lambda t: ad.sum_all(ad.mul(ad.layernorm(t, g, b), w)), x, eps=eps)
        assert err < tol


class TestGradCheck:
    def test_square_closed_form(self):
        x = ad.tensor([3.0], requires_grad=True, dtype=np.float64)
        err = ad.grad_check(lambda t: ad.sum_all(ad.mul(t, t)), x, eps=1e-6)
        assert err < 1e-9

    def test_softmax_cross_entropy_composite_f32(self):
        rng = np.random.default_rng(4)
        x = ad.tensor(_rand(rng, (4, 6), np.float32), requires_grad=True,
                      dtype=np.float32)
        targets = np.array([1, 5, 0, 3])
        err = ad.grad_check(lambda t: ad.cross_entropy(t, targets), x,
                            eps=F32_EPS)
        assert err < F32_TOL

    def test_rejects_non_scalar(self):
        x = ad.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            ad.grad_check(lambda t: ad.relu(t), x)


# ---------------------------------------------------------------------------
# every primitive against finite differences, >= 100 random inputs each


def _case_add(rng, dtype):
    c = ad.constant(_rand(rng, (2, 3), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.add(t, c), c)), (2, 3), 0.0


def _case_bias_add(rng, dtype):
    b = ad.constant(_rand(rng, (3,), dtype), dtype=dtype)
    w = ad.constant(_rand(rng, (2, 3), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.bias_add(t, b), w)), (2, 3), 0.0


def _case_bias_add_bias(rng, dtype):
    x = ad.constant(_rand(rng, (2, 4, 3), dtype), dtype=dtype)
    w = ad.constant(_rand(rng, (2, 4, 3), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.bias_add(x, t), w)), (3,), 0.0


def _case_mul(rng, dtype):
    c = ad.constant(_rand(rng, (2, 3), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.mul(t, c), c)), (2, 3), 0.0


def _case_scale(rng, dtype):
    w = ad.constant(_rand(rng, (2, 3), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.scale(t, -1.7), w)), (2, 3), 0.0


def _case_matmul2d(rng, dtype):
    b = ad.constant(_rand(rng, (4, 2), dtype), dtype=dtype)
    w = ad.constant(_rand(rng, (3, 2), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.matmul(t, b), w)), (3, 4), 0.0


def _case_matmul3d(rng, dtype):
    b = ad.constant(_rand(rng, (2, 3, 2), dtype), dtype=dtype)
    w = ad.constant(_rand(rng, (2, 2, 2), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.matmul(t, b), w)), (2, 2, 3), 0.0


def _case_matmul3d_shared(rng, dtype):
    w = ad.constant(_rand(rng, (3, 2), dtype), dtype=dtype)
    s = ad.constant(_rand(rng, (2, 2, 2), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.matmul(t, w), s)), (2, 2, 3), 0.0


def _case_transpose(rng, dtype):
    w = ad.constant(_rand(rng, (3, 2), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.transpose_last2(t), w)), (2, 3), 0.0


def _case_reshape(rng, dtype):
    w = ad.constant(_rand(rng, (6,), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.reshape(t, (6,)), w)), (2, 3), 0.0


def _case_concat(rng, dtype):
    c = ad.constant(_rand(rng, (2, 2), dtype), dtype=dtype)
    w = ad.constant(_rand(rng, (2, 5), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.concat([t, c], axis=-1), w)), (2, 3), 0.0


def _case_narrow(rng, dtype):
    w = ad.constant(_rand(rng, (2, 2), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.narrow(t, 1, 2, axis=-1), w)), (2, 4), 0.0


def _case_tile(rng, dtype):
    w = ad.constant(_rand(rng, (4, 2, 3), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.tile_leading(t, 4), w)), (1, 2, 3), 0.0


def _case_sum_axis(rng, dtype):
    w = ad.constant(_rand(rng, (3,), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.sum_axis(t, 0), w)), (2, 3), 0.0


def _case_mean_pool(rng, dtype):
    w = ad.constant(_rand(rng, (3,), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.mean_pool(t, 0), w)), (4, 3), 0.0


def _case_max_last(rng, dtype):
    w = ad.constant(_rand(rng, (2,), dtype), dtype=dtype)
    # ties or near-ties between entries make max non-differentiable
    return lambda t: ad.sum_all(ad.mul(ad.max_last_axis(t), w)), (2, 4), 0.3


def _case_relu(rng, dtype):
    w = ad.constant(_rand(rng, (2, 4), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.relu(t), w)), (2, 4), 0.1


def _case_sigmoid(rng, dtype):
    w = ad.constant(_rand(rng, (2, 4), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.sigmoid(t), w)), (2, 4), 0.0


def _case_softmax(rng, dtype):
    w = ad.constant(_rand(rng, (2, 4), dtype), dtype=dtype)
    return lambda t: ad.sum_all(ad.mul(ad.softmax(t, axis=-1), w)), (2, 4), 0.0


def _case_masked_fill(rng, dtype):
    mask = rng.random((2, 4)) < 0.4
    w = ad.constant(_rand(rng, (2, 4), dtype), dtype=dtype)
    return (lambda t: ad.sum_all(ad.mul(ad.masked_fill(t, mask, -2.0), w)),
            (2, 4), 0.0)


def _case_l2norm(rng, dtype):
    w = ad.constant(_rand(rng, (2, 4), dtype), dtype=dtype)
    return (lambda t: ad.sum_all(ad.mul(ad.l2_normalize_rows(t), w)),
            (2, 4), 0.2)


def _case_embedding(rng, dtype):
    ids = rng.integers(0, 5, size=(2, 3))
    w = ad.constant(_rand(rng, (2, 3, 4), dtype), dtype=dtype)
    return (lambda t: ad.sum_all(ad.mul(ad.embedding_lookup(t, ids), w)),
            (5, 4), 0.0)


def _case_conv2d_s1(rng, dtype):
    w = ad.constant(_rand(rng, (2, 3, 3, 3), dtype), dtype=dtype)
    b = ad.constant(_rand(rng, (2,), dtype), dtype=dtype)
    s = ad.constant(_rand(rng, (1, 2, 4, 4), dtype), dtype=dtype)
    return (lambda t: ad.sum_all(ad.mul(ad.conv2d(t, w, b, stride=1, pad=1), s)),
            (1, 3, 4, 4), 0.0)


def _case_conv2d_s2(rng, dtype):
    w = ad.constant(_rand(rng, (2, 3, 3, 3), dtype), dtype=dtype)
    b = ad.constant(_rand(rng, (2,), dtype), dtype=dtype)
    s = ad.constant(_rand(rng, (1, 2, 2, 2), dtype), dtype=dtype)
    return (lambda t: ad.sum_all(ad.mul(ad.conv2d(t, w, b, stride=2, pad=1), s)),
            (1, 3, 4, 4), 0.0)


def _case_conv2d_weight(rng, dtype):
    x = ad.constant(_rand(rng, (2, 2, 4, 4), dtype), dtype=dtype)
    b = ad.constant(_rand(rng, (3,), dtype), dtype=dtype)
    s = ad.constant(_rand(rng, (2, 3, 2, 2), dtype), dtype=dtype)
    return (lambda t: ad.sum_all(ad.mul(ad.conv2d(x, t, b, stride=2, pad=1), s)),
            (3, 2, 3, 3), 0.0)


def _case_cross_entropy(rng, dtype):
    targets = rng.integers(0, 5, size=4)
    return lambda t: ad.cross_entropy(t, targets), (4, 5), 0.0


def _case_cross_entropy_ignore(rng, dtype):
    targets = np.array([1, 0, 3, 0])
    return lambda t: ad.cross_entropy(t, targets, ignore_id=0), (4, 5), 0.0


def _case_bce(rng, dtype):
    targets = rng.integers(0, 2, size=(3, 1)).astype(dtype)
    return lambda t: ad.bce_with_logits(t, targets), (3, 1), 0.0


PRIMITIVE_CASES = {
    "add": _case_add, "bias_add_x": _case_bias_add,
    "bias_add_b": _case_bias_add_bias, "mul": _case_mul, "scale": _case_scale,
    "matmul_2d": _case_matmul2d, "matmul_3d": _case_matmul3d,
    "matmul_3d_shared": _case_matmul3d_shared, "transpose": _case_transpose,
    "reshape": _case_reshape, "concat": _case_concat, "narrow": _case_narrow,
    "tile_leading": _case_tile, "sum_axis": _case_sum_axis,
    "mean_pool": _case_mean_pool, "max_last_axis": _case_max_last,
    "relu": _case_relu, "sigmoid": _case_sigmoid, "softmax": _case_softmax,
    "masked_fill": _case_masked_fill, "l2_normalize": _case_l2norm,
    "embedding_lookup": _case_embedding, "conv2d_stride1": _case_conv2d_s1,
    "conv2d_stride2": _case_conv2d_s2, "conv2d_weight": _case_conv2d_weight,
    "cross_entropy": _case_cross_entropy,
    "cross_entropy_ignore": _case_cross_entropy_ignore,
    "bce_with_logits": _case_bce,
}


def run_primitive_sweep(name: str, dtype, eps: float, n_inputs: int) -> float:
    """Max finite-difference error for one primitive over random inputs."""
    rng = np.random.default_rng(abs(hash(name)) % (2 ** 31))
    worst = 0.0
    for _ in range(n_inputs):
        f, shape, margin = PRIMITIVE_CASES[name](rng, dtype)
        if name == "max_last_axis":
            # entries must be separated so the perturbation cannot change
            # which one is the max (a tie is a genuine non-smooth point)
            k = shape[-1]
            base = np.linspace(-1.5, 1.5, k)
            x_data = np.stack([rng.permuted(base) for _ in range(shape[0])])
            x_data = (x_data + rng.uniform(-0.3, 0.3, size=shape)).astype(dtype)
        else:
            x_data = _rand(rng, shape, dtype, kink_margin=margin)
        x = ad.tensor(x_data, requires_grad=True, dtype=dtype)
        worst = max(worst, ad.grad_check(f, x, eps=eps))
    return worst


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_f64(name):
    assert run_primitive_sweep(name, np.float64, F64_EPS, 100) < F64_TOL


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_f32(name):
    assert run_primitive_sweep(name, np.float32, F32_EPS, 100) < F32_TOL


# ---------------------------------------------------------------------------
# graph structure


class TestGraph:
    def test_topological_order(self):
        """Each node once, all parents before their consumers."""
        x = ad.tensor([1.0, 2.0], requires_grad=True)
        y = ad.relu(x)
        z = ad.add(y, y)
        loss = ad.sum_all(ad.mul(z, y))
        order = ad.topological_order(loss)
        seen_ids = [id(n) for n in order]
        assert len(seen_ids) == len(set(seen_ids))
        position = {i: k for k, i in enumerate(seen_ids)}
        for node in order:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]

    def test_shared_subexpression_accumulates(self):
        """d/dx of g(y, y) equals the duplicated-subgraph gradient sum."""
        rng = np.random.default_rng(7)
        data = rng.normal(size=(3,))

        x1 = ad.tensor(data, requires_grad=True, dtype=np.float64)
        y = ad.relu(x1)
        shared = ad.sum_all(ad.mul(y, y))
        shared.backward()

        x2 = ad.tensor(data, requires_grad=True, dtype=np.float64)
        x3 = ad.tensor(data, requires_grad=True, dtype=np.float64)
        dup = ad.sum_all(ad.mul(ad.relu(x2), ad.relu(x3)))
        dup.backward()

        np.testing.assert_allclose(x1.grad, x2.grad + x3.grad, rtol=1e-12)

    def test_backward_populates_reachable_leaves(self):
        a = ad.tensor([1.0], requires_grad=True)
        b = ad.tensor([2.0], requires_grad=True)
        unused = ad.tensor([3.0], requires_grad=True)
        loss = ad.sum_all(ad.mul(a, b))
        loss.backward()
        assert a.grad is not None and a.grad.shape == a.data.shape
        assert b.grad is not None
        assert unused.grad is None

    def test_backward_requires_scalar(self):
        x = ad.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            ad.relu(x).backward()

    def test_no_grad_suppresses_recording(self):
        x = ad.tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.relu(x)
        assert y._backward is None and not y.requires_grad

    def test_grad_shape_matches_data(self):
        x = ad.tensor(np.ones((2, 3)), requires_grad=True)
        loss = ad.sum_all(ad.mul(x, x))
        loss.backward()
        assert x.grad.shape == x.data.shape
