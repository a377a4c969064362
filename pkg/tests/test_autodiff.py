"""Unit and property tests for the reverse-mode engine."""

import numpy as np
import pytest

from lazyrec import autodiff as ad
from lazyrec.autodiff import GraphError, OPS, Tensor


class TestForwardValues:
    def test_softmax_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.value, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_rmsnorm_direct(self):
        # x / sqrt(mean(x^2) + eps) with unit gain at eps=0
        out = ad.rmsnorm(Tensor([3.0, 4.0]), eps=0.0)
        np.testing.assert_allclose(out.value, [3 / np.sqrt(12.5), 4 / np.sqrt(12.5)], rtol=1e-15)

    def test_matmul_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(Tensor(np.eye(2)), Tensor(m))
        np.testing.assert_array_equal(out.value, m)

    def test_shape_mismatch_reports_shapes(self):
        with pytest.raises(GraphError, match=r"\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(GraphError, match="incompatible"):
            ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_nonfinite_rejected(self):
        with pytest.raises(GraphError, match="non-finite"):
            ad.exp(Tensor(1e6))
        with pytest.raises(GraphError):
            ad.log(Tensor(0.0))
        with pytest.raises(GraphError):
            Tensor(np.inf)

    def test_forward_op_dispatch(self):
        out = ad.forward_op("add", Tensor(1.0), Tensor(2.0))
        assert out.value == 3.0
        with pytest.raises(GraphError, match="unknown op"):
            ad.forward_op("conv2d", Tensor(1.0))


class TestStopGradient:
    def test_value_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert np.array_equal(ad.stop_gradient(x).value, x.value)

    def test_detached_denominator(self):
        # d/dx [x / sg(x)] at 0.3 = 1 / 0.3: the denominator is a constant.
        x = Tensor(0.3)
        ad.backward(ad.div(x, ad.stop_gradient(x)))
        np.testing.assert_allclose(x.grad, 1.0 / 0.3, rtol=1e-15)

    def test_constant_times_x(self):
        x = Tensor(2.0)
        ad.backward(ad.mul(ad.stop_gradient(x), x))
        assert float(x.grad) == 2.0

    def test_zeroing_is_bitwise_exact(self):
        x = Tensor(np.array([1.5, -2.0]))
        y = ad.reduce_sum(ad.mul(ad.stop_gradient(x), Tensor([3.0, 4.0])))
        ad.backward(y)
        assert np.all(x.grad == 0.0)


class TestBackward:
    def test_product_rule(self):
        x, y = Tensor(2.0), Tensor(3.0)
        ad.backward(ad.mul(x, y))
        assert float(x.grad) == 3.0 and float(y.grad) == 2.0

    def test_cross_entropy_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        z = Tensor(rng.normal(size=(1, 5)))
        nll = ad.cross_entropy(z, np.array([2]))
        ad.backward(ad.reduce_sum(nll))
        expected = ad.softmax(Tensor(z.value)).value.copy()
        expected[0, 2] -= 1.0
        np.testing.assert_allclose(z.grad, expected, atol=1e-12)

    def test_reduce_sum_grad_is_ones(self):
        x = Tensor(np.arange(4.0))
        ad.backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones(4))

    def test_gradients_accumulate_until_zeroed(self):
        x = Tensor(2.0)
        ad.backward(ad.mul(x, Tensor(3.0)))
        ad.backward(ad.mul(x, Tensor(3.0)))
        assert float(x.grad) == 6.0
        x.zero_grad()
        assert float(x.grad) == 0.0

    def test_shared_subexpression(self):
        x = Tensor(2.0)
        ad.backward(ad.add(ad.mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1
        assert float(x.grad) == 5.0

    def test_rejects_non_scalar(self):
        with pytest.raises(GraphError, match="scalar"):
            ad.backward(Tensor(np.ones(3)))

    def test_broadcast_unbroadcast(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones(3))
        ad.backward(ad.reduce_sum(ad.mul(a, b)))
        np.testing.assert_array_equal(b.grad, np.full(3, 2.0))


# Ops whose generic finite-difference check does not apply: stop_gradient by
# definition (the checker reports total derivatives), and integer-index ops
# are exercised against their float inputs below.
_FD_EXEMPT = {"stop_gradient"}


def _compositions():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(4, 3))
    r = rng.normal(size=3)
    m = rng.normal(size=(3, 4))
    r4 = rng.normal(size=4)
    r6 = rng.normal(size=6)
    idx2 = np.array([[0, 2], [1, 0], [2, 1]])
    cases = {
        "add": lambda t: ad.reduce_sum(ad.add(t, Tensor(r))),
        "sub": lambda t: ad.reduce_sum(ad.sub(t, Tensor(r))),
        "mul": lambda t: ad.reduce_sum(ad.mul(t, Tensor(r))),
        "div": lambda t: ad.reduce_sum(ad.div(Tensor(r), ad.add(t, Tensor(5.0)))),
        "matmul": lambda t: ad.reduce_sum(ad.matmul(Tensor(m), ad.reshape(t, (3, 1)))) if False else ad.reduce_sum(ad.matmul(ad.reshape(t, (1, 3)), Tensor(m))),
        "softmax": lambda t: ad.reduce_sum(ad.mul(ad.softmax(t), Tensor(r))),
        "rmsnorm": lambda t: ad.reduce_sum(ad.mul(ad.rmsnorm(t), Tensor(r))),
        "silu": lambda t: ad.reduce_sum(ad.silu(t)),
        "log": lambda t: ad.reduce_sum(ad.log(ad.add(ad.mul(t, t), Tensor(1.0)))),
        "exp": lambda t: ad.reduce_sum(ad.exp(t)),
        "max_with_constant": lambda t: ad.reduce_sum(ad.max_with_constant(t, 0.05)),
        "min_with_constant": lambda t: ad.reduce_sum(ad.min_with_constant(t, 0.95)),
        "minimum": lambda t: ad.reduce_sum(ad.minimum(t, Tensor(r + 0.5))),
        "maximum": lambda t: ad.reduce_sum(ad.maximum(t, Tensor(r - 0.5))),
        "embedding_lookup": lambda t: ad.reduce_sum(
            ad.embedding_lookup(ad.matmul(ad.reshape(t, (3, 1)), Tensor(np.ones((1, 3)))), np.array([0, 2, 2]))
        ),
        "concat": lambda t: ad.reduce_sum(ad.concat([t, ad.mul(t, t)], axis=0)),
        "slice": lambda t: ad.reduce_sum(ad.slice_(t, slice(1, 3))),
        "gather_rows": lambda t: ad.reduce_sum(ad.gather_rows(t, np.array([1, 1, 0]))),
        "scatter_rows": lambda t: ad.reduce_sum(
            ad.mul(ad.scatter_rows(t, np.array([2, 0, 2]), 4), Tensor(r4))
        ),
        "take_along": lambda t: ad.reduce_sum(
            ad.take_along(ad.matmul(ad.reshape(t, (3, 1)), Tensor(np.ones((1, 3)))), idx2)
        ),
        "reshape": lambda t: ad.reduce_sum(ad.mul(ad.reshape(t, (3, 1)), Tensor(np.ones((3, 1))))),
        "transpose": lambda t: ad.reduce_sum(
            ad.transpose(ad.matmul(ad.reshape(t, (3, 1)), Tensor(np.ones((1, 2)))), (1, 0))
        ),
        "repeat": lambda t: ad.reduce_sum(ad.mul(ad.repeat(t, 2, axis=0), Tensor(r6))),
        "reduce_mean": lambda t: ad.reduce_mean(ad.mul(t, t)),
        "reduce_sum": lambda t: ad.reduce_sum(ad.mul(t, t)),
        "cross_entropy": lambda t: ad.reduce_mean(
            ad.cross_entropy(ad.matmul(ad.reshape(t, (1, 3)), Tensor(w.T)), np.array([1]))
        ),
    }
    return cases


class TestFiniteDifferences:
    def test_quadratic_is_nearly_exact(self):
        err = ad.finite_difference_check(
            lambda t: ad.reduce_sum(ad.mul(t, t)), np.array([3.0]), h=1e-5
        )
        assert err < 1e-8

    @pytest.mark.parametrize("kind", sorted(set(OPS) - _FD_EXEMPT))
    def test_every_registered_op(self, kind):
        cases = _compositions()
        theta = np.array([0.31, -0.44, 0.57])
        err = ad.finite_difference_check(cases[kind], theta, h=1e-5)
        assert err < 1e-6, f"{kind}: finite-difference mismatch {err:.3e}"

    def test_registry_is_fully_covered(self):
        assert set(_compositions()) | _FD_EXEMPT == set(OPS)

    def test_rejects_nonfinite_perturbation(self):
        with np.errstate(over="ignore"), pytest.raises(GraphError):
            ad.finite_difference_check(lambda t: ad.exp(ad.mul(t, Tensor(1e7))), np.array([7.0e-5]))


class TestDeterminism:
    def test_bitwise_identical_runs(self):
        def run():
            rng = np.random.default_rng(123)
            x = Tensor(rng.normal(size=(4, 4)))
            w = Tensor(rng.normal(size=(4, 4)))
            out = ad.reduce_mean(ad.softmax(ad.matmul(ad.rmsnorm(x), w)))
            ad.backward(out)
            return out.value.copy(), x.grad.copy(), w.grad.copy()

        a, b = run(), run()
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
