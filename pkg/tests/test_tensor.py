"""Tape autodiff: finite-difference oracles for every primitive, plus
graph bookkeeping rules (accumulation, clearing, error contracts)."""

import numpy as np
import pytest

from blockmae import tensor as T
from blockmae.gradcheck import check_gradients, rel_error
from blockmae.tensor import (
    ContractError,
    Graph,
    NonFiniteError,
    Tensor,
    precision,
)

# eps tuned per dtype: f32 needs a coarser step or roundoff dominates
DTYPES = [
    pytest.param((np.float32, 6e-3, 1e-2), id="f32"),
    pytest.param((np.float64, 1e-5, 1e-4), id="f64"),
]


def make(rng, shape, dtype, low=-1.0, high=1.0):
    data = rng.uniform(low, high, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


@pytest.mark.parametrize("spec", DTYPES)
class TestPrimitiveGradients:
    """Each primitive against central finite differences."""

    def run(self, spec, build, params):
        dtype, eps, tol = spec
        worst, errors = check_gradients(build, params, eps)
        assert worst < tol, f"worst rel err {worst:.3e} (tol {tol:.0e}): {errors}"

    def test_add_broadcast(self, spec):
        rng = np.random.default_rng(0)
        a = make(rng, (2, 3, 4), spec[0])
        b = make(rng, (4,), spec[0])
        w = rng.uniform(-1, 1, (2, 3, 4)).astype(spec[0])
        self.run(spec, lambda: T.sum_(T.mul(T.add(a, b), Tensor(w))), {"a": a, "b": b})

    def test_sub(self, spec):
        rng = np.random.default_rng(1)
        a = make(rng, (3, 4), spec[0])
        b = make(rng, (1, 4), spec[0])
        w = rng.uniform(-1, 1, (3, 4)).astype(spec[0])
        self.run(spec, lambda: T.sum_(T.mul(T.sub(a, b), Tensor(w))), {"a": a, "b": b})

    def test_mul(self, spec):
        rng = np.random.default_rng(2)
        a = make(rng, (2, 5), spec[0])
        b = make(rng, (2, 5), spec[0])
        self.run(spec, lambda: T.sum_(T.mul(a, b)), {"a": a, "b": b})

    def test_div(self, spec):
        rng = np.random.default_rng(3)
        a = make(rng, (2, 4), spec[0])
        b = make(rng, (2, 4), spec[0], low=0.5, high=2.0)
        self.run(spec, lambda: T.sum_(T.div(a, b)), {"a": a, "b": b})

    def test_scale(self, spec):
        rng = np.random.default_rng(4)
        a = make(rng, (3, 3), spec[0])
        self.run(spec, lambda: T.sum_(T.scale(T.mul(a, a), -2.5)), {"a": a})

    def test_matmul(self, spec):
        rng = np.random.default_rng(5)
        a = make(rng, (3, 4), spec[0])
        b = make(rng, (4, 2), spec[0])
        self.run(spec, lambda: T.sum_(T.mul(T.matmul(a, b), T.matmul(a, b))), {"a": a, "b": b})

    def test_matmul_batched(self, spec):
        rng = np.random.default_rng(6)
        a = make(rng, (2, 3, 4), spec[0])
        b = make(rng, (2, 4, 3), spec[0])
        w = rng.uniform(-1, 1, (2, 3, 3)).astype(spec[0])
        self.run(spec, lambda: T.sum_(T.mul(T.matmul(a, b), Tensor(w))), {"a": a, "b": b})

    def test_matmul_broadcast_rhs(self, spec):
        # shared weight against a batched stack
        rng = np.random.default_rng(7)
        a = make(rng, (2, 3, 4), spec[0])
        b = make(rng, (4, 5), spec[0])
        self.run(spec, lambda: T.sum_(T.mul(T.matmul(a, b), T.matmul(a, b))), {"a": a, "b": b})

    def test_reshape_transpose(self, spec):
        rng = np.random.default_rng(8)
        a = make(rng, (2, 3, 4), spec[0])
        w = rng.uniform(-1, 1, (4, 3, 2)).astype(spec[0])

        def build():
            y = T.transpose(T.reshape(a, (2, 3, 4)), (2, 1, 0))
            return T.sum_(T.mul(y, T.mul(y, Tensor(w))))

        self.run(spec, build, {"a": a})

    def test_gather_rows(self, spec):
        rng = np.random.default_rng(9)
        a = make(rng, (2, 5, 3), spec[0])
        idx = np.array([[0, 2, 2], [4, 1, 0]], dtype=np.int64)  # repeats exercise add.at

        def build():
            y = T.gather_rows(a, idx)
            return T.sum_(T.mul(y, y))

        self.run(spec, build, {"a": a})

    def test_concat_narrow(self, spec):
        rng = np.random.default_rng(10)
        a = make(rng, (2, 2, 3), spec[0])
        b = make(rng, (2, 4, 3), spec[0])

        def build():
            y = T.concat_rows([a, b])
            z = T.narrow_rows(y, 1, 4)
            return T.sum_(T.mul(z, z))

        self.run(spec, build, {"a": a, "b": b})

    def test_expand_batch(self, spec):
        rng = np.random.default_rng(11)
        a = make(rng, (2, 3), spec[0])
        w = rng.uniform(-1, 1, (4, 2, 3)).astype(spec[0])
        self.run(spec, lambda: T.sum_(T.mul(T.expand_batch(a, 4), Tensor(w))), {"a": a})

    def test_sum_axis(self, spec):
        rng = np.random.default_rng(12)
        a = make(rng, (3, 4, 2), spec[0])
        w = rng.uniform(-1, 1, (3, 2)).astype(spec[0])
        self.run(spec, lambda: T.sum_(T.mul(T.sum_(a, axis=1), Tensor(w))), {"a": a})

    def test_sum_keepdims(self, spec):
        rng = np.random.default_rng(13)
        a = make(rng, (3, 4), spec[0])

        def build():
            s = T.sum_(a, axis=-1, keepdims=True)
            return T.sum_(T.mul(a, s))

        self.run(spec, build, {"a": a})

    def test_mean(self, spec):
        rng = np.random.default_rng(14)
        a = make(rng, (2, 6), spec[0])

        def build():
            m = T.mean(a, axis=-1, keepdims=True)
            d = T.sub(a, m)
            return T.mean(T.mul(d, d))

        self.run(spec, build, {"a": a})

    def test_sqrt(self, spec):
        rng = np.random.default_rng(15)
        a = make(rng, (3, 4), spec[0], low=0.5, high=2.0)
        self.run(spec, lambda: T.sum_(T.mul(T.sqrt(a), Tensor(np.full((3, 4), 0.7, spec[0])))), {"a": a})


class TestGraphRules:
    def test_leaf_grads_accumulate_across_backwards(self):
        a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        for _ in range(2):
            with Graph() as g:
                loss = T.sum_(T.mul(a, a))
            g.backward(loss)
        # d/da sum(a^2) = 2a, run twice without zeroing
        np.testing.assert_allclose(a.grad, 4.0 * a.data)

    def test_intermediate_grads_cleared_each_pass(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Graph() as g:
            y = T.mul(a, a)
            loss = T.sum_(y)
        g.backward(loss)
        first = y.grad.copy()
        g.backward(loss)
        np.testing.assert_array_equal(y.grad, first)

    def test_zero_grad(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with Graph() as g:
            loss = T.sum_(a)
        g.backward(loss)
        a.zero_grad()
        assert a.grad is None

    def test_backward_requires_scalar(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        with Graph() as g:
            y = T.mul(a, a)
        with pytest.raises(ContractError):
            g.backward(y)

    def test_backward_rejects_foreign_tensor(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with Graph() as g:
            T.sum_(a)
        stray = Tensor(np.array(1.0))
        with pytest.raises(ContractError):
            g.backward(stray)

    def test_no_graph_means_no_recording(self):
        a = Tensor(np.ones(2), requires_grad=True)
        y = T.mul(a, a)
        assert not y.requires_grad and y.grad is None

    def test_diamond_reuse_accumulates(self):
        # a feeds two branches; grads from both must add
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Graph() as g:
            loss = T.add(T.sum_(T.mul(a, a)), T.sum_(T.scale(a, 3.0)))
        g.backward(loss)
        np.testing.assert_allclose(a.grad, 2.0 * a.data + 3.0)


class TestGuards:
    def test_nonfinite_result_raises(self):
        a = Tensor(np.array([1.0]))
        b = Tensor(np.array([0.0]))
        with pytest.raises(NonFiniteError):
            T.div(a, b)

    def test_nonfinite_input_raises_at_construction(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([np.nan]))

    def test_item_rejects_nonscalar(self):
        with pytest.raises(ContractError):
            Tensor(np.ones(3)).item()

    def test_grad_shape_mismatch(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        with pytest.raises(ContractError):
            a.accumulate_grad(np.ones((3, 2)))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ContractError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestPrecision:
    def test_default_is_float32(self):
        assert T.tensor([1.0]).data.dtype == np.float32

    def test_precision_context_switches_and_restores(self):
        with precision(np.float64):
            assert T.tensor([1.0]).data.dtype == np.float64
        assert T.tensor([1.0]).data.dtype == np.float32

    def test_rel_error_identical_is_zero(self):
        g = np.random.default_rng(0).normal(size=10)
        assert rel_error(g, g) == 0.0


def test_same_seed_same_numbers():
    def run():
        rng = np.random.default_rng(77)
        a = Tensor(rng.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
        with Graph() as g:
            loss = T.mean(T.mul(a, a))
        g.backward(loss)
        return loss.item(), a.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)
