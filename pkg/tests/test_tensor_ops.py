import numpy as np
import pytest

import alphagan3d.autodiff as ad
from alphagan3d.errors import ContractError, DimensionError, DomainError
from alphagan3d.rng import SeedStream

from conftest import numeric_grad, rel_err

F64 = np.float64


def t64(data, rg=False):
    return ad.tensor(data, requires_grad=rg, dtype=F64)


class TestElementwise:
    def test_add(self):
        out = ad.elementwise(t64([1.0, 2.0]), t64([3.0, 4.0]), kind="add")
        np.testing.assert_allclose(out.numpy(), [4.0, 6.0])

    def test_scalar_operand(self):
        out = ad.elementwise(t64([1.0, 2.0]), 3.0, kind="mul")
        np.testing.assert_allclose(out.numpy(), [3.0, 6.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.add(t64([1.0, 2.0]), t64([1.0, 2.0, 3.0]))

    def test_sqrt_negative(self):
        with pytest.raises(DomainError):
            ad.sqrt(t64([-1.0]))

    def test_abs_backward_at_negative(self):
        x = t64([-2.0], rg=True)
        ad.backward(ad.sum_(ad.abs_(x)))
        np.testing.assert_allclose(x.grad.numpy(), [-1.0])

    def test_abs_kink_uses_right_derivative(self):
        x = t64([0.0], rg=True)
        ad.backward(ad.sum_(ad.abs_(x)))
        np.testing.assert_allclose(x.grad.numpy(), [1.0])

    def test_square_backward_matches_finite_difference(self, rng):
        x0 = rng.normal(size=4)
        x = t64(x0, rg=True)
        ad.backward(ad.sum_(ad.square(x)))
        num = numeric_grad(lambda a: float((a * a).sum()), x0)
        assert rel_err(x.grad.numpy(), num) < 1e-6

    def test_operator_sugar(self):
        a, b = t64([2.0]), t64([4.0])
        np.testing.assert_allclose((a + b).numpy(), [6.0])
        np.testing.assert_allclose((a - b).numpy(), [-2.0])
        np.testing.assert_allclose((a * b).numpy(), [8.0])
        np.testing.assert_allclose((a / b).numpy(), [0.5])
        np.testing.assert_allclose((1.0 / b).numpy(), [0.25])
        np.testing.assert_allclose((-a).numpy(), [-2.0])
        np.testing.assert_allclose((3.0 - a).numpy(), [1.0])


class TestActivations:
    def test_leaky_relu_positive(self):
        assert ad.activation(t64([1.0]), "leaky_relu", slope=0.2).numpy()[0] == 1.0

    def test_leaky_relu_negative(self):
        out = ad.activation(t64([-1.0]), "leaky_relu", slope=0.2)
        np.testing.assert_allclose(out.numpy(), [-0.2])

    def test_tanh_gradient_at_zero(self):
        x = t64([0.0], rg=True)
        ad.backward(ad.sum_(ad.tanh(x)))
        np.testing.assert_allclose(x.grad.numpy(), [1.0])

    def test_relu(self):
        out = ad.relu(t64([-1.0, 2.0]))
        np.testing.assert_allclose(out.numpy(), [0.0, 2.0])

    def test_bad_slope(self):
        with pytest.raises(DomainError):
            ad.leaky_relu(t64([1.0]), slope=1.5)


class TestReduce:
    def test_mean(self):
        assert ad.reduce(t64([1.0, 2.0, 3.0]), "mean").item() == pytest.approx(2.0)

    def test_sum_backward_distributes_ones(self):
        x = t64([5.0, 6.0, 7.0], rg=True)
        ad.backward(ad.sum_(x))
        np.testing.assert_allclose(x.grad.numpy(), [1.0, 1.0, 1.0])

    def test_mean_over_batch_axis_shape(self):
        out = ad.mean(t64(np.ones((4, 2))), axes=0)
        assert out.shape == (2,)

    def test_keepdims(self):
        out = ad.sum_(t64(np.ones((4, 2))), axes=1, keepdims=True)
        assert out.shape == (4, 1)

    def test_empty_axes_rejected(self):
        with pytest.raises(DomainError):
            ad.sum_(t64([1.0]), axes=())


class TestDense:
    def test_identity(self):
        x = t64([[1.0, 2.0], [3.0, 4.0]])
        w = t64(np.eye(2))
        np.testing.assert_allclose(ad.dense(x, w).numpy(), x.numpy())

    def test_arithmetic(self):
        out = ad.dense(t64([[1.0, 2.0]]), t64([[3.0, 4.0]]))
        np.testing.assert_allclose(out.numpy(), [[11.0]])

    def test_weight_gradient_matches_finite_difference(self, rng):
        x0 = rng.normal(size=(3, 4))
        w0 = rng.normal(size=(2, 4))
        b0 = rng.normal(size=2)
        w = t64(w0, rg=True)
        loss = ad.sum_(ad.square(ad.dense(t64(x0), w, t64(b0))))
        ad.backward(loss)

        def f(wv):
            y = x0 @ wv.T + b0
            return float((y * y).sum())

        assert rel_err(w.grad.numpy(), numeric_grad(f, w0)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.dense(t64(np.ones((2, 3))), t64(np.ones((4, 5))))


class TestL2NormPerSample:
    def test_three_four_five(self):
        out = ad.l2_norm_per_sample(t64([[3.0, 4.0]]))
        np.testing.assert_allclose(out.numpy(), [5.0], rtol=1e-7)

    def test_all_ones_volume(self):
        m = 4 * 3 * 3 * 3
        x = t64(np.ones((2, 4, 3, 3, 3)))
        np.testing.assert_allclose(ad.l2_norm_per_sample(x).numpy(),
                                   [np.sqrt(m)] * 2, rtol=1e-7)

    def test_gradient_at_zero_is_zero(self):
        x = t64(np.zeros((1, 3)), rg=True)
        ad.backward(ad.sum_(ad.l2_norm_per_sample(x)))
        np.testing.assert_allclose(x.grad.numpy(), np.zeros((1, 3)))

    def test_second_order_matches_nested_finite_difference(self, rng):
        # d/dx of sum of d||x||/dx entries, checked by nested central FD
        x0 = rng.normal(size=(1, 8))

        x = t64(x0, rg=True)
        n = ad.sum_(ad.l2_norm_per_sample(x))
        (gx,) = ad.grad(n, [x], higher_order=True)
        ad.backward(ad.sum_(gx))
        analytic = x.grad.numpy()

        def f(xv):
            return float(np.sum(numeric_grad(
                lambda a: float(np.sqrt((a * a).sum())), xv, eps=1e-6)))

        num = numeric_grad(f, x0, eps=1e-4)
        assert rel_err(analytic, num) < 1e-4

    def test_needs_non_batch_axis(self):
        with pytest.raises(DimensionError):
            ad.l2_norm_per_sample(t64([1.0, 2.0]))


class TestBackward:
    def test_sum_gradient(self):
        x = t64([1.0, 1.0, 1.0], rg=True)
        ad.backward(ad.sum_(x))
        np.testing.assert_allclose(x.grad.numpy(), [1.0, 1.0, 1.0])

    def test_sum_of_squares(self):
        x = t64([1.0, 2.0], rg=True)
        ad.backward(ad.sum_(ad.square(x)))
        np.testing.assert_allclose(x.grad.numpy(), [2.0, 4.0])

    def test_grad_accumulates(self):
        x = t64([1.0], rg=True)
        ad.backward(ad.sum_(x))
        ad.backward(ad.sum_(ad.scale(x, 2.0)))
        np.testing.assert_allclose(x.grad.numpy(), [3.0])

    def test_non_scalar_root_rejected(self):
        x = t64([1.0, 2.0], rg=True)
        with pytest.raises(ContractError):
            ad.backward(ad.square(x))

    def test_detached_graph_rejected(self):
        x = t64([1.0])
        with pytest.raises(ContractError):
            ad.backward(ad.sum_(ad.square(x)))

    def test_norm_of_gradient_second_order_closed_form(self, rng):
        # f = sum(x^2): grad = 2x, ||grad|| = 2||x||, d/dx = 2 x/||x||
        x0 = rng.normal(size=5)
        x = t64(x0, rg=True)
        f = ad.sum_(ad.square(x))
        (gx,) = ad.grad(f, [x], higher_order=True)
        norm = ad.l2_norm_per_sample(ad.reshape(gx, (1, 5)))
        ad.backward(ad.sum_(norm))
        expected = 2.0 * x0 / np.linalg.norm(x0)
        assert rel_err(x.grad.numpy(), expected) < 1e-6

    def test_shared_node_visited_once(self):
        # y used twice: grads must combine, not double-traverse
        x = t64([2.0], rg=True)
        y = ad.square(x)
        z = ad.sum_(ad.add(y, y))
        ad.backward(z)
        np.testing.assert_allclose(x.grad.numpy(), [8.0])


class TestSample:
    def test_normal_statistics(self):
        s = SeedStream(99)
        x = ad.sample((100_000,), s, dist="standard_normal", dtype=F64)
        assert abs(float(x.numpy().mean())) < 0.02
        assert abs(float(x.numpy().var()) - 1.0) < 0.05

    def test_uniform_range(self):
        s = SeedStream(3)
        x = ad.sample((1000,), s, dist="uniform", low=0.0, high=1.0)
        data = x.numpy()
        assert data.min() >= 0.0 and data.max() < 1.0

    def test_determinism(self):
        a = ad.sample((64,), SeedStream(7), dist="standard_normal")
        b = ad.sample((64,), SeedStream(7), dist="standard_normal")
        assert np.array_equal(a.numpy(), b.numpy())

    def test_no_grad_flag(self):
        assert not ad.sample((4,), SeedStream(0)).requires_grad


class TestDeterminism:
    def test_graph_reevaluation_bit_identical(self, rng):
        x0 = rng.normal(size=(4, 8)).astype(np.float32)
        w0 = rng.normal(size=(3, 8)).astype(np.float32)

        def run():
            x = ad.tensor(x0, requires_grad=True)
            w = ad.tensor(w0, requires_grad=True)
            loss = ad.mean(ad.square(ad.tanh(ad.dense(x, w))))
            ad.backward(loss)
            return loss.item(), x.grad.numpy().copy(), w.grad.numpy().copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)


class TestGradcheckCompositions:
    """Analytic gradients of random scalar compositions vs central FD."""

    def test_composition_suite(self, rng):
        cases = []

        def add_case(name, build, shapes):
            cases.append((name, build, shapes))

        add_case("affine_tanh",
                 lambda ts: ad.mean(ad.tanh(ad.add(ad.mul(ts[0], ts[1]), ts[2]))),
                 [(6,), (6,), (6,)])
        add_case("abs_mean", lambda ts: ad.mean(ad.abs_(ts[0])), [(12,)])
        add_case("div_sqrt",
                 lambda ts: ad.sum_(ad.sqrt(ad.add_scalar(ad.square(ts[0]), 1.0))),
                 [(5,)])
        add_case("leaky_chain",
                 lambda ts: ad.mean(ad.leaky_relu(ad.mul(ts[0], ts[0]), 0.2)),
                 [(7,)])
        add_case("norm", lambda ts: ad.sum_(ad.l2_norm_per_sample(ts[0])), [(2, 9)])
        add_case("div_pair",
                 lambda ts: ad.mean(ad.div(ts[0], ad.add_scalar(ad.square(ts[1]), 2.0))),
                 [(8,), (8,)])

        for name, build, shapes in cases:
            arrays = [rng.normal(size=s) for s in shapes]
            tensors = [t64(a, rg=True) for a in arrays]
            ad.backward(build(tensors))
            for i, (arr, ten) in enumerate(zip(arrays, tensors)):
                def f(v, i=i):
                    vals = [a.copy() for a in arrays]
                    vals[i] = v
                    with ad.no_grad():
                        return build([t64(a) for a in vals]).item()

                num = numeric_grad(f, arr)
                err = rel_err(ten.grad.numpy(), num)
                assert err < 1e-4, f"{name} input {i}: rel err {err}"
