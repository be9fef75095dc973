"""Tape correctness: every primitive against central finite differences,
plus the shape/NaN error contracts."""

import numpy as np
import pytest

from bevforecast import autodiff as ad


def fd_check(build, params, eps=1e-5, **kw):
    return ad.check_gradients(build, params, eps=eps, **kw)


class TestMatmul:
    def test_identity(self):
        m = ad.constant([[1.0, 2.0], [3.0, 4.0]])
        eye = ad.constant(np.eye(2))
        out = ad.matmul(eye, m)
        assert np.array_equal(out.data, m.data)

    def test_hand_product(self):
        a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
        b = ad.constant([[1.0], [1.0]])
        assert np.array_equal(ad.matmul(a, b).data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        a = ad.parameter(rng.normal(size=(3, 4)))
        b = ad.parameter(rng.normal(size=(4, 2)))
        err = fd_check(lambda: ad.sum_all(ad.matmul(a, b)), [a, b])
        assert err < 1e-6


class TestElementwise:
    def test_sigmoid_symmetry_point(self):
        assert ad.sigmoid(ad.constant([[0.0]])).item() == 0.5

    def test_relu_negative_branch(self):
        x = ad.parameter([[-3.0]])
        with ad.Graph() as g:
            y = ad.relu(x)
        assert y.item() == 0.0
        ad.backward(g, y)
        assert x.grad.item() == 0.0

    def test_sigmoid_gradient_at_point(self):
        x = ad.parameter([[1.7]])
        err = fd_check(lambda: ad.sigmoid(x), [x])
        assert err < 1e-8

    def test_sigmoid_open_interval(self):
        big = ad.sigmoid(ad.constant([[1e4], [-1e4]])).data
        assert 0.0 < big[1, 0] and big[0, 0] < 1.0

    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_binary_ops_match_fd(self, kind):
        rng = np.random.default_rng(3)
        a = ad.parameter(rng.normal(size=(2, 3)))
        b = ad.parameter(rng.normal(size=(2, 3)))
        err = fd_check(lambda: ad.sum_all(ad.elementwise(kind, a, b)), [a, b])
        assert err < 1e-7

    def test_binary_shape_error(self):
        with pytest.raises(ad.DimensionError):
            ad.add(ad.constant(np.ones((2, 2))), ad.constant(np.ones((2, 3))))

    def test_scale_shift(self):
        x = ad.parameter([[2.0, -1.0]])
        err = fd_check(lambda: ad.sum_all(ad.shift(ad.scale(x, 3.0), -0.5)), [x])
        assert err < 1e-9

    @pytest.mark.parametrize("fn", [ad.sqrt, ad.absolute, ad.sin, ad.cos,
                                    ad.wrap_angle, ad.sigmoid, ad.relu])
    def test_unary_family_matches_fd(self, fn):
        rng = np.random.default_rng(11)
        x = ad.parameter(rng.uniform(0.3, 2.0, size=(3, 2)))
        err = fd_check(lambda: ad.sum_all(fn(x)), [x])
        assert err < 1e-6

    def test_atan2_matches_fd(self):
        rng = np.random.default_rng(4)
        y = ad.parameter(rng.normal(size=(3, 1)) + 2.0)
        x = ad.parameter(rng.normal(size=(3, 1)) + 2.0)
        err = fd_check(lambda: ad.sum_all(ad.atan2(y, x)), [y, x])
        assert err < 1e-6

    def test_sign_is_constant(self):
        x = ad.parameter([[0.0, -2.0, 3.0]])
        with ad.Graph() as g:
            out = ad.sum_all(ad.sign_pos(x))
        assert np.array_equal(ad.sign_pos(x).data, [[1.0, -1.0, 1.0]])
        ad.backward(g, out)
        assert np.all(x.grad == 0.0)


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = ad.softmax_rows(ad.constant([[0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)

    def test_stabilized(self):
        out = ad.softmax_rows(ad.constant([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(1.0)
        assert out.data[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        out = ad.softmax_rows(ad.constant(rng.normal(size=(40, 7)) * 30))
        assert np.all(np.abs(out.data.sum(axis=1) - 1.0) <= 1e-12)

    def test_jacobian_matches_fd(self):
        rng = np.random.default_rng(6)
        x = ad.parameter(rng.normal(size=(2, 3)))
        probe = ad.constant(rng.normal(size=(2, 3)))
        err = fd_check(lambda: ad.sum_all(ad.mul(ad.softmax_rows(x), probe)), [x])
        assert err < 1e-6


class TestConcatAndGather:
    def test_concat_trivial(self):
        out = ad.concat_cols(ad.constant([[1.0]]), ad.constant([[2.0]]))
        assert np.array_equal(out.data, [[1.0, 2.0]])

    def test_concat_with_empty(self):
        a = ad.constant(np.zeros((3, 0)))
        b = ad.constant(np.arange(6.0).reshape(3, 2))
        assert np.array_equal(ad.concat_cols(a, b).data, b.data)

    def test_concat_row_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.concat_cols(ad.constant(np.ones((2, 1))), ad.constant(np.ones((3, 1))))

    def test_concat_gradient_split(self):
        rng = np.random.default_rng(7)
        a = ad.parameter(rng.normal(size=(3, 2)))
        b = ad.parameter(rng.normal(size=(3, 4)))
        probe = ad.constant(rng.normal(size=(3, 6)))
        err = fd_check(lambda: ad.sum_all(ad.mul(ad.concat_cols(a, b), probe)), [a, b])
        assert err < 1e-7

    def test_gather_rows_repeats_accumulate(self):
        x = ad.parameter([[1.0], [2.0]])
        with ad.Graph() as g:
            out = ad.sum_all(ad.gather_rows(x, [0, 0, 1]))
        ad.backward(g, out)
        assert np.array_equal(x.grad, [[2.0], [1.0]])

    def test_stack_rows_and_slice_cols_match_fd(self):
        rng = np.random.default_rng(8)
        a = ad.parameter(rng.normal(size=(2, 3)))
        b = ad.parameter(rng.normal(size=(1, 3)))

        def build():
            s = ad.stack_rows([a, b])
            return ad.sum_all(ad.mul(ad.slice_cols(s, 1, 3), ad.slice_cols(s, 0, 2)))

        assert fd_check(build, [a, b]) < 1e-7


class TestMlp:
    def test_zero_weights_yield_bias(self):
        spec = ad.MlpSpec((3, 2))
        w = [(ad.parameter(np.zeros((3, 2))), ad.parameter([[0.5, -1.0]]))]
        out = ad.mlp_forward(spec, w, ad.constant(np.ones((4, 3))))
        assert np.allclose(out.data, [[0.5, -1.0]] * 4)

    def test_identity_construction(self):
        spec = ad.MlpSpec((2, 4, 2))
        w1 = np.concatenate([np.eye(2), -np.eye(2)], axis=1)  # splits +/- parts
        w2 = np.concatenate([np.eye(2), -np.eye(2)], axis=0)
        weights = [(ad.parameter(w1), ad.parameter(np.zeros((1, 4)))),
                   (ad.parameter(w2), ad.parameter(np.zeros((1, 2))))]
        x = np.random.default_rng(9).normal(size=(5, 2))
        out = ad.mlp_forward(spec, weights, ad.constant(x))
        assert np.allclose(out.data, x, atol=1e-12)

    def test_width_mismatch(self):
        spec = ad.MlpSpec((3, 2))
        w = ad.init_mlp(spec, np.random.default_rng(0))
        with pytest.raises(ad.DimensionError):
            ad.mlp_forward(spec, w, ad.constant(np.ones((4, 2))))

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(10)
        spec = ad.MlpSpec((3, 5, 2))
        weights = ad.init_mlp(spec, rng)
        x = ad.constant(rng.normal(size=(4, 3)))
        params = [t for pair in weights for t in pair]
        err = fd_check(lambda: ad.sum_all(ad.mlp_forward(spec, weights, x)), params)
        assert err < 1e-5


class TestResblock:
    def test_zero_inner_weights_is_identity(self):
        w = [(ad.parameter(np.zeros((4, 4))), ad.parameter(np.zeros((1, 4)))),
             (ad.parameter(np.zeros((4, 4))), ad.parameter(np.zeros((1, 4))))]
        x = np.random.default_rng(12).normal(size=(3, 4))
        out = ad.resblock_forward(w, ad.constant(x))
        assert np.array_equal(out.data, x)

    def test_shape_contract(self):
        rng = np.random.default_rng(13)
        w = ad.init_resblock(rng, 64)
        out = ad.resblock_forward(w, ad.constant(rng.normal(size=(5, 64))))
        assert out.shape == (5, 64)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(14)
        w = ad.init_resblock(rng, 3)
        x = ad.parameter(rng.normal(size=(2, 3)))
        params = [x] + [t for pair in w for t in pair]
        err = fd_check(lambda: ad.sum_all(ad.resblock_forward(w, x)), params)
        assert err < 1e-5


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.parameter(np.arange(6.0).reshape(2, 3))
        with ad.Graph() as g:
            loss = ad.sum_all(x)
        ad.backward(g, loss)
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        x = ad.parameter([[1.0], [2.0]])
        with ad.Graph() as g:
            loss = ad.sum_all(ad.mul(x, x))
        ad.backward(g, loss)
        assert np.array_equal(x.grad, [[2.0], [4.0]])

    def test_non_scalar_loss_rejected(self):
        x = ad.parameter(np.ones((2, 2)))
        with ad.Graph() as g:
            y = ad.scale(x, 2.0)
        with pytest.raises(ad.DimensionError):
            ad.backward(g, y)

    def test_disconnected_parameter_gets_zero(self):
        x = ad.parameter(np.ones((2, 1)))
        orphan = ad.parameter(np.ones((3, 1)))
        with ad.Graph() as g:
            loss = ad.sum_all(x)
        ad.backward(g, loss, params=[x, orphan])
        assert np.array_equal(orphan.grad, np.zeros((3, 1)))

    def test_repeat_run_bit_identical(self):
        rng = np.random.default_rng(15)
        a = ad.parameter(rng.normal(size=(4, 4)))
        b = ad.parameter(rng.normal(size=(4, 4)))

        def run():
            ad.zero_grads([a, b])
            with ad.Graph() as g:
                loss = ad.sum_all(ad.sigmoid(ad.matmul(a, b)))
            ad.backward(g, loss)
            return a.grad.tobytes(), b.grad.tobytes()

        assert run() == run()

    def test_nan_loss_raises(self):
        x = ad.parameter([[np.nan]])
        with ad.Graph() as g:
            loss = ad.sum_all(x)
        with pytest.raises(ad.NumericError):
            ad.backward(g, loss)


class TestPatchesAndInterp:
    def test_patches_center_identity(self):
        vals = ad.parameter(np.arange(9.0).reshape(9, 1))
        out = ad.patches(vals, 3, 3, 3)
        # middle column of a 3x3 window is the cell itself
        assert np.array_equal(out.data[:, 4], np.arange(9.0))

    def test_patches_zero_padding(self):
        vals = ad.constant(np.ones((4, 1)))
        out = ad.patches(vals, 2, 2, 3)
        # corner cell sees 5 out-of-range neighbors
        assert out.data[0].sum() == 4.0

    def test_patches_gradient(self):
        rng = np.random.default_rng(16)
        vals = ad.parameter(rng.normal(size=(12, 2)))
        probe = ad.constant(rng.normal(size=(12, 18)))
        err = fd_check(lambda: ad.sum_all(ad.mul(ad.patches(vals, 3, 4, 3), probe)),
                       [vals])
        assert err < 1e-7

    def test_gather_interp_gradient(self):
        rng = np.random.default_rng(17)
        vals = ad.parameter(rng.normal(size=(6, 3)))
        idx = rng.integers(0, 6, size=(5, 4))
        wts = rng.uniform(size=(5, 4))
        err = fd_check(lambda: ad.sum_all(ad.gather_interp(vals, idx, wts)), [vals])
        assert err < 1e-7


class TestBceLogits:
    def test_zero_logit_is_log_two(self):
        out = ad.bce_logits(ad.constant([[0.0]]), [[1.0]])
        assert out.item() == pytest.approx(np.log(2.0))

    def test_saturated_is_tiny_but_finite(self):
        out = ad.bce_logits(ad.constant([[1000.0]]), [[1.0]])
        assert 0.0 < out.item() < 1e-6

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(18)
        x = ad.parameter(rng.normal(size=(4, 1)) * 3)
        t = (rng.uniform(size=(4, 1)) > 0.5).astype(float)
        err = fd_check(lambda: ad.sum_all(ad.bce_logits(x, t)), [x])
        assert err < 1e-7


class TestCheckGradients:
    def test_linear_is_exact(self):
        x = ad.parameter([[1.0, 2.0, 3.0]])
        err = ad.check_gradients(lambda: ad.sum_all(ad.scale(x, 4.0)), [x])
        assert err < 1e-10

    def test_scalar_product(self):
        a = ad.parameter([[1.3]])
        b = ad.parameter([[-0.7]])
        err = ad.check_gradients(lambda: ad.mul(a, b), [a, b])
        assert err < 1e-9

    def test_eps_validation(self):
        x = ad.parameter([[1.0]])
        with pytest.raises(ValueError):
            ad.check_gradients(lambda: ad.sum_all(x), [x], eps=1e-2)

    def test_sampling_subset(self):
        rng = np.random.default_rng(19)
        a = ad.parameter(rng.normal(size=(6, 6)))
        err = ad.check_gradients(lambda: ad.sum_all(ad.mul(a, a)), [a], sample=5)
        assert err < 1e-8


class TestPrimitiveSweep:
    """Property: every differentiable primitive passes FD over many seeds."""

    def test_twenty_seeds(self):
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            a = ad.parameter(rng.normal(size=(3, 4)))
            b = ad.parameter(rng.normal(size=(4, 3)))
            c = ad.parameter(rng.uniform(0.2, 1.5, size=(3, 3)))

            def build():
                m = ad.matmul(a, b)
                s = ad.sigmoid(m)
                r = ad.relu(ad.sub(m, c))
                q = ad.softmax_rows(ad.mul(m, c))
                z = ad.concat_cols(s, r, q, ad.sqrt(c), ad.sin(m), ad.cos(m))
                return ad.sum_all(ad.mul(z, z))

            worst = max(worst, ad.check_gradients(build, [a, b, c]))
        assert worst < 1e-6
