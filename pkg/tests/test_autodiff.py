import numpy as np
import pytest

from mdam import autodiff as ad


def rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def check_grad(build, params, tol=1e-6, seed=0):
    report = ad.finite_diff_check(build, params, eps=1e-5, seed=seed)
    assert report.max_rel_err < tol, report
    return report


class TestMatmul:
    def test_identity(self):
        a = ad.constant(np.eye(2))
        b = ad.constant([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_projector_zeroes_second_row(self):
        p = ad.constant([[1.0, 0.0], [0.0, 0.0]])
        m = ad.constant([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(ad.matmul(p, m).data, [[5, 6], [0, 0]])

    def test_matches_triple_loop_oracle(self):
        a, b = rand((3, 4), 1), rand((4, 2), 2)
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        got = ad.matmul(ad.constant(a), ad.constant(b)).data
        assert np.abs(got - want).max() < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))

    def test_vector_cases(self):
        v, m = rand(4, 3), rand((4, 2), 4)
        assert np.allclose(ad.matmul(ad.constant(v), ad.constant(m)).data, v @ m)
        assert np.allclose(ad.matmul(ad.constant(m.T), ad.constant(v)).data, m.T @ v)

    def test_gradient(self):
        pa = ad.parameter(rand((3, 4), 5))
        pb = ad.parameter(rand((4, 2), 6))
        c = ad.constant(rand((3, 2), 7))
        check_grad(lambda: ad.sum_all(ad.mul(ad.matmul(pa, pb), c)), {"a": pa, "b": pb})


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        y = ad.softmax_lastdim(ad.constant([0.0, 0.0, 0.0, 0.0])).data
        assert np.abs(y - 0.25).max() < 1e-15

    def test_stability_no_overflow(self):
        y = ad.softmax_lastdim(ad.constant([1000.0, 0.0])).data
        assert abs(y[0] - 1.0) < 1e-12 and abs(y[1]) < 1e-12

    def test_masked_two_way_closed_form(self):
        y = ad.softmax_lastdim(ad.constant([1.0, 2.0, 3.0]),
                               mask=np.array([True, False, True])).data
        e2 = np.exp(2.0)
        want = np.array([1.0 / (1.0 + e2), 0.0, e2 / (1.0 + e2)])
        assert np.abs(y - want).max() < 1e-12
        assert y[1] == 0.0

    def test_rows_sum_to_one(self):
        x = rand((5, 7), 8)
        mask = np.random.default_rng(9).random((5, 7)) > 0.3
        mask[:, 0] = True
        y = ad.softmax_lastdim(ad.constant(x), mask=mask).data
        assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-12
        assert (y[~mask] == 0.0).all()

    def test_all_masked_row_raises(self):
        with pytest.raises(ad.DegenerateMaskError):
            ad.softmax_lastdim(ad.constant([1.0, 2.0]), mask=np.array([False, False]))

    def test_gradient_masked(self):
        x = ad.parameter(rand((3, 5), 10))
        mask = np.ones((3, 5), dtype=bool)
        mask[:, 3] = False
        c = ad.constant(rand((3, 5), 11))
        check_grad(lambda: ad.sum_all(ad.mul(ad.softmax_lastdim(x, mask=mask), c)), {"x": x})


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        y = ad.layer_norm_lastdim(ad.constant([3.0, 3.0, 3.0, 3.0])).data
        assert np.abs(y).max() < 1e-12

    def test_two_point_row(self):
        y = ad.layer_norm_lastdim(ad.constant([1.0, 3.0])).data
        assert np.abs(y - [-1.0, 1.0]).max() < 1e-5  # eps inside the sqrt

    def test_row_stats(self):
        x = rand((4, 64), 12)
        y = ad.layer_norm_lastdim(ad.constant(x)).data
        assert np.abs(y.mean(axis=-1)).max() < 1e-10
        assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-4

    def test_gradient(self):
        x = ad.parameter(rand((3, 8), 13))
        c = ad.constant(rand((3, 8), 14))
        check_grad(lambda: ad.sum_all(ad.mul(ad.layer_norm_lastdim(x), c)), {"x": x})


class TestConvMaxpool:
    def test_output_width_is_channels_times_windows(self):
        rng = np.random.default_rng(15)
        x = ad.constant(rng.normal(size=(10, 305)))
        filters = [(ad.constant(rng.normal(size=(w * 305, 128))), ad.constant(np.zeros(128)))
                   for w in (1, 2, 3, 4)]
        out = ad.conv1d_maxpool(x, filters, np.ones(10, dtype=bool))
        assert out.shape == (512,)

    def test_zero_input_zero_filters(self):
        x = ad.constant(np.zeros((6, 4)))
        filters = [(ad.constant(np.zeros((w * 4, 3))), ad.constant(np.zeros(3)))
                   for w in (1, 2)]
        out = ad.conv1d_maxpool(x, filters, np.ones(6, dtype=bool))
        assert np.abs(out.data).max() == 0.0

    def test_hand_rolled_window_sum(self):
        # width 2, one filter summing the window entries of [1,3,2,0,4]
        x = ad.constant(np.array([[1.0], [3.0], [2.0], [0.0], [4.0]]))
        filters = [(ad.constant(np.ones((2, 1))), ad.constant(np.zeros(1)))]
        # widths start at 1, so pad a width-1 filter of zeros in front
        filters = [(ad.constant(np.zeros((1, 1))), ad.constant(np.zeros(1)))] + filters
        out = ad.conv1d_maxpool(x, filters, np.ones(5, dtype=bool))
        assert out.data[1] == 5.0  # max over [4, 5, 2, 4]

    def test_mask_excludes_touching_windows(self):
        x = ad.constant(np.arange(10.0)[:, None])
        mask = np.array([True, True, False, True, True, True, False, True, True, True])
        starts = ad.valid_window_starts(mask, 3)
        assert list(starts) == [3, 7]

    def test_no_valid_position_raises(self):
        x = ad.constant(np.zeros((3, 2)))
        filters = [(ad.constant(np.zeros((2, 1))), ad.constant(np.zeros(1)))]
        with pytest.raises(ad.EmptySequenceError):
            ad.conv1d_maxpool(x, filters, np.zeros(3, dtype=bool))

    def test_width_without_windows_contributes_zeros(self):
        rng = np.random.default_rng(16)
        x = ad.constant(rng.normal(size=(1, 4)))
        filters = [(ad.constant(rng.normal(size=(w * 4, 3))), ad.constant(rng.normal(size=3)))
                   for w in (1, 2, 3)]
        out = ad.conv1d_maxpool(x, filters, np.ones(1, dtype=bool))
        assert out.shape == (9,)
        assert np.abs(out.data[3:]).max() == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(17)
        x = ad.parameter(rng.normal(size=(6, 5)))
        ws = [ad.parameter(rng.normal(size=(w * 5, 4))) for w in (1, 2, 3)]
        bs = [ad.parameter(rng.normal(size=4)) for _ in (1, 2, 3)]
        mask = np.array([True, True, True, True, False, True])
        c = ad.constant(rng.normal(size=12))

        def build():
            out = ad.conv1d_maxpool(x, list(zip(ws, bs)), mask)
            return ad.sum_all(ad.mul(out, c))

        params = {"x": x}
        params.update({f"w{i}": w for i, w in enumerate(ws)})
        params.update({f"b{i}": b for i, b in enumerate(bs)})
        check_grad(build, params)


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.parameter(rand((3, 4), 18))
        ad.backward(ad.sum_all(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_tanh_closed_form(self):
        x = ad.parameter(rand(6, 19))
        ad.backward(ad.sum_all(ad.tanh(x)))
        assert np.abs(x.grad - (1 - np.tanh(x.data) ** 2)).max() < 1e-12

    def test_linear_functional_gives_constant(self):
        c = rand((2, 5), 20)
        x = ad.parameter(rand((2, 5), 21))
        ad.backward(ad.sum_all(ad.mul(x, ad.constant(c))))
        assert np.array_equal(x.grad, c)

    def test_non_scalar_loss_raises(self):
        x = ad.parameter(rand(3, 22))
        with pytest.raises(ad.DimensionError):
            ad.backward(ad.tanh(x))

    def test_double_backward_raises(self):
        x = ad.parameter(rand(3, 23))
        loss = ad.sum_all(ad.tanh(x))
        ad.backward(loss)
        with pytest.raises(ad.GraphStateError):
            ad.backward(loss)

    def test_no_grad_tensor_never_accumulates(self):
        x = ad.constant(rand(3, 24))
        y = ad.parameter(rand(3, 25))
        ad.backward(ad.sum_all(ad.mul(x, y)))
        assert x.grad is None and y.grad is not None

    def test_repeated_forward_bitwise_identical(self):
        x = ad.parameter(rand((4, 4), 26))
        w = ad.parameter(rand((4, 4), 27))

        def run():
            return ad.tanh(ad.matmul(x, w)).data.copy()

        assert np.array_equal(run(), run())


class TestPrimitiveGradients:
    """Every registered op passes the finite-difference oracle in isolation."""

    def test_elementwise_and_shapes(self):
        rng = np.random.default_rng(28)
        a = ad.parameter(rng.normal(size=(3, 4)))
        b = ad.parameter(rng.normal(size=(3, 4)))
        v = ad.parameter(rng.normal(size=4))
        c = ad.constant(rng.normal(size=(3, 4)))

        cases = {
            "add": lambda: ad.add(a, b),
            "add_broadcast": lambda: ad.add(a, v),
            "sub": lambda: ad.sub(a, b),
            "mul": lambda: ad.mul(a, b),
            "mul_broadcast": lambda: ad.mul(a, v),
            "neg": lambda: ad.neg(a),
            "scale": lambda: ad.scale(a, -2.5),
            "tanh": lambda: ad.tanh(a),
            "relu": lambda: ad.relu(a),
            "reshape": lambda: ad.reshape(a, (4, 3)),
            "transpose": lambda: ad.transpose(a),
            "concat_lastdim": lambda: ad.concat_lastdim([a, b]),
            "concat_rows": lambda: ad.concat_rows([a, b]),
            "layer_norm": lambda: ad.layer_norm_lastdim(a),
            "softmax": lambda: ad.softmax_lastdim(a),
            "tile_rows": lambda: ad.tile_rows(v, 5),
            "take_row": lambda: ad.take_row(a, 1),
            "gather_rows": lambda: ad.gather_rows(a, [0, 2, 2]),
            "scatter_rows": lambda: ad.scatter_rows(a, [1, 3, 4], 6),
            "stack_rows": lambda: ad.stack_rows([v, v]),
            "sliding_windows": lambda: ad.sliding_windows(a, 2, [0, 1]),
            "reduce_max_axis0": lambda: ad.reduce_max_axis0(a),
            "segment_max_rows": lambda: ad.segment_max_rows(a, [(0, 2), (2, 3)]),
            "log": lambda: ad.log(ad.add(ad.mul(a, a), 1.0)),
        }
        for name, fn in cases.items():
            out = fn()
            cc = ad.constant(np.random.default_rng(hash(name) % 2**32).normal(size=out.shape))
            report = ad.finite_diff_check(
                lambda fn=fn, cc=cc: ad.sum_all(ad.mul(fn(), cc)),
                {"a": a, "b": b, "v": v}, eps=1e-5)
            assert report.max_rel_err < 1e-6, (name, report)

    def test_dropout_gradient_with_fixed_seed(self):
        x = ad.parameter(np.random.default_rng(29).normal(size=(4, 6)))

        def build():
            rng = np.random.default_rng(1234)
            return ad.sum_all(ad.dropout(x, 0.4, rng))

        check_grad(build, {"x": x})

    def test_dropout_eval_noop(self):
        x = ad.constant(rand((3, 3), 30))
        assert ad.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_dropout_preserves_expectation(self):
        rng = np.random.default_rng(31)
        x = ad.constant(np.ones((2000, 10)))
        y = ad.dropout(x, 0.3, rng).data
        assert abs(y.mean() - 1.0) < 0.02


class TestFiniteDiff:
    def test_linear_layer_square_loss(self):
        rng = np.random.default_rng(32)
        w = ad.parameter(rng.normal(size=(5, 3)))
        x = ad.constant(rng.normal(size=(4, 5)))
        t = ad.constant(rng.normal(size=(4, 3)))

        def build():
            d = ad.sub(ad.matmul(x, w), t)
            return ad.sum_all(ad.mul(d, d))

        report = ad.finite_diff_check(build, {"w": w})
        assert report.max_rel_err < 1e-7

    def test_zero_parameter_function_returns_zero(self):
        report = ad.finite_diff_check(lambda: ad.constant(1.0), {})
        assert report.max_rel_err == 0.0 and report.worst_path is None

    def test_samples_at_least_fifty(self):
        rng = np.random.default_rng(33)
        w = ad.parameter(rng.normal(size=(20, 20)))
        seen = []
        orig = w.data.copy()

        def build():
            seen.append(True)
            return ad.sum_all(ad.tanh(w))

        ad.finite_diff_check(build, {"w": w})
        # 1 analytic + 2 per sampled coordinate
        assert len(seen) == 1 + 2 * 50
        assert np.array_equal(w.data, orig)
