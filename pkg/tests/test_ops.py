import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arunet import oracles, ops
from arunet.autodiff import Parameter, Tape, backward
from arunet.errors import ShapeError
from arunet.ops import ConvSpec
from arunet.tensor import Tensor


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def run_conv(x, spec, w, b):
    tape = Tape()
    return ops.conv3d(tape.constant(Tensor(x)), spec, Tensor(w), Tensor(b)).value.data


class TestConvSpec:
    def test_effective_kernel(self):
        spec = ConvSpec(1, 1, (3, 3, 3), dilation=9)
        assert spec.effective_kernel == (19, 19, 19)

    def test_invalid_dilation(self):
        with pytest.raises(ShapeError):
            ConvSpec(1, 1, (3, 3, 3), dilation=0)

    def test_invalid_padding(self):
        with pytest.raises(ShapeError):
            ConvSpec(1, 1, (3, 3, 3), padding="reflect")


class TestConv3d:
    def test_identity_convolution(self, rng):
        x = rng.standard_normal((1, 3, 4, 3, 1))
        spec = ConvSpec(1, 1, (1, 1, 1))
        out = run_conv(x, spec, np.ones((1, 1, 1, 1, 1)), np.zeros(1))
        assert np.array_equal(out, x)

    def test_neighbor_counting(self):
        x = np.ones((1, 5, 5, 5, 1))
        spec = ConvSpec(1, 1, (3, 3, 3))
        out = run_conv(x, spec, np.ones((3, 3, 3, 1, 1)), np.zeros(1))
        assert out[0, 2, 2, 2, 0] == 27.0
        assert out[0, 0, 0, 0, 0] == 8.0

    def test_loop_oracle_dilated_64(self, rng):
        x = rng.standard_normal((1, 9, 9, 9, 2))
        spec = ConvSpec(2, 2, (3, 3, 3), dilation=3)
        w = rng.standard_normal(spec.weight_dims())
        b = rng.standard_normal(2)
        got = run_conv(x, spec, w, b)
        ref = oracles.conv3d_reference(x, w, b, dilation=3)
        assert np.abs(got - ref).max() < 1e-12

    def test_loop_oracle_dilated_32(self, rng):
        x = rng.standard_normal((1, 9, 9, 9, 2)).astype(np.float32)
        spec = ConvSpec(2, 2, (3, 3, 3), dilation=3)
        w = rng.standard_normal(spec.weight_dims()).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        got = run_conv(x, spec, w, b)
        ref = oracles.conv3d_reference(x.astype(np.float64), w.astype(np.float64),
                                       b.astype(np.float64), dilation=3)
        # 1e-6 relative to the summation's conditioning scale: a 54-term f32
        # accumulation carries ~sqrt(54)*eps32 of reordering noise, so plain
        # elementwise normalization would flag healthy cancellation.
        scale = oracles.conv3d_reference(np.abs(x).astype(np.float64),
                                         np.abs(w).astype(np.float64),
                                         np.abs(b).astype(np.float64), dilation=3)
        assert (np.abs(got - ref) / (scale + 1.0)).max() < 1e-6

    @pytest.mark.parametrize("kernel,dilation", [((1, 1, 1), 1), ((3, 3, 3), 1),
                                                 ((3, 3, 3), 3), ((3, 3, 3), 9),
                                                 ((7, 7, 7), 1)])
    def test_same_preserves_extents(self, rng, kernel, dilation):
        x = rng.standard_normal((1, 6, 8, 6, 2))
        spec = ConvSpec(2, 3, kernel, dilation=dilation)
        w = rng.standard_normal(spec.weight_dims())
        out = run_conv(x, spec, w, np.zeros(3))
        assert out.shape == (1, 6, 8, 6, 3)

    def test_even_kernel_pads_trailing_side(self):
        # Total pad is odd for k=2, so the extra zero goes on the trailing edge.
        x = np.zeros((1, 4, 4, 4, 1))
        x[0, 0, 0, 0, 0] = 1.0
        spec = ConvSpec(1, 1, (2, 2, 2))
        w = np.ones((2, 2, 2, 1, 1))
        out = run_conv(x, spec, w, np.zeros(1))
        ref = oracles.conv3d_reference(x, w, np.zeros(1))
        assert np.array_equal(out, ref)
        assert out.shape == (1, 4, 4, 4, 1)

    def test_dilation_identity_exact_int(self, rng):
        for dil in (3, 9):
            spec = ConvSpec(2, 2, (3, 3, 3), dilation=dil)
            x = rng.integers(-4, 5, (1, 6, 6, 6, 2)).astype(np.float64)
            w = rng.integers(-4, 5, spec.weight_dims()).astype(np.float64)
            dense = oracles.inflate_kernel(w, dil)
            spec_dense = ConvSpec(2, 2, dense.shape[:3], dilation=1)
            a = run_conv(x, spec, w, np.zeros(2))
            b = run_conv(x, spec_dense, dense, np.zeros(2))
            assert np.array_equal(a, b)

    def test_stride_two_matches_oracle(self, rng):
        x = rng.standard_normal((1, 6, 6, 6, 2))
        spec = ConvSpec(2, 2, (3, 3, 3), stride=2)
        w = rng.standard_normal(spec.weight_dims())
        b = rng.standard_normal(2)
        got = run_conv(x, spec, w, b)
        ref = oracles.conv3d_reference(x, w, b, stride=2)
        assert got.shape == (1, 3, 3, 3, 2)
        assert np.abs(got - ref).max() < 1e-12

    def test_valid_padding_kernel_too_large_rejected(self, rng):
        spec = ConvSpec(1, 1, (3, 3, 3), dilation=3, padding="valid")
        x = rng.standard_normal((1, 5, 5, 5, 1))
        with pytest.raises(ShapeError, match="larger than input"):
            run_conv(x, spec, np.zeros(spec.weight_dims()), np.zeros(1))

    def test_channel_mismatch_rejected(self, rng):
        spec = ConvSpec(3, 1, (1, 1, 1))
        x = rng.standard_normal((1, 2, 2, 2, 2))
        with pytest.raises(ShapeError, match="channels"):
            run_conv(x, spec, np.zeros(spec.weight_dims()), np.zeros(1))


class TestPool:
    def test_global_avg_ones(self):
        tape = Tape()
        out = ops.pool3d(tape.constant(Tensor(np.ones((1, 2, 2, 2, 3)))),
                         "avg", "global")
        assert out.value.dims == (1, 1, 1, 1, 3)
        assert np.array_equal(out.value.data, np.ones((1, 1, 1, 1, 3)))

    def test_channel_max(self):
        x = np.zeros((1, 2, 2, 2, 2))
        x[..., 0] = -1.0
        x[..., 1] = 4.0
        tape = Tape()
        out = ops.pool3d(tape.constant(t64(x)), "max", "channel")
        assert out.value.dims == (1, 2, 2, 2, 1)
        assert np.all(out.value.data == 4.0)

    def test_window_max_matches_scan_oracle(self, rng):
        x = rng.standard_normal((2, 4, 6, 4, 3))
        tape = Tape()
        out = ops.pool3d(tape.constant(Tensor(x)), "max", "window")
        assert np.array_equal(out.value.data, oracles.maxpool2_reference(x))

    def test_window_halves_extents(self, rng):
        tape = Tape()
        out = ops.pool3d(tape.constant(Tensor(rng.standard_normal((1, 4, 4, 4, 2)))),
                         "avg", "window")
        assert out.value.dims == (1, 2, 2, 2, 2)

    def test_window_odd_extent_rejected(self, rng):
        tape = Tape()
        x = tape.constant(Tensor(rng.standard_normal((1, 3, 4, 4, 1))))
        with pytest.raises(ShapeError, match="even"):
            ops.pool3d(x, "max", "window")


class TestUpsample:
    def test_ones(self):
        tape = Tape()
        out = ops.upsample3d(tape.constant(Tensor(np.ones((1, 2, 2, 2, 1)))))
        assert out.value.dims == (1, 4, 4, 4, 1)
        assert np.all(out.value.data == 1.0)

    def test_hot_voxel_becomes_block(self):
        x = np.zeros((1, 2, 2, 2, 1))
        x[0, 1, 0, 1, 0] = 7.0
        tape = Tape()
        out = ops.upsample3d(tape.constant(t64(x))).value.data
        block = out[0, 2:4, 0:2, 2:4, 0]
        assert np.all(block == 7.0)
        assert out.sum() == 8 * 7.0

    def test_avg_downsample_roundtrip_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 4, 4, 3)))
        tape = Tape()
        down = ops.pool3d(ops.upsample3d(tape.constant(x)), "avg", "window")
        assert np.array_equal(down.value.data, x.data)


class TestActivations:
    def test_relu(self):
        tape = Tape()
        out = ops.relu(tape.constant(t64([-1.0, 0.0, 2.0])))
        assert out.value.data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_idempotent(self, rng):
        x = Tensor(rng.standard_normal((50,)))
        tape = Tape()
        once = ops.relu(tape.constant(x))
        twice = ops.relu(once)
        assert np.array_equal(once.value.data, twice.value.data)

    def test_sigmoid_at_zero(self):
        tape = Tape()
        out = ops.sigmoid(tape.constant(t64([0.0])))
        assert out.value.data[0] == 0.5

    def test_sigmoid_symmetry_and_stability(self, rng):
        vals = np.concatenate([rng.standard_normal(50) * 3, [-50.0, 50.0]])
        tape = Tape()
        pos = ops.sigmoid(tape.constant(t64(vals))).value.data
        neg = ops.sigmoid(tape.constant(t64(-vals))).value.data
        assert np.abs(pos + neg - 1.0).max() < 1e-7

    def test_sigmoid_strictly_increasing(self):
        grid = np.linspace(-30, 30, 301)
        tape = Tape()
        out = ops.sigmoid(tape.constant(t64(grid))).value.data
        assert np.all(np.diff(out) > 0)


class TestSharedMlp:
    def test_zero_weights_give_zeros(self, rng):
        f = Tensor(rng.standard_normal((2, 1, 1, 1, 8)))
        tape = Tape()
        out = ops.shared_mlp(tape.constant(f), t64(np.zeros((1, 8))),
                             t64(np.zeros((8, 1))))
        assert np.all(out.value.data == 0.0)

    def test_reduction_ratio_gives_hidden_width_one(self):
        # C=8 with ratio 8 squeezes to a single hidden unit.
        w0 = np.zeros((1, 8))
        w1 = np.zeros((8, 1))
        tape = Tape()
        out = ops.shared_mlp(tape.constant(Tensor(np.ones((1, 1, 1, 1, 8)))),
                             t64(w0), t64(w1))
        assert out.value.dims == (1, 1, 1, 1, 8)

    def test_shared_gradient_equals_sum_of_copies(self, rng):
        # Weight-copy oracle: the shared weights' gradient must equal the sum
        # of per-branch gradients computed on independent copies.
        f1 = Tensor(rng.standard_normal((1, 1, 1, 1, 8)))
        f2 = Tensor(rng.standard_normal((1, 1, 1, 1, 8)))
        w0v = rng.standard_normal((1, 8))
        w1v = rng.standard_normal((8, 1))

        shared0 = Parameter("w0", Tensor(w0v))
        shared1 = Parameter("w1", Tensor(w1v))
        tape = Tape()
        loss = ops.sum_all(ops.add(ops.shared_mlp(tape.constant(f1), shared0, shared1),
                                   ops.shared_mlp(tape.constant(f2), shared0, shared1)))
        backward(loss)

        grads = []
        for f in (f1, f2):
            c0 = Parameter("c0", Tensor(w0v))
            c1 = Parameter("c1", Tensor(w1v))
            tape = Tape()
            backward(ops.sum_all(ops.shared_mlp(tape.constant(f), c0, c1)))
            grads.append((c0.grad, c1.grad))
        assert np.allclose(shared0.grad, grads[0][0] + grads[1][0], atol=1e-12)
        assert np.allclose(shared1.grad, grads[0][1] + grads[1][1], atol=1e-12)


class TestLayerNorm:
    def test_constant_slice_gives_zeros(self):
        x = np.full((1, 2, 2, 2, 3), 5.0)
        tape = Tape()
        out = ops.layer_norm(tape.constant(t64(x)), t64(np.ones(3)),
                             t64(np.zeros(3)), 1e-5)
        assert np.all(out.value.data == 0.0)

    def test_alternating_unit_variance(self):
        eps = 1e-12
        x = np.ones((1, 2, 2, 2, 1))
        x[0, ::2, :, :, 0] *= -1
        x[0, 1::2, :, :, 0] *= 1
        flat = np.array([1.0, -1.0] * 4).reshape(1, 2, 2, 2, 1)
        tape = Tape()
        out = ops.layer_norm(tape.constant(t64(flat)), t64(np.ones(1)),
                             t64(np.zeros(1)), eps).value.data
        assert np.abs(np.abs(out) - 1.0 / np.sqrt(1.0 + eps)).max() < 1e-12

    def test_statistics_oracle(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 5, 4, 3)))
        tape = Tape()
        out = ops.layer_norm(tape.constant(x), t64(np.ones(3)), t64(np.zeros(3)),
                             1e-5).value.data
        assert np.abs(out.mean(axis=(1, 2, 3))).max() < 1e-6
        assert np.abs(out.var(axis=(1, 2, 3)) - 1.0).max() < 1e-4

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.5, 20.0), st.floats(-5.0, 5.0))
    def test_affine_rescale_invariance(self, seed, a, b):
        # eps must stay negligible against the scaled variance (a^2 * var >> eps)
        # for the invariance to hold at 1e-5; eps=1e-8 keeps 25000x headroom.
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 3, 4, 3, 2))
        gamma, beta = t64(np.ones(2)), t64(np.zeros(2))
        eps = 1e-8
        tape = Tape()
        base = ops.layer_norm(tape.constant(t64(x)), gamma, beta, eps).value.data
        tape = Tape()
        scaled = ops.layer_norm(tape.constant(t64(a * x + b)), gamma, beta,
                                eps).value.data
        assert np.abs(base - scaled).max() < 1e-5

    def test_eps_must_be_positive(self, rng):
        tape = Tape()
        x = tape.constant(Tensor(rng.standard_normal((1, 2, 2, 2, 1))))
        with pytest.raises(ShapeError, match="eps"):
            ops.layer_norm(x, t64(np.ones(1)), t64(np.zeros(1)), 0.0)


class TestBatchNorm:
    def test_constant_batch_gives_zeros(self):
        x = np.full((2, 2, 2, 2, 3), 2.5)
        tape = Tape()
        out, _, _ = ops.batch_norm(tape.constant(t64(x)), t64(np.ones(3)),
                                   t64(np.zeros(3)), t64(np.zeros(3)),
                                   t64(np.ones(3)), training=True)
        assert np.all(out.value.data == 0.0)

    def test_training_statistics(self, rng):
        x = Tensor(rng.standard_normal((4, 3, 4, 3, 2)) * 3 + 1)
        tape = Tape()
        out, _, _ = ops.batch_norm(tape.constant(x), t64(np.ones(2)),
                                   t64(np.zeros(2)), t64(np.zeros(2)),
                                   t64(np.ones(2)), training=True)
        data = out.value.data
        assert np.abs(data.mean(axis=(0, 1, 2, 3))).max() < 1e-4
        assert np.abs(data.var(axis=(0, 1, 2, 3)) - 1.0).max() < 1e-4

    def test_inference_identity_with_unit_stats(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 2, 2, 2)))
        eps = 1e-5
        tape = Tape()
        out, _, _ = ops.batch_norm(tape.constant(x), t64(np.ones(2)),
                                   t64(np.zeros(2)), t64(np.zeros(2)),
                                   t64(np.ones(2)), training=False, eps=eps)
        assert np.abs(out.value.data - x.data).max() < 2 * eps

    def test_running_stats_update(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 2, 2, 1)) + 4.0)
        tape = Tape()
        _, new_mean, new_var = ops.batch_norm(
            tape.constant(x), t64(np.ones(1)), t64(np.zeros(1)),
            t64(np.zeros(1)), t64(np.ones(1)), training=True, momentum=0.9)
        batch_mean = x.data.mean()
        assert np.abs(new_mean.data[0] - 0.1 * batch_mean) < 1e-12

    def test_batch_of_one_rejected(self, rng):
        tape = Tape()
        x = tape.constant(Tensor(rng.standard_normal((1, 2, 2, 2, 1))))
        with pytest.raises(ShapeError, match="batch >= 2"):
            ops.batch_norm(x, t64(np.ones(1)), t64(np.zeros(1)),
                           t64(np.zeros(1)), t64(np.ones(1)), training=True)
