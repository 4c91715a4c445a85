import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arunet.errors import DataError, NumericError, ShapeError
from arunet.tensor import (Shape, Tensor, channel_slice, concat_channels,
                           deserialize, elementwise_add, elementwise_mul,
                           ones, reduce, serialize, stack, zeros)


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


class TestShape:
    def test_rank_limit(self):
        with pytest.raises(ShapeError):
            Shape((2, 2, 2, 2, 2, 2))

    def test_positive_extents(self):
        with pytest.raises(ShapeError):
            Shape((3, 0, 2))

    def test_count(self):
        assert Shape((2, 3, 4)).count == 24
        assert Shape(()).count == 1

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=5), st.data())
    def test_flat_index_roundtrip(self, dims, data):
        shape = Shape(tuple(dims))
        flat = data.draw(st.integers(0, shape.count - 1))
        coords = shape.coords(flat)
        assert shape.flat_index(coords) == flat
        assert all(0 <= c < d for c, d in zip(coords, dims))


class TestConstruction:
    def test_rejects_nan(self):
        with pytest.raises(NumericError, match="flat index 2"):
            Tensor([1.0, 2.0, np.nan])

    def test_rejects_inf(self):
        with pytest.raises(NumericError):
            Tensor([[1.0], [np.inf]])

    def test_immutable(self):
        t = t64([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_precision_selection(self):
        assert Tensor([1.0], precision=32).precision == 32
        assert Tensor([1.0], precision=64).precision == 64
        assert t64([1.0]).astype(32).precision == 32


class TestAdd:
    def test_additive_identity(self):
        out = elementwise_add(t64([1.0, 2.0]), t64([0.0, 0.0]))
        assert out.data.tolist() == [1.0, 2.0]

    def test_scalar_arithmetic(self):
        out = elementwise_add(t64([1.0, 2.0]), t64([3.0, 4.0]))
        assert out.data.tolist() == [4.0, 6.0]

    def test_roundtrip_on_random(self, rng):
        # Integer-valued draws make the algebraic round-trip exact.
        a = Tensor(rng.integers(-50, 50, (2, 3, 3, 3, 4)).astype(np.float64))
        b = Tensor(rng.integers(-50, 50, (2, 3, 3, 3, 4)).astype(np.float64))
        out = elementwise_add(a, b)
        assert np.array_equal(out.data - a.data, b.data)

    def test_shape_mismatch_reports_both(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            elementwise_add(t64([1.0, 2.0]), t64([1.0, 2.0, 3.0]))

    def test_mixed_precision_rejected(self):
        with pytest.raises(ShapeError):
            elementwise_add(Tensor([1.0], precision=32), Tensor([1.0], precision=64))

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=64,
                              allow_subnormal=False), min_size=3, max_size=3))
    def test_commutative_and_associative(self, vals):
        a, b, c = (t64([v]) for v in vals)
        ab = elementwise_add(a, b)
        ba = elementwise_add(b, a)
        assert np.array_equal(ab.data, ba.data)  # commutativity is exact
        left = elementwise_add(ab, c).data[0]
        right = elementwise_add(a, elementwise_add(b, c)).data[0]
        scale = sum(abs(v) for v in vals) + 1.0
        assert abs(left - right) <= 4 * np.finfo(np.float64).eps * scale


class TestMul:
    def test_multiplicative_identity(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4)))
        out = elementwise_mul(a, ones((2, 3, 4), precision=64))
        assert np.array_equal(out.data, a.data)

    def test_mask_semantics(self, rng):
        a = Tensor(rng.standard_normal((2, 2, 2, 2, 3)))
        mask = t64(np.array([0.0, 1.0, 0.0]).reshape(1, 1, 1, 1, 3))
        out = elementwise_mul(a, mask)
        assert np.all(out.data[..., 0] == 0)
        assert np.all(out.data[..., 2] == 0)
        assert np.array_equal(out.data[..., 1], a.data[..., 1])

    def test_broadcast_equals_tiling(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 2, 2, 4)))
        b = Tensor(rng.standard_normal((1, 3, 1, 1, 4)))
        tiled = Tensor(np.tile(b.data, (2, 1, 2, 2, 1)))
        assert np.array_equal(elementwise_mul(a, b).data,
                              elementwise_mul(a, tiled).data)

    def test_commutative_when_same_shape(self, rng):
        a = Tensor(rng.standard_normal((3, 3)))
        b = Tensor(rng.standard_normal((3, 3)))
        assert np.array_equal(elementwise_mul(a, b).data,
                              elementwise_mul(b, a).data)

    def test_non_broadcastable_rejected(self):
        with pytest.raises(ShapeError, match="not broadcastable"):
            elementwise_mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


class TestConcat:
    def test_extent_arithmetic(self, rng):
        a = Tensor(rng.standard_normal((1, 2, 2, 2, 2)))
        b = Tensor(rng.standard_normal((1, 2, 2, 2, 3)))
        assert concat_channels(a, b).dims == (1, 2, 2, 2, 5)

    def test_roundtrip_with_slice(self, rng):
        a = Tensor(rng.standard_normal((1, 2, 2, 2, 3)))
        z = zeros((1, 2, 2, 2, 3), precision=64)
        back = channel_slice(concat_channels(a, z), 0, 3)
        assert np.array_equal(back.data, a.data)

    def test_order(self, rng):
        a = Tensor(rng.standard_normal((2, 2, 2, 2, 2)))
        b = Tensor(rng.standard_normal((2, 2, 2, 2, 2)))
        out = concat_channels(a, b)
        assert np.array_equal(out.data[..., a.dims[-1]], b.data[..., 0])

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="spatial mismatch"):
            concat_channels(Tensor(np.zeros((1, 2, 2, 2, 1))),
                            Tensor(np.zeros((1, 2, 3, 2, 1))))


class TestReduce:
    def test_mean_all_axes(self):
        out = reduce(ones((2, 2), precision=64), (0, 1), "mean")
        assert out.dims == (1, 1)
        assert out.data[0, 0] == 1.0

    def test_max_axis0(self):
        out = reduce(t64([[1.0, 5.0], [3.0, 2.0]]), (0,), "max")
        assert out.data.tolist() == [[3.0, 5.0]]

    def test_mean_equals_sum_over_count(self, rng):
        t = Tensor(rng.standard_normal((3, 4, 5)))
        mean = reduce(t, (0, 2), "mean").data
        summed = reduce(t, (0, 2), "sum").data / 15.0
        assert np.abs(mean - summed).max() < 1e-12

    def test_duplicate_axis_rejected(self):
        with pytest.raises(ShapeError, match="duplicate"):
            reduce(ones((2, 2)), (0, 0), "mean")

    def test_out_of_range_axis_rejected(self):
        with pytest.raises(ShapeError, match="out of range"):
            reduce(ones((2, 2)), (2,), "sum")

    def test_bad_mode_rejected(self):
        with pytest.raises(ShapeError):
            reduce(ones((2, 2)), (0,), "median")


class TestStack:
    def test_stack(self, rng):
        parts = [Tensor(rng.standard_normal((2, 2, 2, 1))) for _ in range(3)]
        out = stack(parts)
        assert out.dims == (3, 2, 2, 2, 1)
        assert np.array_equal(out.data[1], parts[1].data)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            stack([])


class TestSerialization:
    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=0, max_size=5),
           st.sampled_from([32, 64]), st.integers(0, 2 ** 31))
    def test_roundtrip(self, dims, precision, seed):
        rng = np.random.default_rng(seed)
        t = Tensor(rng.standard_normal(tuple(dims)), precision=precision)
        back, offset = deserialize(serialize(t))
        assert offset == len(serialize(t))
        assert back.dims == t.dims
        assert back.precision == t.precision
        assert np.array_equal(back.data, t.data)

    def test_truncated_header(self):
        with pytest.raises(DataError, match="truncated"):
            deserialize(b"\x01\x00")

    def test_truncated_payload(self):
        blob = serialize(t64([1.0, 2.0, 3.0]))
        with pytest.raises(DataError, match="truncated tensor payload"):
            deserialize(blob[:-4])

    def test_unknown_tag(self):
        blob = bytearray(serialize(t64([1.0])))
        blob[16] = 9  # precision tag byte
        with pytest.raises(DataError, match="unknown precision tag"):
            deserialize(bytes(blob))
