import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from moelab.codec import (
    BlockFormatError, CompressedBlock, compress_eb, decompress_eb, ratio,
    read_melc, write_melc,
)


def roundtrip(x, bound):
    return decompress_eb(compress_eb(x, bound))


class TestHardBound:
    def test_random_tensors_within_bound(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            n = int(rng.integers(1, 3000))
            style = trial % 4
            if style == 0:
                x = np.cumsum(rng.standard_normal(n)) * 0.1
            elif style == 1:
                x = rng.uniform(-1e6, 1e6, n)
            elif style == 2:
                x = rng.standard_normal(n) * 10.0 ** rng.integers(-8, 7)
            else:
                x = np.full(n, float(rng.standard_normal()))
            bound = 10.0 ** -int(rng.integers(1, 7))
            y = roundtrip(x, bound)
            assert y.size == x.size
            assert np.abs(x - y).max() <= bound

    def test_single_element(self):
        for v in (3.7, -1e300, 1e-300, 5e-324, 0.0, 123456.789):
            y = roundtrip(np.array([v]), 1e-6)
            assert abs(y[0] - v) <= 1e-6

    def test_denormal_values(self):
        x = np.array([5e-324, 1e-310, -3e-320, 0.0, 2e-308])
        y = roundtrip(x, 1e-6)
        assert np.abs(x - y).max() <= 1e-6

    def test_alternating_huge_jumps_use_escapes(self):
        x = np.empty(1000)
        x[0::2] = 1e6
        x[1::2] = -1e6
        y = roundtrip(x, 1e-5)
        assert np.abs(x - y).max() <= 1e-5

    @given(
        hnp.arrays(
            np.float64,
            st.integers(1, 400),
            elements=st.floats(
                min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False
            ),
        ),
        st.sampled_from([1e-6, 1e-4, 1e-2, 1e-1]),
    )
    @settings(max_examples=80, deadline=None)
    def test_bound_property(self, x, bound):
        y = roundtrip(x, bound)
        assert np.abs(x - y).max() <= bound


class TestConstantAndSmooth:
    def test_constant_tensor_compresses_hard(self):
        x = np.full(10 ** 5, 3.14159)
        block = compress_eb(x, 1e-3)
        assert np.abs(x - decompress_eb(block)).max() <= 1e-3
        assert ratio(block, x) > 100

    def test_ratio_monotone_in_bound_on_smooth_input(self):
        rng = np.random.default_rng(4)
        x = np.cumsum(rng.standard_normal(20000)) * 0.01
        ratios = [
            ratio(compress_eb(x, b), x)
            for b in (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
        ]
        assert all(r2 >= r1 for r1, r2 in zip(ratios, ratios[1:])), ratios

    def test_incompressible_reported_honestly(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(-1e6, 1e6, 20000)
        block = compress_eb(x, 1e-9)
        r = ratio(block, x)
        assert r < 1.2  # escapes dominate; no fake gains


class TestIdempotence:
    def test_second_roundtrip_bitwise_equal(self):
        rng = np.random.default_rng(14)
        for style in range(3):
            x = (
                np.cumsum(rng.standard_normal(5000)) * 0.2
                if style == 0 else
                rng.uniform(-100, 100, 5000)
                if style == 1 else
                rng.standard_normal(5000) * 1e-4
            )
            y1 = roundtrip(x, 1e-3)
            y2 = roundtrip(y1, 1e-3)
            assert np.array_equal(y1, y2)

    def test_serialization_stable_across_runs(self):
        rng = np.random.default_rng(21)
        x = np.cumsum(rng.standard_normal(3000)) * 0.5
        a = compress_eb(x, 1e-2)
        b = compress_eb(x.copy(), 1e-2)
        assert a.data == b.data


class TestFormatValidation:
    def test_corrupt_magic(self):
        block = compress_eb(np.arange(10.0), 1e-3)
        bad = b"XXXX" + block.data[4:]
        with pytest.raises(BlockFormatError, match="magic"):
            decompress_eb(CompressedBlock(data=bad))

    def test_bad_version(self):
        block = compress_eb(np.arange(10.0), 1e-3)
        bad = block.data[:4] + b"\x07" + block.data[5:]
        with pytest.raises(BlockFormatError, match="version"):
            decompress_eb(CompressedBlock(data=bad))

    def test_truncated_payload(self):
        block = compress_eb(np.arange(100.0), 1e-3)
        with pytest.raises(BlockFormatError):
            decompress_eb(CompressedBlock(data=block.data[:-3]))

    def test_truncated_header(self):
        with pytest.raises(BlockFormatError, match="header"):
            decompress_eb(CompressedBlock(data=b"MELC\x01"))

    def test_trailing_garbage(self):
        block = compress_eb(np.arange(10.0), 1e-3)
        with pytest.raises(BlockFormatError):
            decompress_eb(CompressedBlock(data=block.data + b"\x00"))

    def test_error_contract_on_bad_inputs(self):
        with pytest.raises(ValueError):
            compress_eb(np.arange(4.0), 0.0)
        with pytest.raises(ValueError):
            compress_eb(np.arange(4.0), -1e-3)
        with pytest.raises(ValueError):
            compress_eb(np.array([1.0, np.nan]), 1e-3)
        with pytest.raises(ValueError):
            compress_eb(np.array([1.0, np.inf]), 1e-3)

    def test_header_fields_parse(self):
        x = np.arange(17.0)
        block = compress_eb(x, 2.5e-3)
        assert block.count == 17
        assert block.error_bound == 2.5e-3
        assert block.predictor == 1


class TestFileRoundTrip:
    def test_melc_file(self, tmp_path):
        x = np.cumsum(np.random.default_rng(3).standard_normal(500))
        block = compress_eb(x, 1e-4)
        path = tmp_path / "weights.melc"
        write_melc(path, block)
        back = read_melc(path)
        assert back.data == block.data
        assert np.abs(decompress_eb(back) - x).max() <= 1e-4

    def test_multidim_input_flattens(self):
        x = np.random.default_rng(5).standard_normal((32, 64))
        y = roundtrip(x, 1e-3)
        assert y.shape == (32 * 64,)
        assert np.abs(x.reshape(-1) - y).max() <= 1e-3
