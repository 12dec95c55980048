import numpy as np
import pytest

from moelab.codec import compress_eb, decompress_eb, ratio
from moelab.quantizer import (
    SUPPORTED_BITS, dequantize_uniform, deserialize_quantized,
    quantization_ratio, quantize_uniform, serialize_quantized,
)


def roundtrip(x, bits):
    return dequantize_uniform(quantize_uniform(x, bits))


class TestQuantizer:
    def test_constant_exact_at_every_width(self):
        x = np.full(257, -4.2)
        for bits in SUPPORTED_BITS:
            assert np.array_equal(roundtrip(x, bits), x)

    def test_endpoints_exact_8bit(self):
        from moelab.quantizer import _unpack_codes

        x = np.array([0.0, 1.0])
        block = quantize_uniform(x, 8)
        codes = _unpack_codes(block.packed, 8, 2)
        assert codes.tolist() == [0, 255]
        assert np.array_equal(dequantize_uniform(block), x)

    def test_worst_case_error_formula(self):
        rng = np.random.default_rng(0)
        for bits in SUPPORTED_BITS:
            for _ in range(20):
                x = rng.uniform(-1, 1, 500)
                limit = (x.max() - x.min()) / (2 * (2 ** bits - 1))
                err = np.abs(x - roundtrip(x, bits)).max()
                assert err <= limit + 1e-12

    def test_4bit_bound_on_unit_interval(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, 4000)
        x[0], x[1] = -1.0, 1.0  # pin the range
        err = np.abs(x - roundtrip(x, 4)).max()
        assert err <= 1 / 15 + 1e-12

    def test_reconstruction_stays_in_range(self):
        rng = np.random.default_rng(2)
        for bits in SUPPORTED_BITS:
            x = rng.standard_normal(1000) * 100
            y = roundtrip(x, bits)
            assert y.min() >= x.min() and y.max() <= x.max()

    def test_unsupported_width_rejected(self):
        for bits in (0, 1, 5, 16, 64):
            with pytest.raises(ValueError):
                quantize_uniform(np.arange(4.0), bits)

    def test_bad_input_rejected(self):
        with pytest.raises(ValueError):
            quantize_uniform(np.zeros(0), 4)
        with pytest.raises(ValueError):
            quantize_uniform(np.array([1.0, np.nan]), 4)

    def test_serialize_roundtrip(self):
        x = np.random.default_rng(3).standard_normal(123)
        block = quantize_uniform(x, 3)
        back = deserialize_quantized(serialize_quantized(block))
        assert back == block
        assert np.array_equal(dequantize_uniform(back), dequantize_uniform(block))

    def test_ratio_scales_with_width(self):
        x = np.random.default_rng(4).standard_normal(10 ** 4)
        r8 = quantization_ratio(quantize_uniform(x, 8))
        r2 = quantization_ratio(quantize_uniform(x, 2))
        assert r2 > r8 > 7.5


class TestCodecContrast:
    """Where the per-element bound beats range-coupled quantization.

    Heavy-tailed weights stretch the min-max range, so 4-bit uniform
    quantization's worst-case error explodes while the bounded codec keeps
    every element within a far smaller bound at an equal or better ratio.
    """

    def test_heavy_tailed_weights(self):
        rng = np.random.default_rng(2718)
        x = rng.standard_cauchy(10 ** 5) * 0.02  # weight-like, heavy tails

        qblock = quantize_uniform(x, 4)
        q_err = np.abs(x - dequantize_uniform(qblock)).max()
        q_ratio = quantization_ratio(qblock)

        bound = q_err / 100.0
        cblock = compress_eb(x, bound)
        c_err = np.abs(x - decompress_eb(cblock)).max()
        c_ratio = ratio(cblock, x)

        assert c_err <= bound
        assert bound < q_err
        assert c_ratio >= q_ratio, (c_ratio, q_ratio)
