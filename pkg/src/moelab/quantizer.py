"""Uniform affine min-max quantizer, the baseline the error-bounded codec is
measured against.

The worst-case reconstruction error is (max-min)/(2*(2^bits-1)): a single
outlier in the tensor stretches the range and with it the error of every
other element. That coupling, not the bit width itself, is what the bounded
codec avoids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SUPPORTED_BITS = (2, 3, 4, 8)

_HEADER = struct.Struct("<BQdd")  # bits, count, vmin, vmax


@dataclass(frozen=True)
class QuantizedBlock:
    bits: int
    count: int
    vmin: float
    vmax: float
    packed: bytes

    @property
    def nbytes(self) -> int:
        """Serialized size: header plus packed codes."""
        return _HEADER.size + len(self.packed)


def _pack_codes(codes: np.ndarray, bits: int) -> bytes:
    bitmat = ((codes[:, None] >> np.arange(bits - 1, -1, -1)) & 1).astype(np.uint8)
    return np.packbits(bitmat.reshape(-1)).tobytes()


def _unpack_codes(packed: bytes, bits: int, count: int) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), count=count * bits)
    bitmat = flat.reshape(count, bits).astype(np.int64)
    weights = 1 << np.arange(bits - 1, -1, -1)
    return bitmat @ weights


def quantize_uniform(x: np.ndarray, bits: int) -> QuantizedBlock:
    """Affine min-max quantization to the given bit width."""
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit width {bits}; choose one of {SUPPORTED_BITS}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains NaN or Inf")
    vmin = float(x.min())
    vmax = float(x.max())
    levels = (1 << bits) - 1
    if vmax > vmin:
        t = (x - vmin) / (vmax - vmin)
        codes = np.clip(np.rint(t * levels), 0, levels).astype(np.int64)
    else:
        codes = np.zeros(x.size, dtype=np.int64)
    return QuantizedBlock(
        bits=bits, count=x.size, vmin=vmin, vmax=vmax, packed=_pack_codes(codes, bits)
    )


def dequantize_uniform(block: QuantizedBlock) -> np.ndarray:
    """Reconstruct; values land on the level grid inside [vmin, vmax].

    The interpolation form reproduces the range endpoints exactly (code 0
    gives vmin, the top code gives vmax bit-for-bit).
    """
    codes = _unpack_codes(block.packed, block.bits, block.count)
    levels = (1 << block.bits) - 1
    if block.vmax > block.vmin:
        t = codes / levels
        return np.clip((1.0 - t) * block.vmin + t * block.vmax, block.vmin, block.vmax)
    return np.full(block.count, block.vmin)


def quantization_ratio(block: QuantizedBlock) -> float:
    """Original float64 bytes over serialized block bytes."""
    return (block.count * 8) / block.nbytes


def serialize_quantized(block: QuantizedBlock) -> bytes:
    return _HEADER.pack(block.bits, block.count, block.vmin, block.vmax) + block.packed


def deserialize_quantized(data: bytes) -> QuantizedBlock:
    if len(data) < _HEADER.size:
        raise ValueError("truncated quantized block")
    bits, count, vmin, vmax = _HEADER.unpack_from(data, 0)
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit width {bits}")
    packed = data[_HEADER.size:]
    expected = (count * bits + 7) // 8
    if len(packed) != expected:
        raise ValueError(f"expected {expected} packed bytes, got {len(packed)}")
    return QuantizedBlock(bits=bits, count=count, vmin=vmin, vmax=vmax, packed=packed)
