"""Error-bounded lossy codec for float64 tensors.

Pipeline: order-1 prediction (each element predicted by the previous
*reconstructed* element, the first by 0.0), uniform residual quantization
into bins of width ``2*bound``, canonical prefix coding of the quantization
codes, and raw 8-byte storage for elements the predictor cannot reach
(escapes). Predicting from reconstructed rather than original neighbours is
what makes the bound hold under streaming decompression: the decoder replays
exactly the chain the encoder verified.

Every element satisfies ``|x - x_hat| <= bound`` by construction: the
encoder recomputes the decoder's reconstruction with identical arithmetic
and demotes any element that would violate the bound (half-way rounding,
denormals, extreme magnitudes) to a raw-stored escape.

Container layout, all integers little-endian:

    offset  size  field
    0       4     magic b"MELC"
    4       1     format version (= 1)
    5       8     element count, u64
    13      8     error bound, f64
    21      1     predictor id (= 1: order-1 previous-value)
    22      ...   DEFLATE-wrapped payload

Payload, before the DEFLATE wrapping:

    size  field
    4     prefix-code table size m, u32
    5*m   table entries: symbol i32, code length u8
    8     code stream length in bits, u64
    ...   code stream, MSB-first
    8     escape count, u64
    8*e   raw escape values, f64, in stream order

Quantization codes live in [-32767, 32767]; the out-of-band symbol 32768
marks an escape. A one-symbol alphabet uses zero-length codes (the element
count already determines the stream). The DEFLATE pass is the standard
lossless backend stage: it costs nothing on dense code streams and removes
the one-bit-per-symbol floor on highly redundant ones.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from numba import njit

MAGIC = b"MELC"
FORMAT_VERSION = 1
PREDICTOR_PREVIOUS = 1

# Largest representable quantization code: 16-bit signed range.
CODE_CAP = 32767
ESCAPE_SYMBOL = 32768

_HEADER = struct.Struct("<4sBQdB")
_TABLE_DTYPE = np.dtype([("symbol", "<i4"), ("length", "u1")])


class BlockFormatError(ValueError):
    """A serialized block failed validation; names the offending field."""

    def __init__(self, fieldname: str, message: str):
        self.fieldname = fieldname
        super().__init__(f"bad compressed block ({fieldname}): {message}")


@njit(cache=True)
def _encode_kernel(x, bound, cap):  # pragma: no cover - exercised via compress_eb
    n = x.size
    codes = np.zeros(n, np.int32)
    escape = np.zeros(n, np.bool_)
    width = 2.0 * bound
    pred = 0.0
    for i in range(n):
        q = (x[i] - pred) / width
        if np.isfinite(q):
            c = np.rint(q)
            if -cap <= c <= cap:
                recon = pred + width * c
                if abs(x[i] - recon) <= bound:
                    codes[i] = np.int32(c)
                    pred = recon
                    continue
        escape[i] = True
        pred = x[i]
    return codes, escape


@njit(cache=True)
def _decode_kernel(codes, escape, escape_values, bound):  # pragma: no cover
    n = codes.size
    out = np.empty(n)
    width = 2.0 * bound
    pred = 0.0
    j = 0
    for i in range(n):
        if escape[i]:
            pred = escape_values[j]
            j += 1
        else:
            pred = pred + width * codes[i]
        out[i] = pred
    return out


@njit(cache=True)
def _pack_bits(codewords, lengths):  # pragma: no cover
    total = 0
    for i in range(lengths.size):
        total += lengths[i]
    out = np.zeros((total + 7) // 8, np.uint8)
    pos = 0
    for i in range(lengths.size):
        length = lengths[i]
        word = codewords[i]
        for b in range(length - 1, -1, -1):
            if (word >> np.uint64(b)) & np.uint64(1):
                out[pos >> 3] |= np.uint8(128) >> (pos & 7)
            pos += 1
    return out


@njit(cache=True)
def _unpack_decode(stream, n_symbols, max_len, first_code, first_index, count_by_len,
                   ordered_symbols):  # pragma: no cover
    """Canonical prefix decode of n_symbols; empty result signals bad stream."""
    out = np.empty(n_symbols, np.int32)
    pos = 0
    total_bits = stream.size * 8
    for s in range(n_symbols):
        code = np.int64(0)
        length = 0
        matched = False
        while length < max_len:
            if pos >= total_bits:
                return out[:0]
            bit = (stream[pos >> 3] >> (7 - (pos & 7))) & 1
            pos += 1
            code = (code << 1) | np.int64(bit)
            length += 1
            if count_by_len[length] > 0:
                offset = code - first_code[length]
                if 0 <= offset < count_by_len[length]:
                    out[s] = ordered_symbols[first_index[length] + offset]
                    matched = True
                    break
        if not matched:
            return out[:0]
    return out


def _huffman_code_lengths(symbols: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Prefix-code lengths via the two-queue Huffman construction.

    Linear after the initial sort; ties prefer leaves, and the stable sort
    makes everything deterministic. A single-symbol alphabet gets length 0
    (the element count in the header already determines the whole stream).
    Depth grows like log_phi(total count), far below the decoder's 63-bit
    budget for any block this codec can produce.
    """
    m = symbols.size
    if m == 1:
        return np.array([0], dtype=np.uint8)
    order = np.argsort(counts, kind="stable")
    leaf_w = counts[order].tolist()
    total = 2 * m - 1
    parent = [0] * total
    internal_w = []
    i1 = 0  # next leaf (node ids 0..m-1 in sorted order)
    i2 = 0  # next internal node (node ids m..2m-2 in creation order)
    for new_id in range(m, total):
        picks = []
        for _ in range(2):
            take_leaf = i1 < m and (
                i2 >= len(internal_w) or leaf_w[i1] <= internal_w[i2]
            )
            if take_leaf:
                picks.append((leaf_w[i1], i1))
                i1 += 1
            else:
                picks.append((internal_w[i2], m + i2))
                i2 += 1
        (w1, n1), (w2, n2) = picks
        parent[n1] = new_id
        parent[n2] = new_id
        internal_w.append(w1 + w2)
    depth = [0] * total
    for node in range(total - 2, -1, -1):
        depth[node] = depth[parent[node]] + 1
    lengths = np.empty(m, dtype=np.uint8)
    lengths[order] = depth[:m]
    return lengths


def _canonical_codes(symbols: np.ndarray, lengths: np.ndarray):
    """Canonical codeword assignment: sort by (length, symbol), count upward.

    Codewords come from the per-length first-code recurrence, so the only
    Python loop runs over distinct lengths (<= 63), not symbols.
    """
    order = np.lexsort((symbols, lengths))
    sorted_symbols = symbols[order]
    sorted_lengths = lengths[order].astype(np.int64)
    distinct, first_index, counts = np.unique(
        sorted_lengths, return_index=True, return_counts=True
    )
    first_code_of = {}
    code = 0
    prev_len = int(distinct[0])
    for length, cnt in zip(distinct.tolist(), counts.tolist()):
        code <<= length - prev_len
        first_code_of[length] = code
        code += cnt
        prev_len = length
    starts = np.array([first_code_of[int(l)] for l in distinct], dtype=np.int64)
    # rank of each entry within its length class
    pos = np.arange(sorted_symbols.size)
    class_id = np.searchsorted(distinct, sorted_lengths)
    codewords = starts[class_id] + (pos - first_index[class_id])
    return sorted_symbols, sorted_lengths.astype(np.uint8), codewords


def _decode_tables(symbols: np.ndarray, lengths: np.ndarray):
    """first_code / first_index / count tables indexed by code length."""
    sorted_symbols, sorted_lengths, codewords = _canonical_codes(symbols, lengths)
    lens64 = sorted_lengths.astype(np.int64)
    max_len = int(lens64.max())
    first_code = np.zeros(max_len + 1, dtype=np.int64)
    first_index = np.zeros(max_len + 1, dtype=np.int64)
    count_by_len = np.zeros(max_len + 1, dtype=np.int64)
    distinct, firsts, counts = np.unique(lens64, return_index=True, return_counts=True)
    first_index[distinct] = firsts
    first_code[distinct] = codewords[firsts]
    count_by_len[distinct] = counts
    return sorted_symbols.astype(np.int32), max_len, first_code, first_index, count_by_len


@dataclass(frozen=True)
class CompressedBlock:
    """Bit-exact container for one compressed tensor; ``data`` is the wire form."""

    data: bytes

    @property
    def count(self) -> int:
        return _HEADER.unpack_from(self.data, 0)[2]

    @property
    def error_bound(self) -> float:
        return _HEADER.unpack_from(self.data, 0)[3]

    @property
    def predictor(self) -> int:
        return _HEADER.unpack_from(self.data, 0)[4]

    @property
    def nbytes(self) -> int:
        return len(self.data)


def compress_eb(x: np.ndarray, error_bound: float) -> CompressedBlock:
    """Compress a tensor so every element reconstructs within ``error_bound``.

    The input is flattened row-major; shape bookkeeping is the caller's
    business. The bound must be positive (there is no lossless mode) and the
    data finite.
    """
    if not (error_bound > 0.0) or not np.isfinite(error_bound):
        raise ValueError(f"error bound must be a positive finite real, got {error_bound}")
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1))
    if x.size and not np.all(np.isfinite(x)):
        raise ValueError("input contains NaN or Inf; only finite tensors are compressible")

    codes, escape = _encode_kernel(x, float(error_bound), float(CODE_CAP))
    stream = np.where(escape, np.int32(ESCAPE_SYMBOL), codes)
    escape_values = x[escape]

    if stream.size:
        symbols, counts = np.unique(stream, return_counts=True)
        lengths_by_symbol = _huffman_code_lengths(symbols, counts)
        if symbols.size == 1:
            packed = np.zeros(0, np.uint8)
            nbits = 0
            table_symbols = symbols.astype(np.int32)
            table_lengths = lengths_by_symbol
        else:
            sorted_symbols, sorted_lengths, codewords = _canonical_codes(
                symbols, lengths_by_symbol
            )
            # symbols -> canonical-table indices, vectorized
            symbol_order = np.argsort(sorted_symbols)
            per_elem = symbol_order[np.searchsorted(sorted_symbols[symbol_order], stream)]
            packed = _pack_bits(
                codewords[per_elem].astype(np.uint64), sorted_lengths[per_elem]
            )
            nbits = int(sorted_lengths[per_elem].astype(np.int64).sum())
            table_symbols, table_lengths = sorted_symbols, sorted_lengths
    else:
        packed = np.zeros(0, np.uint8)
        nbits = 0
        table_symbols = np.zeros(0, np.int32)
        table_lengths = np.zeros(0, np.uint8)

    table = np.empty(table_symbols.size, dtype=_TABLE_DTYPE)
    table["symbol"] = table_symbols
    table["length"] = table_lengths
    parts = [struct.pack("<I", table_symbols.size), table.tobytes()]
    parts.append(struct.pack("<Q", nbits))
    parts.append(packed.tobytes())
    parts.append(struct.pack("<Q", int(escape_values.size)))
    parts.append(escape_values.astype("<f8").tobytes())
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, x.size, float(error_bound), PREDICTOR_PREVIOUS
    )
    return CompressedBlock(data=header + zlib.compress(b"".join(parts), 6))


def decompress_eb(block: CompressedBlock) -> np.ndarray:
    """Reconstruct the flat float64 tensor from a block.

    Raises :class:`BlockFormatError` naming the first offending field if the
    container is corrupt or truncated; never returns partial output.
    """
    data = block.data if isinstance(block, CompressedBlock) else bytes(block)
    if len(data) < _HEADER.size:
        raise BlockFormatError("header", f"need {_HEADER.size} bytes, have {len(data)}")
    magic, version, count, bound, predictor = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BlockFormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise BlockFormatError("version", f"unsupported version {version}")
    if predictor != PREDICTOR_PREVIOUS:
        raise BlockFormatError("predictor", f"unknown predictor id {predictor}")
    if not (bound > 0.0) or not np.isfinite(bound):
        raise BlockFormatError("error_bound", f"not a positive real: {bound}")

    try:
        inflater = zlib.decompressobj()
        data = inflater.decompress(bytes(data[_HEADER.size:])) + inflater.flush()
    except zlib.error as exc:
        raise BlockFormatError("payload", f"bad deflate stream: {exc}") from exc
    if not inflater.eof:
        raise BlockFormatError("payload", "truncated deflate stream")
    if inflater.unused_data:
        raise BlockFormatError(
            "payload", f"{len(inflater.unused_data)} trailing bytes after payload"
        )

    offset = 0
    if len(data) < offset + 4:
        raise BlockFormatError("table_size", "truncated before table size")
    (table_size,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if len(data) < offset + 5 * table_size:
        raise BlockFormatError("table", "truncated inside prefix-code table")
    table = np.frombuffer(data, dtype=_TABLE_DTYPE, count=table_size, offset=offset)
    offset += 5 * table_size
    symbols = table["symbol"].astype(np.int32)
    lengths = table["length"].copy()
    if table_size and (
        lengths.max(initial=0) > 63 or (table_size != 1 and lengths.min() == 0)
    ):
        raise BlockFormatError("table", "invalid code length")

    if len(data) < offset + 8:
        raise BlockFormatError("bitstream_length", "truncated before bit count")
    (nbits,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    nbytes = (nbits + 7) // 8
    if len(data) < offset + nbytes:
        raise BlockFormatError("bitstream", "truncated code stream")
    stream_bytes = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=offset)
    offset += nbytes

    if len(data) < offset + 8:
        raise BlockFormatError("escape_count", "truncated before escape count")
    (n_escapes,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if len(data) < offset + 8 * n_escapes:
        raise BlockFormatError("escape_values", "truncated escape values")
    escape_values = np.frombuffer(data, dtype="<f8", count=n_escapes, offset=offset)
    offset += 8 * n_escapes
    if offset != len(data):
        raise BlockFormatError("payload", f"{len(data) - offset} trailing bytes")

    if count == 0:
        return np.zeros(0)
    if table_size == 0:
        raise BlockFormatError("table", "empty table with nonzero element count")

    if table_size == 1:
        # zero-bit code: the single symbol repeats for every element
        decoded = np.full(count, symbols[0], dtype=np.int32)
    else:
        ordered_symbols, max_len, first_code, first_index, count_by_len = _decode_tables(
            symbols, lengths
        )
        decoded = _unpack_decode(
            stream_bytes, count, max_len, first_code, first_index, count_by_len,
            ordered_symbols,
        )
    if decoded.size != count:
        raise BlockFormatError("bitstream", "code stream does not decode to element count")

    escape_mask = decoded == ESCAPE_SYMBOL
    if int(escape_mask.sum()) != n_escapes:
        raise BlockFormatError(
            "escape_count",
            f"stream has {int(escape_mask.sum())} escapes, header says {n_escapes}",
        )
    codes = np.where(escape_mask, np.int32(0), decoded).astype(np.int32)
    return _decode_kernel(codes, escape_mask, np.ascontiguousarray(escape_values), bound)


def ratio(block: CompressedBlock, original: np.ndarray) -> float:
    """Compression ratio: original float64 bytes over serialized block bytes."""
    original = np.asarray(original)
    return (original.size * 8) / block.nbytes


def write_melc(path, block: CompressedBlock) -> None:
    with open(path, "wb") as fh:
        fh.write(block.data)


def read_melc(path) -> CompressedBlock:
    with open(path, "rb") as fh:
        return CompressedBlock(data=fh.read())
