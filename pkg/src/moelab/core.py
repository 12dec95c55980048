"""Deterministic dense linear algebra and seeded random sampling.

Everything downstream runs on row-major float64 numpy arrays. The two rules
that matter for reproducibility:

* reductions in the accuracy-bearing path happen in a fixed left-to-right
  order (``matmul`` goes through ``np.einsum``, which accumulates the
  contraction index sequentially instead of delegating to a threaded BLAS);
* all randomness flows through :class:`RngStream`, a counter-based Philox
  stream with an explicit draw position, so any draw is reproducible from
  ``(seed, position)`` alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

# Universal numeric carrier: a row-major float64 ndarray.
Tensor = np.ndarray

#: Recorded in run metadata so results can be replayed elsewhere.
RNG_ALGORITHM = "philox4x64+box-muller"


def as_tensor(data) -> Tensor:
    """Coerce nested lists / arrays to a float64 array."""
    return np.asarray(data, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with a deterministic summation order.

    The contraction is evaluated row-major, left-to-right over the inner
    dimension for every output element, so results are bit-identical across
    runs and do not depend on BLAS threading decisions.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return np.einsum("ij,jk->ik", a, b)


def matvec(v: Tensor, m: Tensor) -> Tensor:
    """Row-vector times matrix, same summation-order guarantee as matmul."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"matvec expects a 1-D vector, got shape {v.shape}")
    return matmul(v[None, :], m)[0]


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction before exponentiation).

    Large logits like 1000 must not overflow: the shifted exponents are
    bounded above by 0, and underflow to 0.0 is acceptable.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty tensor is undefined")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _spawn_key(parts: tuple) -> tuple[int, ...]:
    """Map mixed int/str tags to a stable integer spawn key.

    Strings go through sha256 so the key does not depend on Python's
    per-process hash randomization.
    """
    key = []
    for part in parts:
        if isinstance(part, (int, np.integer)):
            key.append(int(part) & 0xFFFFFFFFFFFFFFFF)
        elif isinstance(part, str):
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            key.append(int.from_bytes(digest[:8], "little"))
        else:
            raise TypeError(f"stream tags must be int or str, got {type(part)!r}")
    return tuple(key)


@dataclass
class RngStream:
    """Seeded, positioned random stream.

    Each draw of ``n`` values advances ``position`` by exactly n; the values
    produced depend only on ``(seed, position)``. Internally every call keys
    a fresh Philox counter block with ``SeedSequence(seed, (0, position))``,
    so streams can be resumed or replayed without replaying prior draws.

    Child streams (``child``) are derived with a disjoint spawn-key prefix
    and are statistically independent of the parent and of each other.
    """

    seed: int
    position: int = 0
    _key_prefix: tuple[int, ...] = field(default=(), repr=False)

    def _generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=self._key_prefix + (0, self.position)
        )
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *tags) -> "RngStream":
        """Derive an independent stream identified by the given tags."""
        if not tags:
            raise ValueError("child stream needs at least one tag")
        prefix = self._key_prefix + (1,) + _spawn_key(tags)
        return RngStream(seed=self.seed, position=0, _key_prefix=prefix)

    def uniform(self, n: int) -> Tensor:
        """n draws from U[0, 1). Advances the stream by n."""
        if n < 0:
            raise ValueError("draw count must be non-negative")
        u = self._generator().random(n)
        self.position += n
        return u

    def normal(self, sigma: float, n: int) -> Tensor:
        """n independent draws from N(0, sigma^2) via the Box-Muller transform.

        Box-Muller on top of Philox uniforms is platform-stable and does not
        depend on numpy's ziggurat tables. Advances the stream by n.
        """
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        if n < 0:
            raise ValueError("draw count must be non-negative")
        if n == 0:
            self.position += 0
            return np.zeros(0)
        pairs = (n + 1) // 2
        u = self._generator().random(2 * pairs)
        # u in [0,1) so 1-u in (0,1]: log1p(-u) is finite, radius bounded.
        radius = np.sqrt(-2.0 * np.log1p(-u[:pairs]))
        theta = (2.0 * np.pi) * u[pairs:]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        self.position += n
        return sigma * z[:n]

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """n draws uniform over [low, high). Advances the stream by n.

        Computed as floor(u * range) from the uniform stream; for the range
        sizes used here (< 2**32) the floor bias is far below measurability
        and the mapping is stable across numpy versions.
        """
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(n)
        return low + np.minimum((u * (high - low)).astype(np.int64), high - low - 1)


def sample_normal(rng: RngStream, sigma: float, n: int) -> Tensor:
    """n zero-mean normal draws with standard deviation sigma (see RngStream.normal)."""
    return rng.normal(sigma, n)
