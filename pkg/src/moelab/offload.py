"""Analytic latency model for fetching offloaded experts over a host link.

First-order arithmetic only: a fetch moves ``raw_bytes / ratio`` over the
host link and decompresses at a fixed throughput; with overlap the two
stages pipeline (max), without it they serialize (sum). No queueing, no
prefetch policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class TransferParams:
    """Link and codec rates. Defaults: PCIe 4.0 x16 host link, HBM-class
    device bandwidth; decompression throughput is a free parameter."""

    pcie_bandwidth: float = 32e9
    gpu_mem_bandwidth: float = 300e9
    decompress_throughput: float = 64e9
    overlap: bool = False

    def __post_init__(self):
        for name in ("pcie_bandwidth", "gpu_mem_bandwidth", "decompress_throughput"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


def transfer_time(nbytes: float, bandwidth: float) -> float:
    """Seconds to move nbytes at the given rate."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    return nbytes / bandwidth


def fetch_latency(raw_bytes: float, ratio: float, params: TransferParams) -> float:
    """Seconds to deliver one expert: compressed transfer plus decompression.

    ratio is the achieved compression ratio (>= 1); decompression is charged
    on the decompressed byte count.
    """
    if ratio < 1.0:
        raise ValueError(f"compression ratio must be >= 1, got {ratio}")
    transfer = transfer_time(raw_bytes / ratio, params.pcie_bandwidth)
    decomp = raw_bytes / params.decompress_throughput
    if params.overlap:
        return max(transfer, decomp)
    return transfer + decomp


def break_even_throughput(ratio: float, params: TransferParams) -> float:
    """Decompression rate at which the compressed fetch matches the raw fetch.

    Any faster decompressor wins. Returns inf when ratio == 1 (compression
    buys nothing, so no finite rate breaks even).
    """
    if ratio < 1.0:
        raise ValueError(f"compression ratio must be >= 1, got {ratio}")
    if ratio == 1.0:
        return math.inf
    if params.overlap:
        # max(raw/(ratio*pcie), raw/d) <= raw/pcie  <=>  d >= pcie
        return params.pcie_bandwidth
    # raw/(ratio*pcie) + raw/d = raw/pcie  <=>  d = pcie * ratio/(ratio-1)
    return params.pcie_bandwidth * ratio / (ratio - 1.0)


@dataclass(frozen=True)
class SpeedupRow:
    layer: int
    expert: int
    raw_bytes: int
    ratio: float
    t_uncompressed: float
    t_compressed: float
    speedup: float
    break_even_decompress_bps: float


def speedup_report(expert_sizes, ratios, params: TransferParams) -> list:
    """Join measured per-expert compression ratios with the latency model.

    ``expert_sizes`` and ``ratios`` map (layer, expert) keys to raw byte
    counts and achieved ratios; rows come back sorted layer-major.
    """
    rows = []
    for key in sorted(expert_sizes):
        layer, expert = key
        raw = expert_sizes[key]
        r = ratios[key]
        t_unc = transfer_time(raw, params.pcie_bandwidth)
        t_cmp = fetch_latency(raw, r, params)
        rows.append(
            SpeedupRow(
                layer=layer,
                expert=expert,
                raw_bytes=raw,
                ratio=r,
                t_uncompressed=t_unc,
                t_compressed=t_cmp,
                speedup=t_unc / t_cmp if t_cmp > 0 else math.inf,
                break_even_decompress_bps=break_even_throughput(r, params),
            )
        )
    return rows


def write_speedup_csv(rows, path) -> None:
    """Six-column report; the expert column is a 'L{layer}E{expert}' label."""
    lines = ["expert,raw_bytes,ratio,t_uncompressed,t_compressed,speedup"]
    for row in rows:
        lines.append(
            f"L{row.layer}E{row.expert},{row.raw_bytes},{row.ratio!r},"
            f"{row.t_uncompressed!r},{row.t_compressed!r},{row.speedup!r}"
        )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
