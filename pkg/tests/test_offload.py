import math

import numpy as np
import pytest

from moelab.offload import (
    TransferParams, break_even_throughput, fetch_latency, speedup_report,
    transfer_time, write_speedup_csv,
)


class TestTransferTime:
    def test_zero_bytes(self):
        assert transfer_time(0, 32e9) == 0.0

    def test_host_link_drain_time(self):
        # 66.6 GB over a 32 GB/s link
        got = transfer_time(66.6e9, 32e9)
        assert abs(got - 2.08125) / 2.08125 < 1e-9

    def test_unit_case(self):
        assert transfer_time(32e9, 32e9) == 1.0

    def test_linearity(self):
        # power-of-two bandwidth keeps the division exact, so additivity is
        # bitwise; for general rates it holds to within one ulp
        a, b = 13_000_000.0, 9_999_937.0
        bw = float(2 ** 35)
        assert transfer_time(a + b, bw) == transfer_time(a, bw) + transfer_time(b, bw)
        assert transfer_time(a + b, 7e9) == pytest.approx(
            transfer_time(a, 7e9) + transfer_time(b, 7e9), rel=1e-15
        )

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            transfer_time(100, 0)
        with pytest.raises(ValueError):
            transfer_time(100, -5)


class TestFetchLatency:
    def test_degenerate_codec_reduces_to_transfer(self):
        raw = 48e9
        overlapped = TransferParams(decompress_throughput=1e18, overlap=True)
        assert fetch_latency(raw, 1.0, overlapped) == transfer_time(
            raw, overlapped.pcie_bandwidth
        )
        serial = TransferParams(decompress_throughput=1e18, overlap=False)
        assert fetch_latency(raw, 1.0, serial) == pytest.approx(
            transfer_time(raw, serial.pcie_bandwidth), rel=1e-6
        )

    def test_overlap_example(self):
        params = TransferParams(pcie_bandwidth=32e9, decompress_throughput=64e9,
                                overlap=True)
        assert fetch_latency(64e9, 4.0, params) == pytest.approx(1.0)

    def test_serial_example(self):
        params = TransferParams(pcie_bandwidth=32e9, decompress_throughput=64e9,
                                overlap=False)
        assert fetch_latency(64e9, 4.0, params) == pytest.approx(1.5)

    def test_ratio_below_one_rejected(self):
        with pytest.raises(ValueError):
            fetch_latency(1e9, 0.5, TransferParams())

    def test_monotone_in_ratio_and_bandwidth(self):
        base = TransferParams()
        prev = math.inf
        for r in (1.0, 1.5, 2.0, 4.0, 16.0, 128.0):
            t = fetch_latency(1e9, r, base)
            assert t <= prev
            prev = t
        for key in ("pcie_bandwidth", "decompress_throughput"):
            lat = [
                fetch_latency(1e9, 3.0, TransferParams(**{key: bw}))
                for bw in (1e9, 4e9, 64e9, 1e12)
            ]
            assert all(b <= a for a, b in zip(lat, lat[1:]))

    def test_overlap_never_slower(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            raw = float(rng.uniform(1e6, 1e11))
            ratio = float(rng.uniform(1, 50))
            pcie = float(rng.uniform(1e9, 1e11))
            decomp = float(rng.uniform(1e9, 1e11))
            a = fetch_latency(raw, ratio, TransferParams(
                pcie_bandwidth=pcie, decompress_throughput=decomp, overlap=True))
            b = fetch_latency(raw, ratio, TransferParams(
                pcie_bandwidth=pcie, decompress_throughput=decomp, overlap=False))
            assert a <= b

    def test_positive_rates_enforced(self):
        with pytest.raises(ValueError):
            TransferParams(pcie_bandwidth=0)
        with pytest.raises(ValueError):
            TransferParams(decompress_throughput=-1)


class TestBreakEven:
    def test_ratio_one_never_breaks_even(self):
        assert break_even_throughput(1.0, TransferParams()) == math.inf

    def test_serial_formula(self):
        params = TransferParams(pcie_bandwidth=32e9, overlap=False)
        d = break_even_throughput(4.0, params)
        # at d, compressed fetch equals raw fetch
        raw = 10e9
        t_raw = transfer_time(raw, params.pcie_bandwidth)
        t_cmp = raw / 4.0 / params.pcie_bandwidth + raw / d
        assert t_cmp == pytest.approx(t_raw, rel=1e-12)

    def test_overlap_break_even_is_link_rate(self):
        params = TransferParams(pcie_bandwidth=32e9, overlap=True)
        assert break_even_throughput(8.0, params) == 32e9


class TestSpeedupReport:
    def _rows(self, params, ratios_value):
        sizes = {(0, 0): 8 * 4096, (0, 1): 8 * 4096, (1, 0): 8 * 4096}
        ratios = {k: ratios_value for k in sizes}
        return speedup_report(sizes, ratios, params)

    def test_unit_ratios_give_unit_speedups(self):
        rows = self._rows(TransferParams(decompress_throughput=1e18), 1.0)
        assert all(row.speedup == pytest.approx(1.0) for row in rows)

    def test_doubling_ratio_halves_transfer(self):
        params = TransferParams(decompress_throughput=1e18)
        t2 = self._rows(params, 2.0)[0].t_compressed
        t4 = self._rows(params, 4.0)[0].t_compressed
        assert t4 == pytest.approx(t2 / 2, rel=1e-9)

    def test_rows_sorted_layer_major(self):
        rows = self._rows(TransferParams(), 2.0)
        assert [(r.layer, r.expert) for r in rows] == [(0, 0), (0, 1), (1, 0)]

    def test_csv_schema(self, tmp_path):
        rows = self._rows(TransferParams(), 2.0)
        path = tmp_path / "speedup.csv"
        write_speedup_csv(rows, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "expert,raw_bytes,ratio,t_uncompressed,t_compressed,speedup"
        assert len(lines) == 1 + len(rows)
        first = lines[1].split(",")
        assert first[0] == "L0E0"
        assert int(first[1]) == 8 * 4096
        assert float(first[2]) == 2.0

    def test_transfer_time_falls_as_bound_grows_end_to_end(self):
        # measured codec ratios on a real expert tensor feed the latency
        # model: a looser bound can never make the fetch slower
        from moelab.codec import compress_eb, ratio as codec_ratio
        from moelab.model import ExpertId, ModelConfig, init_model

        model = init_model(ModelConfig(), seed=0)
        flat = model.expert(ExpertId(0, 0)).flat()
        params = TransferParams(decompress_throughput=1e18)
        times = []
        for bound in (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1):
            r = max(1.0, codec_ratio(compress_eb(flat, bound), flat))
            times.append(fetch_latency(flat.size * 8, r, params))
        assert all(b <= a for a, b in zip(times, times[1:])), times
