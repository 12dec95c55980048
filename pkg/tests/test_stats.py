import math

import numpy as np
import pytest

from moelab.activation_stats import (
    ActivationLog, expert_utilization, export_heatmap, gini, imbalance_score,
    merge, metrics_summary, normalized_entropy,
)


def brute_utilization(row):
    return sum(1 for x in row if x > 0) / len(row)


def brute_entropy(row):
    total = sum(row)
    acc = 0.0
    for x in row:
        if x > 0:
            p = x / total
            acc -= p * math.log(p)
    return 1.0 if len(row) == 1 else acc / math.log(len(row))


def brute_gini(row):
    n = len(row)
    mu = sum(row) / n
    acc = 0.0
    for a in row:
        for b in row:
            acc += abs(a - b)
    return acc / (2 * n * n * mu)


def brute_imbalance(row):
    n = len(row)
    mean = sum(row) / n
    var = sum((x - mean) ** 2 for x in row) / n
    return math.sqrt(var) / mean


class TestMetrics:
    def test_utilization_examples(self):
        assert expert_utilization([5, 0, 3, 0]) == 0.5
        assert expert_utilization([1, 2, 3]) == 1.0
        assert expert_utilization([0, 0, 0, 0]) == 0.0

    def test_entropy_uniform_and_onehot(self):
        assert normalized_entropy([7, 7, 7, 7]) == pytest.approx(1.0, abs=1e-12)
        assert normalized_entropy([0, 9, 0]) == pytest.approx(0.0, abs=1e-12)

    def test_entropy_pinned_value(self):
        # p = [0.5, 0.25, 0.25]
        got = normalized_entropy([2, 1, 1])
        assert got == pytest.approx(brute_entropy([2, 1, 1]), abs=1e-12)
        assert got == pytest.approx(0.946395, abs=1e-6)

    def test_gini_examples(self):
        assert gini([4, 4, 4, 4]) == pytest.approx(0.0, abs=1e-12)
        onehot = [0] * 63 + [10]
        assert gini(onehot) == pytest.approx(63 / 64, abs=1e-12)
        assert gini(onehot) == pytest.approx(brute_gini(onehot), abs=1e-12)
        assert gini([3, 1]) == pytest.approx(0.25, abs=1e-12)
        assert gini([3, 1]) == pytest.approx(brute_gini([3, 1]), abs=1e-12)

    def test_imbalance_examples(self):
        assert imbalance_score([6, 6, 6]) == pytest.approx(0.0, abs=1e-12)
        assert imbalance_score([3, 1]) == pytest.approx(0.5, abs=1e-12)
        base = imbalance_score([5, 2, 9, 4])
        assert imbalance_score([50, 20, 90, 40]) == pytest.approx(base, abs=1e-12)

    def test_all_zero_rows_rejected(self):
        for fn in (normalized_entropy, gini, imbalance_score):
            with pytest.raises(ValueError):
                fn([0, 0, 0])

    def test_oracle_agreement_on_random_rows(self):
        rng = np.random.default_rng(42)
        rows = [rng.integers(0, 1000, rng.integers(2, 65)) for _ in range(100)]
        rows.append(np.array([0] * 63 + [1]))  # one-hot E=64
        rows.append(np.array([2, 1, 1]))
        for row in rows:
            if row.sum() == 0:
                row[0] = 1
            r = row.tolist()
            assert expert_utilization(r) == pytest.approx(brute_utilization(r), abs=1e-9)
            assert normalized_entropy(r) == pytest.approx(brute_entropy(r), abs=1e-9)
            assert gini(r) == pytest.approx(brute_gini(r), abs=1e-9)
            assert imbalance_score(r) == pytest.approx(brute_imbalance(r), abs=1e-9)

    def test_metric_ranges(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            row = rng.integers(0, 50, rng.integers(2, 20))
            if row.sum() == 0:
                row[0] = 1
            e = len(row)
            assert 0.0 <= expert_utilization(row) <= 1.0
            assert 0.0 <= normalized_entropy(row) <= 1.0 + 1e-12
            assert 0.0 <= gini(row) <= (e - 1) / e + 1e-12
            assert imbalance_score(row) >= 0.0


class TestActivationLog:
    def _log(self, counts, weights=None, tokens=0):
        counts = np.asarray(counts, dtype=np.int64)
        if weights is None:
            weights = counts.astype(float)
        return ActivationLog(
            counts=counts, weight_sums=np.asarray(weights, float),
            tokens_processed=tokens,
        )

    def test_merge_identity(self):
        a = self._log([[1, 2], [3, 4]], tokens=5)
        zero = ActivationLog.empty(2, 2)
        merged = merge(a, zero)
        assert np.array_equal(merged.counts, a.counts)
        assert np.array_equal(merged.weight_sums, a.weight_sums)
        assert merged.tokens_processed == 5

    def test_merge_commutative(self):
        rng = np.random.default_rng(0)
        a = self._log(rng.integers(0, 10, (3, 4)), tokens=7)
        b = self._log(rng.integers(0, 10, (3, 4)), tokens=2)
        ab, ba = merge(a, b), merge(b, a)
        assert np.array_equal(ab.counts, ba.counts)
        assert np.array_equal(ab.weight_sums, ba.weight_sums)
        assert ab.tokens_processed == ba.tokens_processed == 9

    def test_merge_shape_mismatch(self):
        with pytest.raises(ValueError):
            merge(ActivationLog.empty(2, 2), ActivationLog.empty(2, 3))

    def test_merging_single_token_logs_equals_one_run(self):
        events = [
            (0, [1, 3], [0.6, 0.4]),
            (1, [0, 2], [0.5, 0.5]),
            (0, [3, 2], [0.9, 0.1]),
        ]
        whole = ActivationLog.empty(2, 4)
        parts = []
        for layer, idx, w in events:
            whole.record(layer, np.array(idx), np.array(w))
            whole.add_tokens(1)
            piece = ActivationLog.empty(2, 4)
            piece.record(layer, np.array(idx), np.array(w))
            piece.add_tokens(1)
            parts.append(piece)
        combined = merge(merge(parts[0], parts[1]), parts[2])
        assert np.array_equal(combined.counts, whole.counts)
        assert np.allclose(combined.weight_sums, whole.weight_sums)
        assert combined.tokens_processed == whole.tokens_processed


class TestExport:
    def _sample_log(self):
        log = ActivationLog.empty(2, 2)
        log.record(0, np.array([0, 1]), np.array([0.75, 0.25]))
        log.record(1, np.array([1]), np.array([1.0]))
        log.add_tokens(1)
        return log

    def test_row_count_and_header(self, tmp_path):
        path = tmp_path / "heat.csv"
        export_heatmap(self._sample_log(), path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "layer,expert,count,weight_sum"
        assert len(lines) == 1 + 4

    def test_reexport_byte_identical(self, tmp_path):
        log = self._sample_log()
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        export_heatmap(log, p1)
        export_heatmap(log, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_reparse_matches_in_memory(self, tmp_path):
        log = self._sample_log()
        path = tmp_path / "heat.csv"
        export_heatmap(log, path)
        rows = [line.split(",") for line in path.read_text().strip().split("\n")[1:]]
        per_layer = {0: 0, 1: 0}
        weight_total = 0.0
        for layer, expert, count, weight in rows:
            per_layer[int(layer)] += int(count)
            weight_total += float(weight)
        assert per_layer[0] == int(log.counts[0].sum())
        assert per_layer[1] == int(log.counts[1].sum())
        assert weight_total == pytest.approx(log.weight_sums.sum(), abs=1e-12)

    def test_metrics_summary_structure(self):
        log = self._sample_log()
        summary = metrics_summary(log)
        assert set(summary["layers"].keys()) == {"0", "1"}
        assert summary["global"] is not None
        assert summary["tokens_processed"] == 1
        for key in ("utilization", "entropy", "gini", "imbalance"):
            assert key in summary["layers"]["0"]
        empty = metrics_summary(ActivationLog.empty(1, 2))
        assert empty["layers"]["0"] is None and empty["global"] is None
