import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moelab.scoring import FormatSpec, parse_output, score

OPEN, CLOSE = 27, 28
SPEC = FormatSpec(
    open_tag=OPEN, close_tag=CLOSE, max_answer_len=3,
    answer_alphabet=frozenset(range(10)),
)


class TestParse:
    def test_wellformed(self):
        parsed = parse_output([OPEN, 4, 2, CLOSE], SPEC)
        assert parsed.strict == (4, 2)
        assert parsed.lenient == (4, 2)

    def test_untagged_content(self):
        parsed = parse_output([4, 2], SPEC)
        assert parsed.strict is None
        assert parsed.lenient == (4, 2)

    def test_trailing_junk_kills_strict(self):
        parsed = parse_output([OPEN, 4, CLOSE, 7], SPEC)
        assert parsed.strict is None
        assert parsed.lenient == (4,)

    def test_leading_junk_kills_strict(self):
        parsed = parse_output([9, OPEN, 4, CLOSE], SPEC)
        assert parsed.strict is None
        assert parsed.lenient == (4,)

    def test_overlong_answer_kills_strict(self):
        parsed = parse_output([OPEN, 1, 2, 3, 4, CLOSE], SPEC)
        assert parsed.strict is None
        assert parsed.lenient == (1, 2, 3, 4)

    def test_no_content_at_all(self):
        parsed = parse_output([OPEN, OPEN], SPEC)
        assert parsed.strict is None
        assert parsed.lenient is None

    def test_empty_output(self):
        parsed = parse_output([], SPEC)
        assert parsed.strict is None and parsed.lenient is None

    def test_nested_open_recovers_inner_pair(self):
        parsed = parse_output([OPEN, OPEN, 4, CLOSE], SPEC)
        assert parsed.strict is None
        assert parsed.lenient == (4,)

    def test_trailing_run_stops_at_non_alphabet(self):
        parsed = parse_output([4, CLOSE], SPEC)
        assert parsed.lenient is None  # close tag breaks the trailing run
        parsed = parse_output([CLOSE, 4, 2], SPEC)
        assert parsed.lenient == (4, 2)

    def test_tag_validation(self):
        with pytest.raises(ValueError):
            FormatSpec(open_tag=5, close_tag=5, max_answer_len=1,
                       answer_alphabet=frozenset({1}))
        with pytest.raises(ValueError):
            FormatSpec(open_tag=1, close_tag=2, max_answer_len=1,
                       answer_alphabet=frozenset({1}))


class TestScore:
    def wrap(self, *content):
        return [OPEN, *content, CLOSE]

    def test_all_perfect(self):
        outs = [self.wrap(1), self.wrap(2, 3)]
        golds = [self.wrap(1), self.wrap(2, 3)]
        outcome = score(outs, golds, SPEC)
        assert outcome.ica == 1.0 and outcome.pia == 1.0

    def test_correct_content_without_tags(self):
        outs = [[1], [2, 3]]
        golds = [self.wrap(1), self.wrap(2, 3)]
        outcome = score(outs, golds, SPEC)
        assert outcome.ica == 0.0 and outcome.pia == 1.0

    def test_counting_example(self):
        golds = [self.wrap(1)] * 4
        outs = [
            self.wrap(1),        # strict + lenient hit
            self.wrap(1),        # strict + lenient hit
            [1],                 # lenient only
            [5],                 # miss
        ]
        outcome = score(outs, golds, SPEC)
        assert outcome.ica == 0.5
        assert outcome.pia == 0.75

    def test_format_only_correctness_counts_nothing(self):
        # perfectly formatted but wrong content scores toward neither metric
        outcome = score([self.wrap(9)], [self.wrap(1)], SPEC)
        assert outcome.ica == 0.0 and outcome.pia == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            score([[1]], [], SPEC)

    def test_permutation_leaves_aggregates(self):
        outs = [self.wrap(1), [2], [5], self.wrap(7, 7)]
        golds = [self.wrap(1), self.wrap(2), self.wrap(6), self.wrap(7, 7)]
        a = score(outs, golds, SPEC)
        b = score(outs[::-1], golds[::-1], SPEC)
        assert a.ica == b.ica and a.pia == b.pia
        assert a.records == b.records[::-1]

    @given(
        st.lists(
            st.lists(st.integers(0, 30), max_size=8),
            min_size=1, max_size=12,
        ),
        st.lists(st.integers(0, 9), min_size=1, max_size=3),
    )
    @settings(max_examples=60, deadline=None)
    def test_ica_never_exceeds_pia(self, outputs, gold_content):
        golds = [[OPEN, *gold_content, CLOSE]] * len(outputs)
        outcome = score(outputs, golds, SPEC)
        assert outcome.ica <= outcome.pia
        assert 0.0 <= outcome.ica <= 1.0
        assert 0.0 <= outcome.pia <= 1.0
