"""Synthetic task families with instruction-style answer formatting.

Three families, ordered by expected difficulty: ``comparison`` (emit which
operand is larger), ``modular_sum`` (digits of a+b mod m), ``copy_reverse``
(echo a letter string backwards). Every gold answer is wrapped in reserved
open/close tag tokens, the desk-scale analog of a boxed-answer convention,
so format compliance and content correctness can be scored separately.

Token alphabet (fits the default vocab of 32):

    0..9    digits
    10      '+'     11      '='     12      '?' (comparison operator)
    13      '<'     14      '>'     15      '≡' (comparison answers)
    16      '|'     (end-of-input marker for copy_reverse)
    17..26  letters a..j
    27      answer open tag
    28      answer close tag
    29..31  reserved
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import RngStream
from .scoring import FormatSpec

PLUS = 10
EQUALS = 11
CMP = 12
ANS_LT = 13
ANS_GT = 14
ANS_EQ = 15
SEP = 16
LETTER_BASE = 17
NUM_LETTERS = 10
OPEN_TAG = 27
CLOSE_TAG = 28

TASK_KINDS = ("modular_sum", "copy_reverse", "comparison")


class TaskConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """One task family instance.

    ``param`` is the modulus (modular_sum), the string length
    (copy_reverse), or the exclusive operand bound (comparison).
    """

    kind: str
    param: int
    seed: int = 0
    open_tag: int = OPEN_TAG
    close_tag: int = CLOSE_TAG

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskConfigError(f"unknown task kind {self.kind!r}; pick from {TASK_KINDS}")
        if self.kind == "modular_sum" and not (2 <= self.param <= 100):
            raise TaskConfigError("modular_sum modulus must be in [2, 100]")
        if self.kind == "copy_reverse" and not (1 <= self.param <= 12):
            raise TaskConfigError("copy_reverse length must be in [1, 12]")
        if self.kind == "comparison" and not (2 <= self.param <= 10):
            raise TaskConfigError("comparison operand bound must be in [2, 10]")
        if self.open_tag == self.close_tag:
            raise TaskConfigError("open and close tags must differ")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "param": self.param, "seed": self.seed,
            "open_tag": self.open_tag, "close_tag": self.close_tag,
        }


@dataclass
class Sample:
    prompt: np.ndarray
    gold: np.ndarray


@dataclass
class Dataset:
    samples: list
    split: str
    spec: TaskSpec

    def __len__(self) -> int:
        return len(self.samples)

    def max_gold_len(self) -> int:
        return max(len(s.gold) for s in self.samples)


def encode_number(x: int) -> list:
    """Digit token ids of a non-negative integer, most significant first."""
    return [int(ch) for ch in str(int(x))]


def answer_alphabet(spec: TaskSpec) -> frozenset:
    if spec.kind == "modular_sum":
        return frozenset(range(10))
    if spec.kind == "comparison":
        return frozenset((ANS_LT, ANS_GT, ANS_EQ))
    return frozenset(range(LETTER_BASE, LETTER_BASE + NUM_LETTERS))


def format_spec(spec: TaskSpec) -> FormatSpec:
    """Scoring contract implied by the task family."""
    if spec.kind == "modular_sum":
        max_len = len(str(spec.param - 1))
    elif spec.kind == "comparison":
        max_len = 1
    else:
        max_len = spec.param
    return FormatSpec(
        open_tag=spec.open_tag,
        close_tag=spec.close_tag,
        max_answer_len=max_len,
        answer_alphabet=answer_alphabet(spec),
    )


def _wrap(spec: TaskSpec, content) -> np.ndarray:
    return np.asarray([spec.open_tag, *content, spec.close_tag], dtype=np.int64)


def make_sample(spec: TaskSpec, operands) -> Sample:
    """Build the (prompt, gold) encoding for explicit operands."""
    if spec.kind == "modular_sum":
        a, b = operands
        prompt = [*encode_number(a), PLUS, *encode_number(b), EQUALS]
        gold = encode_number((a + b) % spec.param)
    elif spec.kind == "comparison":
        a, b = operands
        prompt = [*encode_number(a), CMP, *encode_number(b)]
        gold = [ANS_LT if a < b else ANS_GT if a > b else ANS_EQ]
    else:  # copy_reverse
        letters = list(operands)
        prompt = [LETTER_BASE + l for l in letters] + [SEP]
        gold = [LETTER_BASE + l for l in reversed(letters)]
    return Sample(
        prompt=np.asarray(prompt, dtype=np.int64),
        gold=_wrap(spec, gold),
    )


def generate_dataset(spec: TaskSpec, n: int, split: str = "train") -> Dataset:
    """n deterministic samples; the split tag feeds the derivation key, so
    train and eval sets of the same seed differ."""
    if n < 1:
        raise TaskConfigError("dataset size must be >= 1")
    rng = RngStream(spec.seed).child("dataset", split, spec.kind, spec.param)
    samples = []
    if spec.kind == "modular_sum":
        draws = rng.integers(0, 10, 2 * n)
        for i in range(n):
            samples.append(make_sample(spec, (int(draws[2 * i]), int(draws[2 * i + 1]))))
    elif spec.kind == "comparison":
        draws = rng.integers(0, spec.param, 2 * n)
        for i in range(n):
            samples.append(make_sample(spec, (int(draws[2 * i]), int(draws[2 * i + 1]))))
    else:
        draws = rng.integers(0, NUM_LETTERS, spec.param * n)
        for i in range(n):
            letters = draws[spec.param * i: spec.param * (i + 1)]
            samples.append(make_sample(spec, [int(l) for l in letters]))
    return Dataset(samples=samples, split=split, spec=spec)


def verify_gold(spec: TaskSpec, sample: Sample) -> bool:
    """Independent re-derivation of the gold answer from the prompt tokens."""
    prompt = [int(t) for t in sample.prompt]
    if spec.kind == "modular_sum":
        text = "".join("+" if t == PLUS else "=" if t == EQUALS else str(t) for t in prompt)
        a_str, rest = text.split("+")
        b_str = rest.rstrip("=")
        expected = (int(a_str) + int(b_str)) % spec.param
        want = _wrap(spec, encode_number(expected))
    elif spec.kind == "comparison":
        split_at = prompt.index(CMP)
        a = int("".join(str(t) for t in prompt[:split_at]))
        b = int("".join(str(t) for t in prompt[split_at + 1:]))
        want = _wrap(spec, [ANS_LT if a < b else ANS_GT if a > b else ANS_EQ])
    else:
        letters = prompt[:-1]
        want = _wrap(spec, list(reversed(letters)))
    return np.array_equal(sample.gold, want)


def export_jsonl(dataset: Dataset, path) -> None:
    """Line-delimited JSON: {"prompt": [...], "gold": [...]} per sample."""
    with open(path, "w", newline="\n") as fh:
        for s in dataset.samples:
            row = {"prompt": [int(t) for t in s.prompt], "gold": [int(t) for t in s.gold]}
            fh.write(json.dumps(row) + "\n")


def load_jsonl(path, spec: TaskSpec, split: str = "train") -> Dataset:
    samples = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                samples.append(Sample(
                    prompt=np.asarray(row["prompt"], dtype=np.int64),
                    gold=np.asarray(row["gold"], dtype=np.int64),
                ))
    return Dataset(samples=samples, split=split, spec=spec)
