"""Dual-metric scoring of generated token sequences.

Two accuracies per evaluation:

* ``ica`` counts a sample only when the output is a single well-formed
  tag-wrapped answer with nothing outside the tags AND the content matches
  the gold answer;
* ``pia`` counts a sample when the answer content can be recovered at all
  (tagged anywhere, or a trailing run of answer-alphabet tokens) and
  matches.

A strict hit implies a lenient hit, so ica <= pia on any dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass


@dataclass(frozen=True)
class FormatSpec:
    """Answer-format contract: tag token ids, length cap, content alphabet."""

    open_tag: int
    close_tag: int
    max_answer_len: int
    answer_alphabet: frozenset

    def __post_init__(self):
        if self.open_tag == self.close_tag:
            raise ValueError("open and close tags must be distinct")
        if self.open_tag in self.answer_alphabet or self.close_tag in self.answer_alphabet:
            raise ValueError("tags must lie outside the answer alphabet")


@dataclass(frozen=True)
class ParsedOutput:
    strict: tuple | None
    lenient: tuple | None


@dataclass(frozen=True)
class SampleScore:
    format_ok: bool
    content_ok: bool


@dataclass(frozen=True)
class EvalOutcome:
    records: tuple
    ica: float
    pia: float


def _first_wellformed_pair(tokens, spec: FormatSpec):
    """(open_idx, close_idx) of the first tag pair with tag-free content."""
    for i, tok in enumerate(tokens):
        if tok != spec.open_tag:
            continue
        for j in range(i + 1, len(tokens)):
            if tokens[j] == spec.close_tag:
                content = tokens[i + 1:j]
                if spec.open_tag not in content and spec.close_tag not in content:
                    return i, j
                break  # nested tag inside; try the next open
    return None


def parse_output(tokens, spec: FormatSpec) -> ParsedOutput:
    """Extract the strict and lenient answer readings from generated ids.

    strict: content of the first well-formed tag pair, required to span the
    whole output (no tokens before the open tag or after the close tag) and
    to fit the length cap. lenient: content of the first well-formed pair
    wherever it sits; if no pair exists, the maximal trailing run of
    answer-alphabet tokens.
    """
    tokens = tuple(int(t) for t in tokens)
    pair = _first_wellformed_pair(tokens, spec)

    strict = None
    lenient = None
    if pair is not None:
        i, j = pair
        content = tokens[i + 1:j]
        lenient = content
        if i == 0 and j == len(tokens) - 1 and len(content) <= spec.max_answer_len:
            strict = content
    else:
        run = []
        for tok in reversed(tokens):
            if tok in spec.answer_alphabet:
                run.append(tok)
            else:
                break
        if run:
            lenient = tuple(reversed(run))
    return ParsedOutput(strict=strict, lenient=lenient)


def gold_content(gold, spec: FormatSpec) -> tuple:
    """Strip the tag wrapper off a gold answer sequence."""
    gold = tuple(int(t) for t in gold)
    if len(gold) >= 2 and gold[0] == spec.open_tag and gold[-1] == spec.close_tag:
        return gold[1:-1]
    return gold


def score(outputs, golds, spec: FormatSpec) -> EvalOutcome:
    """Score generated sequences against gold answers.

    format_ok requires a strict parse equal to the gold content; content_ok
    requires the lenient parse to equal it. Aggregates are plain means.
    """
    if len(outputs) != len(golds):
        raise ValueError(f"{len(outputs)} outputs vs {len(golds)} golds")
    records = []
    for out, gold in zip(outputs, golds):
        want = gold_content(gold, spec)
        parsed = parse_output(out, spec)
        content_ok = parsed.lenient is not None and parsed.lenient == want
        format_ok = parsed.strict is not None and parsed.strict == want
        records.append(SampleScore(format_ok=format_ok, content_ok=content_ok))
    n = len(records)
    ica = sum(r.format_ok for r in records) / n if n else 0.0
    pia = sum(r.content_ok for r in records) / n if n else 0.0
    return EvalOutcome(records=tuple(records), ica=ica, pia=pia)


def write_audit_jsonl(path, prompts, outputs, golds, outcome: EvalOutcome) -> None:
    """Per-sample audit trail: prompt, output, gold, and both verdicts."""
    with open(path, "w", newline="\n") as fh:
        for prompt, out, gold, rec in zip(prompts, outputs, golds, outcome.records):
            row = {
                "prompt": [int(t) for t in prompt],
                "output": [int(t) for t in out],
                "gold": [int(t) for t in gold],
                "format_ok": rec.format_ok,
                "content_ok": rec.content_ok,
            }
            fh.write(json.dumps(row) + "\n")
