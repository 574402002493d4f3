"""Question-quality evaluation: model-judged metrics plus text overlap scores.

Three judged metrics, each decided by strict majority over independent
samples of the judge model:

  solvable   the judge is asked to solve the question and report success;
  pass       the judge checks every objective and returns a binary verdict;
  win        the judge compares a candidate against a reference question.

Win judgments are order-balanced: every sample evaluates both orderings of
the pair, so each of the ``samples`` rounds contributes two votes. A tied
vote counts as a loss for the candidate.

The text metrics (token-level n-gram precision with brevity penalty, and
longest-common-subsequence F1) need no oracle and are implemented here
directly.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .domain import EducationalObjectives
from .oracles import Oracle, OracleRequest
from .prompts import (
    PassVerdict,
    PromptError,
    PromptRenderer,
    WinVerdict,
    parse_json_reply,
)
from .store import UsageMeter


class EvalError(Exception):
    pass


class IndeterminateVerdict(EvalError):
    pass


class EmptyReport(EvalError):
    pass


@dataclass(frozen=True)
class SampleVote:
    index: int
    vote: bool
    rationale: str = ""


@dataclass(frozen=True)
class Judgment:
    """Outcome of one self-consistency vote.

    ``vote_split`` is (yes, no) for solvable/pass and (candidate, reference)
    for win; ``majority`` requires a strict majority of the votes.
    """

    metric: str
    samples: tuple[SampleVote, ...]
    majority: bool
    vote_split: tuple[int, int]

    @property
    def is_tie(self) -> bool:
        return self.vote_split[0] == self.vote_split[1]

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "majority": self.majority,
            "vote_split": list(self.vote_split),
            "samples": [
                {"index": s.index, "vote": s.vote, "rationale": s.rationale} for s in self.samples
            ],
        }


def majority_verdict(votes: Sequence[bool]) -> bool:
    """Strict majority: more than half the votes must be positive."""
    yes = sum(1 for v in votes if v)
    return yes > len(votes) - yes


_SOLVED_LINE = re.compile(r"SOLVED:\s*(yes|no)\b", re.IGNORECASE)

SOLVE_REPAIR_INSTRUCTION = 'End your reply with exactly one line "SOLVED: yes" or "SOLVED: no".'


def classify_solve_reply(text: str) -> bool | None:
    """Read the final SOLVED marker; None when no marker is present."""
    matches = _SOLVED_LINE.findall(text)
    if not matches:
        return None
    return matches[-1].lower() == "yes"


class QuestionJudge:
    """Runs the judged metrics against an oracle.

    Sample counts for solvable/pass must be odd so a strict majority always
    exists; win uses two votes per sample and resolves ties against the
    candidate.
    """

    def __init__(
        self,
        oracle: Oracle,
        renderer: PromptRenderer | None = None,
        *,
        model: str,
        samples: int = 5,
        temperature: float = 0.7,
        max_tokens: int = 2048,
        meter: UsageMeter | None = None,
        repair_attempts: int = 2,
    ):
        if samples < 1 or samples % 2 == 0:
            raise ValueError(f"samples must be a positive odd number, got {samples}")
        self.oracle = oracle
        self.renderer = renderer if renderer is not None else PromptRenderer()
        self.model = model
        self.samples = samples
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.meter = meter
        self.repair_attempts = repair_attempts
        self.calls_issued = 0

    def _complete(self, prompt: str, sample_index: int) -> str:
        request = OracleRequest(
            model=self.model,
            system_prompt="",
            user_prompt=prompt,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            sample_index=sample_index,
        )
        response = self.oracle.complete(request)
        self.calls_issued += 1
        if self.meter is not None:
            self.meter.record(self.model, response)
        return response.text

    def _ask_json(self, prompt: str, schema: str, sample_index: int):
        from .prompts import REPAIR_INSTRUCTION

        current = prompt
        last_error: Exception | None = None
        for _ in range(self.repair_attempts + 1):
            text = self._complete(current, sample_index)
            try:
                return parse_json_reply(text, schema), text
            except PromptError as exc:
                last_error = exc
                current = current + "\n\n" + REPAIR_INSTRUCTION
        assert last_error is not None
        raise last_error

    def judge_solvable(self, question_text: str) -> Judgment:
        """Ask the judge to solve the question ``samples`` times; majority wins."""
        if not question_text.strip():
            raise ValueError("question text is empty")
        prompt = self.renderer.render_solve(question_text)
        votes = []
        for i in range(self.samples):
            current = prompt
            verdict: bool | None = None
            text = ""
            for _ in range(self.repair_attempts + 1):
                text = self._complete(current, i)
                verdict = classify_solve_reply(text)
                if verdict is not None:
                    break
                current = current + "\n\n" + SOLVE_REPAIR_INSTRUCTION
            if verdict is None:
                raise IndeterminateVerdict(f"sample {i}: no SOLVED marker after repairs")
            votes.append(SampleVote(index=i, vote=verdict, rationale=text))
        yes = sum(1 for v in votes if v.vote)
        return Judgment(
            metric="solvable",
            samples=tuple(votes),
            majority=majority_verdict([v.vote for v in votes]),
            vote_split=(yes, len(votes) - yes),
        )

    def judge_pass(self, obj: EducationalObjectives, question_text: str) -> Judgment:
        """Binary objective-fulfillment verdict, majority over ``samples``."""
        prompt = self.renderer.render_pass(obj, question_text)
        votes = []
        for i in range(self.samples):
            verdict, text = self._ask_json(prompt, "pass", i)
            assert isinstance(verdict, PassVerdict)
            votes.append(SampleVote(index=i, vote=verdict.passed, rationale=verdict.reason or text))
        yes = sum(1 for v in votes if v.vote)
        return Judgment(
            metric="pass",
            samples=tuple(votes),
            majority=majority_verdict([v.vote for v in votes]),
            vote_split=(yes, len(votes) - yes),
        )

    def judge_win(self, obj: EducationalObjectives, candidate: str, reference: str) -> Judgment:
        """Pairwise comparison, order-balanced to cancel judge position bias.

        Each sample judges both orderings; the candidate collects a vote
        whenever it wins in the slot it occupies. Majority over the
        2 * samples votes decides, with ties counting as a loss.
        """
        votes = []
        for i in range(self.samples):
            first, _ = self._ask_json(self.renderer.render_win(obj, candidate, reference), "win", i)
            assert isinstance(first, WinVerdict)
            votes.append(SampleVote(index=2 * i, vote=first.better == 1, rationale=first.reason))
            second, _ = self._ask_json(self.renderer.render_win(obj, reference, candidate), "win", i)
            assert isinstance(second, WinVerdict)
            votes.append(SampleVote(index=2 * i + 1, vote=second.better == 2, rationale=second.reason))
        for_candidate = sum(1 for v in votes if v.vote)
        against = len(votes) - for_candidate
        return Judgment(
            metric="win",
            samples=tuple(votes),
            majority=for_candidate > against,
            vote_split=(for_candidate, against),
        )


# ---------------------------------------------------------------------------
# text metrics

# Keeps math-looking chunks whole ("sin^2x", "a_{n+1}=2a_n") while splitting
# punctuation off ordinary words.
_MATHY = re.compile(r"[\\^_=+*/<>$]|\d")
_WORD_OR_PUNCT = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase tokens split on whitespace and punctuation boundaries."""
    tokens: list[str] = []
    for chunk in text.lower().split():
        if _MATHY.search(chunk):
            tokens.append(chunk)
        else:
            tokens.extend(_WORD_OR_PUNCT.findall(chunk))
    return tokens


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate_tokens: Sequence[str], reference_tokens: Sequence[str], max_n: int = 4, smooth: bool = False) -> float:
    """Geometric mean of modified n-gram precisions with brevity penalty.

    Strict by default: any zero n-gram precision zeroes the score. With
    ``smooth`` enabled, zero counts at n > 1 are add-one smoothed instead.
    """
    if not candidate_tokens or not reference_tokens:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate_tokens, n)
        ref = _ngrams(reference_tokens, n)
        total = sum(cand.values())
        matched = sum(min(count, ref[gram]) for gram, count in cand.items())
        if total == 0:
            matched, total = 0, 1
        if matched == 0:
            if smooth and n > 1:
                matched, total = 1, total + 1
            else:
                return 0.0
        log_sum += math.log(matched / total)
    brevity = min(1.0, math.exp(1.0 - len(reference_tokens) / len(candidate_tokens)))
    return brevity * math.exp(log_sum / max_n)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate_tokens: Sequence[str], reference_tokens: Sequence[str]) -> float:
    """Longest-common-subsequence F1 between candidate and reference tokens."""
    if not candidate_tokens or not reference_tokens:
        return 0.0
    lcs = _lcs_length(candidate_tokens, reference_tokens)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate_tokens)
    recall = lcs / len(reference_tokens)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class RecordEval:
    """Everything measured for one record under one method."""

    method: str
    record_id: str
    win: Judgment | None = None
    solvable: Judgment | None = None
    passed: Judgment | None = None
    bleu_score: float | None = None
    rouge_l_score: float | None = None
    extras: dict = field(default_factory=dict)


REPORT_COLUMNS = ("method", "win_rate", "solvable", "pass_rate", "bleu", "rouge_l", "n_records")


@dataclass(frozen=True)
class ReportRow:
    method: str
    win_rate: float | None
    solvable: float | None
    pass_rate: float | None
    bleu: float | None
    rouge_l: float | None
    n_records: int

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "win_rate": self.win_rate,
            "solvable": self.solvable,
            "pass_rate": self.pass_rate,
            "bleu": self.bleu,
            "rouge_l": self.rouge_l,
            "n_records": self.n_records,
        }


def _percentage(values: list[bool]) -> float | None:
    if not values:
        return None
    return 100.0 * sum(values) / len(values)


def _mean_percent(values: list[float]) -> float | None:
    if not values:
        return None
    return 100.0 * sum(values) / len(values)


def aggregate(results: Iterable[RecordEval]) -> list[ReportRow]:
    """Percentages per method over the record set, one row per method label."""
    by_method: dict[str, list[RecordEval]] = {}
    for result in results:
        by_method.setdefault(result.method, []).append(result)
    if not by_method:
        raise EmptyReport("no evaluation results to aggregate")
    rows = []
    for method in sorted(by_method):
        evals = by_method[method]
        rows.append(
            ReportRow(
                method=method,
                win_rate=_percentage([e.win.majority for e in evals if e.win is not None]),
                solvable=_percentage([e.solvable.majority for e in evals if e.solvable is not None]),
                pass_rate=_percentage([e.passed.majority for e in evals if e.passed is not None]),
                bleu=_mean_percent([e.bleu_score for e in evals if e.bleu_score is not None]),
                rouge_l=_mean_percent([e.rouge_l_score for e in evals if e.rouge_l_score is not None]),
                n_records=len(evals),
            )
        )
    return rows


def _format_cell(value: float | None) -> str:
    return "" if value is None else f"{value:.2f}"


def write_report_csv(rows: list[ReportRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.method,
                    _format_cell(row.win_rate),
                    _format_cell(row.solvable),
                    _format_cell(row.pass_rate),
                    _format_cell(row.bleu),
                    _format_cell(row.rouge_l),
                    str(row.n_records),
                ]
            )
    return path


def write_report_jsonl(rows: list[ReportRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    return path
