from __future__ import annotations

import itertools
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import VoteOracle
from eduqgen import oracles
from eduqgen.evalkit import (
    EmptyReport,
    IndeterminateVerdict,
    Judgment,
    QuestionJudge,
    RecordEval,
    SampleVote,
    aggregate,
    bleu,
    classify_solve_reply,
    majority_verdict,
    rouge_l,
    tokenize,
    write_report_csv,
    write_report_jsonl,
)


def _judge(oracle, samples: int = 5) -> QuestionJudge:
    return QuestionJudge(oracle, model="mock-model", samples=samples)


# ---------------------------------------------------------------------------
# majority voting


def test_majority_exhaustive_over_five_votes():
    for bits in itertools.product([False, True], repeat=5):
        assert majority_verdict(bits) == (sum(bits) > 2)


def test_judge_requires_odd_samples():
    with pytest.raises(ValueError):
        _judge(VoteOracle(), samples=4)
    with pytest.raises(ValueError):
        _judge(VoteOracle(), samples=0)


@pytest.mark.parametrize(
    "votes,expected",
    [
        ([True] * 5, True),
        ([True, True, True, False, False], True),
        ([False, False, False, True, True], False),
    ],
)
def test_judge_solvable_majorities(votes, expected):
    oracle = VoteOracle(solve_votes=votes)
    judgment = _judge(oracle).judge_solvable("Is 17 prime?")
    assert judgment.majority is expected
    assert judgment.vote_split == (sum(votes), 5 - sum(votes))
    assert len(judgment.samples) == 5
    assert oracle.calls == 5


def test_judge_solvable_rejects_empty_question():
    with pytest.raises(ValueError):
        _judge(VoteOracle(solve_votes=[True] * 5)).judge_solvable("  ")


def test_classify_solve_reply():
    assert classify_solve_reply("steps...\nSOLVED: yes") is True
    assert classify_solve_reply("cannot do it\nSOLVED: no") is False
    assert classify_solve_reply("no marker here") is None
    assert classify_solve_reply("SOLVED: no\n...later...\nSOLVED: yes") is True


def test_judge_solvable_indeterminate_after_repairs():
    class Unmarked(oracles.Oracle):
        def __init__(self):
            self.calls = 0

        def complete(self, req):
            self.calls += 1
            return oracles.OracleResponse(text="I refuse to follow formats.")

    oracle = Unmarked()
    with pytest.raises(IndeterminateVerdict):
        _judge(oracle).judge_solvable("Solve x + 1 = 2.")
    assert oracle.calls == 3  # one ask plus two repairs for the first sample


@pytest.mark.parametrize(
    "votes,expected",
    [
        ([True, True, True, False, False], True),
        ([True, True, False, False, False], False),
    ],
)
def test_judge_pass_majorities(objectives, votes, expected):
    oracle = VoteOracle(pass_votes=votes)
    judgment = _judge(oracle).judge_pass(objectives, "Which event is random?")
    assert judgment.majority is expected
    assert oracle.calls == 5


def test_judge_pass_sample_failure_reason_kept(objectives):
    oracle = VoteOracle(pass_votes=[False] * 5)
    judgment = _judge(oracle).judge_pass(objectives, "Which event is random?")
    assert judgment.vote_split == (0, 5)
    assert all(not vote.vote for vote in judgment.samples)


# ---------------------------------------------------------------------------
# win judging


def _prefers_text(winner: str):
    def rule(first: str, second: str, sample_index: int) -> int:
        if winner in first:
            return 1
        if winner in second:
            return 2
        return 1

    return rule


def test_judge_win_candidate_better(objectives):
    oracle = VoteOracle(win_rule=_prefers_text("CAND"))
    judgment = _judge(oracle).judge_win(objectives, "CAND question", "GOLD question")
    assert judgment.majority is True
    assert judgment.vote_split == (10, 0)
    assert len(judgment.samples) == 10
    assert oracle.calls == 10


def test_judge_win_label_swap_flips_verdict(objectives):
    rule = _prefers_text("CAND")
    forward = _judge(VoteOracle(win_rule=rule)).judge_win(objectives, "CAND question", "GOLD question")
    swapped = _judge(VoteOracle(win_rule=rule)).judge_win(objectives, "GOLD question", "CAND question")
    assert forward.majority is True
    assert swapped.majority is False
    assert swapped.vote_split == (0, 10)


def test_judge_win_identical_texts_tie_counts_as_loss(objectives):
    # A position-biased judge splits an identical pair evenly; the tie
    # resolves against the candidate.
    oracle = VoteOracle(win_rule=lambda first, second, i: 1)
    judgment = _judge(oracle).judge_win(objectives, "Same question", "Same question")
    assert judgment.vote_split == (5, 5)
    assert judgment.is_tie
    assert judgment.majority is False


def test_judge_win_seven_of_ten(objectives):
    outcomes = iter([1, 2, 1, 2, 1, 2, 1, 1, 2, 1])
    # candidate occupies slot 1 on even calls, slot 2 on odd calls

    calls = []

    def rule(first, second, sample_index):
        verdict = next(outcomes)
        calls.append(verdict)
        return verdict

    oracle = VoteOracle(win_rule=rule)
    judgment = _judge(oracle).judge_win(objectives, "CAND", "GOLD")
    # votes for candidate: slot-1 wins on candidate-first calls (indices 0,2,...)
    # and slot-2 wins on reference-first calls (indices 1,3,...)
    expected_votes = sum(
        1 for i, verdict in enumerate(calls) if (i % 2 == 0 and verdict == 1) or (i % 2 == 1 and verdict == 2)
    )
    assert judgment.vote_split[0] == expected_votes == 7
    assert judgment.majority is True


# ---------------------------------------------------------------------------
# text metrics


def test_bleu_identity():
    tokens = tokenize("a farmer plants 20 trees along a road")
    assert bleu(tokens, tokens) == pytest.approx(1.0)


def test_bleu_disjoint_zero():
    assert bleu(["a", "b"], ["c", "d"]) == 0.0


def test_bleu_strict_zero_on_missing_ngram():
    assert bleu(list("abcd"), list("abce")) == 0.0


def test_bleu_hand_counted_precisions_via_smoothing():
    # p1=3/4, p2=2/3, p3=1/2 and the 4-gram misses; smoothing replaces the
    # zero with 1/2, so the geometric mean over [3/4, 2/3, 1/2, 1/2] applies.
    expected = (0.75 * (2 / 3) * 0.5 * 0.5) ** 0.25
    assert bleu(list("abcd"), list("abce"), smooth=True) == pytest.approx(expected)


def test_bleu_brevity_penalty():
    # perfect precisions on a short candidate: only the penalty remains
    candidate = ["a", "b"]
    reference = ["a", "b", "c", "d"]
    assert bleu(candidate, reference, max_n=2) == pytest.approx(math.exp(1 - 4 / 2))


def test_rouge_l_identity_and_empty():
    tokens = tokenize("sequence sum formula")
    assert rouge_l(tokens, tokens) == pytest.approx(1.0)
    assert rouge_l([], tokens) == 0.0
    assert rouge_l(tokens, []) == 0.0


def test_rouge_l_hand_lcs():
    assert rouge_l(list("abcd"), list("acd")) == pytest.approx(0.857, abs=1e-3)


@given(
    st.lists(st.sampled_from("abcde"), max_size=12),
    st.lists(st.sampled_from("abcde"), max_size=12),
)
def test_metrics_bounded(cand, ref):
    assert 0.0 <= bleu(cand, ref) <= 1.0
    assert 0.0 <= rouge_l(cand, ref) <= 1.0


def test_tokenize_keeps_math_chunks_whole():
    tokens = tokenize("Prove that sin^2x + cos^2x = 1, then simplify.")
    assert "sin^2x" in tokens
    assert "cos^2x" in tokens
    assert "." in tokens  # plain punctuation splits off ordinary words
    assert tokens[0] == "prove"


# ---------------------------------------------------------------------------
# aggregation


def _judgment(metric: str, majority: bool) -> Judgment:
    return Judgment(
        metric=metric,
        samples=(SampleVote(index=0, vote=majority),),
        majority=majority,
        vote_split=(1, 0) if majority else (0, 1),
    )


def test_aggregate_percentages():
    evals = [
        RecordEval(method="eqpr", record_id=f"r{i}", passed=_judgment("pass", i < 4))
        for i in range(10)
    ]
    rows = aggregate(evals)
    assert len(rows) == 1
    assert rows[0].pass_rate == pytest.approx(40.0)
    assert rows[0].n_records == 10
    assert rows[0].win_rate is None


def test_aggregate_empty_raises():
    with pytest.raises(EmptyReport):
        aggregate([])


def test_aggregate_one_row_per_method(tmp_path):
    evals = [
        RecordEval(method="eqpr", record_id="r1", bleu_score=0.5, rouge_l_score=0.25),
        RecordEval(method="cot", record_id="r1", bleu_score=0.1, rouge_l_score=0.2),
        RecordEval(method="eqpr", record_id="r2", bleu_score=1.0, rouge_l_score=0.75),
    ]
    rows = aggregate(evals)
    assert [row.method for row in rows] == ["cot", "eqpr"]
    eqpr = rows[1]
    assert eqpr.bleu == pytest.approx(75.0)
    assert eqpr.rouge_l == pytest.approx(50.0)
    csv_path = write_report_csv(rows, tmp_path / "report.csv")
    header = csv_path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "method,win_rate,solvable,pass_rate,bleu,rouge_l,n_records"
    jsonl_path = write_report_jsonl(rows, tmp_path / "report.jsonl")
    assert len(jsonl_path.read_text(encoding="utf-8").splitlines()) == 2
