"""Shared test fakes and fixtures.

``VirtualTreeOracle`` simulates an infinite k-ary tree of question revisions:
the initial question is named ``Q``, reflecting on node ``X`` with sample
index ``j`` yields ``X.j``, and each node's critic score is a fixed value or
a seeded hash of its name. This makes whole searches deterministic and
replayable without scripting every fingerprint.

``VoteOracle`` replies to judge prompts from fixed verdict sequences, for
majority-voting tests.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import threading

import pytest

from eduqgen import domain, oracles
from eduqgen.prompts import PromptRenderer

QUESTION_LINE = re.compile(r"^Question: (.+)$", re.MULTILINE)
PAIR_LINE = re.compile(r"^Question 1: (.+)\nQuestion 2: (.+)$", re.MULTILINE)


def virtual_score(seed: int, name: str) -> float:
    """Stable pseudo-random critic score in [0, 10] for a virtual node name."""
    digest = hashlib.sha256(f"{seed}|{name}".encode()).digest()
    rng = random.Random(int.from_bytes(digest[:8], "big"))
    return round(rng.uniform(0, 10), 2)


class VirtualTreeOracle(oracles.Oracle):
    """Answers every pipeline prompt over a seeded virtual tree.

    Judge prompts (solve, pass, win) are answered from seeded hashes too, so
    end-to-end evaluation runs are deterministic. Win verdicts prefer the
    question with the higher virtual critic score, independent of position.
    """

    def __init__(self, seed: int = 0, fixed_scores: dict[str, float] | None = None, score_scale: float = 1.0):
        self.seed = seed
        self.fixed_scores = dict(fixed_scores or {})
        self.score_scale = score_scale
        self._lock = threading.Lock()
        self.init_calls = 0
        self.critic_calls = 0
        self.reflect_calls = 0
        self.solve_calls = 0
        self.pass_calls = 0
        self.win_calls = 0

    @property
    def total_calls(self) -> int:
        return (
            self.init_calls
            + self.critic_calls
            + self.reflect_calls
            + self.solve_calls
            + self.pass_calls
            + self.win_calls
        )

    def score(self, name: str) -> float:
        if name in self.fixed_scores:
            raw = self.fixed_scores[name]
        else:
            raw = virtual_score(self.seed, name)
        return raw * self.score_scale

    def complete(self, req: oracles.OracleRequest) -> oracles.OracleResponse:
        prompt = req.user_prompt
        if "design and create a multiple-choice question" in prompt:
            with self._lock:
                self.init_calls += 1
            name = "Q" if req.sample_index == 0 else f"Q@{req.sample_index}"
            text = json.dumps({"question_design_thought": "seeded", "question": name})
        elif "Scoring Scale" in prompt:
            with self._lock:
                self.critic_calls += 1
            name = QUESTION_LINE.search(prompt).group(1)
            text = json.dumps({"direction": f"improve {name}", "score": self.score(name)})
        elif "Trajectory_thoughts" in prompt:
            with self._lock:
                self.reflect_calls += 1
            name = QUESTION_LINE.search(prompt).group(1)
            text = json.dumps({"thought": "revise", "question": f"{name}.{req.sample_index}"})
        elif "SOLVED:" in prompt:
            with self._lock:
                self.solve_calls += 1
            name = QUESTION_LINE.search(prompt).group(1)
            vote = virtual_score(self.seed, f"solve|{name}|{req.sample_index}") >= 2.0
            text = f"Working on {name}.\nSOLVED: {'yes' if vote else 'no'}"
        elif '"pass_rate"' in prompt:
            with self._lock:
                self.pass_calls += 1
            name = QUESTION_LINE.search(prompt).group(1)
            vote = virtual_score(self.seed, f"pass|{name}|{req.sample_index}") >= 5.0
            text = json.dumps({"reason": f"checked {name}", "pass_rate": int(vote)})
        elif '"better_question"' in prompt:
            with self._lock:
                self.win_calls += 1
            match = PAIR_LINE.search(prompt)
            better = 1 if self.score(match.group(1)) >= self.score(match.group(2)) else 2
            text = json.dumps({"better_question": better, "reason": "compared"})
        else:
            raise AssertionError(f"unexpected prompt: {prompt[:100]!r}")
        return oracles.OracleResponse(text=text, prompt_tokens=10, completion_tokens=5)


class RecordingOracle(oracles.Oracle):
    """Wraps an oracle and records {fingerprint: reply} for mock-script files."""

    def __init__(self, inner: oracles.Oracle):
        self.inner = inner
        self.script: dict[str, str] = {}
        self._lock = threading.Lock()

    def complete(self, req: oracles.OracleRequest) -> oracles.OracleResponse:
        response = self.inner.complete(req)
        with self._lock:
            self.script[oracles.fingerprint(req)] = response.text
        return response


class VoteOracle(oracles.Oracle):
    """Judge fake driven by fixed verdict sequences.

    ``solve_votes``/``pass_votes`` are indexed by sample_index. ``win_rule``
    maps a (first, second) question pair to the winning position.
    """

    def __init__(
        self,
        solve_votes: list[bool] | None = None,
        pass_votes: list[bool] | None = None,
        win_rule=None,
    ):
        self.solve_votes = solve_votes
        self.pass_votes = pass_votes
        self.win_rule = win_rule
        self._lock = threading.Lock()
        self.calls = 0

    def complete(self, req: oracles.OracleRequest) -> oracles.OracleResponse:
        with self._lock:
            self.calls += 1
        prompt = req.user_prompt
        if "SOLVED:" in prompt:
            vote = self.solve_votes[req.sample_index]
            text = f"Working through it...\nSOLVED: {'yes' if vote else 'no'}"
        elif '"pass_rate"' in prompt:
            vote = self.pass_votes[req.sample_index]
            text = json.dumps({"reason": "checked", "pass_rate": 1 if vote else 0})
        elif '"better_question"' in prompt:
            match = PAIR_LINE.search(prompt)
            better = self.win_rule(match.group(1), match.group(2), req.sample_index)
            text = json.dumps({"better_question": better, "reason": "compared"})
        else:
            raise AssertionError(f"unexpected judge prompt: {prompt[:100]!r}")
        return oracles.OracleResponse(text=text, prompt_tokens=8, completion_tokens=4)


def snapshot_best_question(snapshot: dict) -> tuple[str, float]:
    """Independent output rule over a tree snapshot.

    Enumerates every root-to-leaf path in stored child order, takes the path
    with the highest mean reward (first wins ties), then the first
    highest-reward node on it. Shares no code with the search module.
    """
    nodes = {node["id"]: node for node in snapshot["nodes"]}
    paths: list[list[dict]] = []

    def walk(node_id: str, prefix: list[dict]) -> None:
        node = nodes[node_id]
        path = prefix + [node]
        if not node["children"]:
            paths.append(path)
            return
        for child_id in node["children"]:
            walk(child_id, path)

    walk(snapshot["root_id"], [])
    best_path = None
    best_mean = float("-inf")
    for path in paths:
        mean = sum(node["reward"] for node in path) / len(path)
        if mean > best_mean:
            best_mean = mean
            best_path = path
    assert best_path is not None
    best = best_path[0]
    for node in best_path[1:]:
        if node["reward"] > best["reward"]:
            best = node
    return best["question"], best_mean


def virtual_tree_best(oracle: VirtualTreeOracle, k: int, depth: int) -> tuple[str, float]:
    """Output rule enumerated over the complete virtual k-ary tree."""
    paths: list[list[str]] = []

    def walk(name: str, d: int, prefix: list[str]) -> None:
        path = prefix + [name]
        if d == depth:
            paths.append(path)
            return
        for j in range(k):
            walk(f"{name}.{j}", d + 1, path)

    walk("Q", 0, [])
    best_path = None
    best_mean = float("-inf")
    for path in paths:
        mean = sum(oracle.score(name) / 10.0 for name in path) / len(path)
        if mean > best_mean:
            best_mean = mean
            best_path = path
    assert best_path is not None
    best = best_path[0]
    best_score = oracle.score(best)
    for name in best_path[1:]:
        if oracle.score(name) > best_score:
            best, best_score = name, oracle.score(name)
    return best, best_mean


@pytest.fixture
def renderer() -> PromptRenderer:
    return PromptRenderer()


@pytest.fixture
def objectives() -> domain.EducationalObjectives:
    return domain.validate_objectives(
        {
            "concepts": ["Random events"],
            "core_quality": ["Mathematical abstraction", "Logical reasoning"],
            "core_ability": [
                "Distinguish between random, certain, and impossible events, and make probability judgments in real-life contexts"
            ],
            "bloom": "Understanding",
            "context": "Real-life scenarios involving random events (e.g., dice rolling, lottery, baby gender) to enhance relevance and interest while testing key concepts",
        }
    )


@pytest.fixture
def sq_objectives() -> domain.EducationalObjectives:
    return domain.validate_objectives(
        {"concepts": ["Sequences", "Recurrences"], "core_quality": ["Logical reasoning"], "bloom": "Apply"}
    )


# Fixed critic scores for the four-iteration trace asserted in the planner
# and acceptance tests (k=2, depth 3).
HAND_TRACE_SCORES = {
    "Q": 5.0,
    "Q.0": 6.0,
    "Q.1": 7.0,
    "Q.0.0": 8.0,
    "Q.0.1": 4.0,
    "Q.1.0": 5.5,
    "Q.1.1": 6.5,
    "Q.0.0.0": 9.0,
    "Q.0.0.1": 3.0,
    "Q.0.1.0": 2.0,
    "Q.0.1.1": 1.0,
    "Q.1.0.0": 3.5,
    "Q.1.0.1": 5.0,
    "Q.1.1.0": 4.5,
    "Q.1.1.1": 7.5,
}

# Hand-executed expectation: node name -> (visits, cum_rewards, q_value).
HAND_TRACE_EXPECTED = {
    "Q": (4, [2.60, 2.80, 1.70, 2.25], 2.3375),
    "Q.0": (2, [2.30, 1.20], 1.75),
    "Q.1": (2, [2.10, 1.75], 1.925),
    "Q.0.0": (1, [1.70], 1.70),
    "Q.0.1": (1, [0.60], 0.60),
    "Q.1.0": (1, [1.05], 1.05),
    "Q.1.1": (1, [1.40], 1.40),
    "Q.0.0.0": (1, [0.90], 0.90),
    "Q.0.0.1": (0, [], 0.0),
    "Q.0.1.0": (1, [0.20], 0.20),
    "Q.0.1.1": (0, [], 0.0),
    "Q.1.0.0": (0, [], 0.0),
    "Q.1.0.1": (1, [0.50], 0.50),
    "Q.1.1.0": (0, [], 0.0),
    "Q.1.1.1": (1, [0.75], 0.75),
}
