"""Prompt rendering and structured-reply parsing.

Template bodies live as plain text files (one per template) so their wording
can be edited without touching code. Only the known slot names listed in
:data:`REQUIRED_PLACEHOLDERS` are substituted; every other brace in a
template, such as the JSON output examples, is left untouched.

Rendering is pure: the same inputs always produce byte-identical prompts.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .domain import (
    CriticFeedback,
    DomainError,
    EducationalObjectives,
    QuestionState,
    ScoreOutOfRange,
    Trajectory,
)


class PromptError(Exception):
    pass


class MissingPlaceholder(PromptError):
    pass


class NoJsonFound(PromptError):
    pass


class SchemaMismatch(PromptError):
    pass


TEMPLATE_NAMES = ("init", "critic", "reflection", "pass_rate", "win_rate", "solve")

REQUIRED_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "init": frozenset({"education_objectives", "few_shot_block"}),
    "critic": frozenset({"education_objectives", "question"}),
    "reflection": frozenset({"education_objectives", "question", "direction", "trajectory_thoughts"}),
    "pass_rate": frozenset({"education_objectives", "question"}),
    "win_rate": frozenset({"education_objectives", "question_pair"}),
    "solve": frozenset({"question"}),
}

# Default few-shot exemplars for the generation template. Replace by passing
# your own exemplar strings to render_init.
DEFAULT_FEW_SHOTS: tuple[str, ...] = (
    '{"question_design_thought": "Target angle-of-elevation modeling with the tangent ratio in a '
    "measurement scenario; two observation points force students to set up and solve a small system "
    'rather than read off one triangle.", "question": "From point A on level ground, the angle of '
    "elevation of the top of a flagpole is 30 degrees. After walking 20 m toward the pole to point B, "
    "the angle of elevation is 45 degrees. What is the height of the pole?\\n"
    "A. 10(sqrt(3)+1) m\\nB. 10(sqrt(3)-1) m\\nC. 20(sqrt(3)-1) m\\nD. 10*sqrt(3) m\"}",
    '{"question_design_thought": "Test recognition of geometric growth hidden inside a recurrence so '
    "that rote term-by-term computation is slower than spotting the closed form; include the classic "
    'off-by-one trap as a distractor.", "question": "A sequence satisfies a_1 = 2 and a_(n+1) = 2*a_n '
    'for all n >= 1. What is a_6?\\nA. 32\\nB. 64\\nC. 128\\nD. 12"}',
)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    required_placeholders: frozenset[str]


@dataclass(frozen=True)
class QuestionDraft:
    """Parsed generation or reflection reply: a design thought plus the question."""

    thought: str
    question: str


@dataclass(frozen=True)
class PassVerdict:
    passed: bool
    reason: str = ""


@dataclass(frozen=True)
class WinVerdict:
    better: int  # 1 or 2, by position in the rendered pair
    reason: str = ""


_SLOT = re.compile(r"\{([a-z_]+)\}")


def _slots_in(body: str) -> set[str]:
    return {m.group(1) for m in _SLOT.finditer(body) if m.group(1) in _ALL_SLOT_NAMES}


_ALL_SLOT_NAMES = frozenset().union(*REQUIRED_PLACEHOLDERS.values())


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load all templates from ``directory`` or from the packaged defaults.

    A template file missing one of its required placeholders is rejected up
    front, since every later render would fail.
    """
    templates: dict[str, PromptTemplate] = {}
    for name in TEMPLATE_NAMES:
        if directory is not None:
            body = (Path(directory) / f"{name}.txt").read_text(encoding="utf-8")
        else:
            body = resources.files("eduqgen.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")
        required = REQUIRED_PLACEHOLDERS[name]
        missing = required - _slots_in(body)
        if missing:
            raise MissingPlaceholder(f"template {name!r} lacks placeholders: {sorted(missing)}")
        templates[name] = PromptTemplate(name=name, body=body, required_placeholders=required)
    return templates


def serialize_objectives(obj: EducationalObjectives) -> str:
    """Fixed labeled block used everywhere objectives are shown to a model."""
    lines = [
        f"Concept: {', '.join(obj.concepts)}",
        f"Core Quality: {', '.join(obj.core_quality)}",
        f"Core Ability: {', '.join(obj.core_ability)}",
    ]
    if obj.context is not None:
        lines.append(f"Context: {obj.context}")
    lines.append(f"Bloom's Taxonomy: {obj.bloom_level.value}")
    return "\n".join(lines)


def serialize_trajectory(trajectory: Trajectory) -> str:
    """Numbered history entries, oldest first; an explicit marker when empty."""
    if not trajectory.steps:
        return "(none)"
    entries = []
    for i, step in enumerate(trajectory.steps, start=1):
        direction = step.feedback.direction.strip() or "(no issues reported)"
        entries.append(
            f"{i}. Question: {step.state.question_text}\n"
            f"   Score: {step.feedback.score:g}\n"
            f"   Feedback: {direction}"
        )
    return "\n".join(entries)


class PromptRenderer:
    """Renders the six templates against domain values."""

    def __init__(self, templates: dict[str, PromptTemplate] | None = None):
        self.templates = templates if templates is not None else load_templates()

    def _render(self, name: str, bindings: dict[str, str], allow_blank: frozenset[str] = frozenset()) -> str:
        template = self.templates[name]
        missing = [
            slot
            for slot in sorted(template.required_placeholders)
            if slot not in bindings or (slot not in allow_blank and not bindings[slot].strip())
        ]
        if missing:
            raise MissingPlaceholder(f"template {name!r}: unbound or blank placeholders {missing}")
        return _SLOT.sub(
            lambda m: bindings[m.group(1)] if m.group(1) in bindings else m.group(0),
            template.body,
        )

    def render_init(self, obj: EducationalObjectives, few_shots: tuple[str, ...] = DEFAULT_FEW_SHOTS) -> str:
        block = ""
        if few_shots:
            block = "Example:\n" + "\n\n".join(few_shots) + "\n\n"
        return self._render(
            "init",
            {"education_objectives": serialize_objectives(obj), "few_shot_block": block},
            allow_blank=frozenset({"few_shot_block"}),
        )

    def render_critic(self, obj: EducationalObjectives, state: QuestionState) -> str:
        return self._render(
            "critic",
            {"education_objectives": serialize_objectives(obj), "question": state.question_text},
        )

    def render_reflection(
        self,
        obj: EducationalObjectives,
        trajectory: Trajectory,
        state: QuestionState,
        feedback: CriticFeedback,
    ) -> str:
        if len(trajectory) != state.depth:
            raise DomainError(
                f"trajectory length {len(trajectory)} does not match state depth {state.depth}"
            )
        return self._render(
            "reflection",
            {
                "education_objectives": serialize_objectives(obj),
                "question": state.question_text,
                "direction": feedback.direction.strip() or "(no issues reported)",
                "trajectory_thoughts": serialize_trajectory(trajectory),
            },
        )

    def render_pass(self, obj: EducationalObjectives, question_text: str) -> str:
        return self._render(
            "pass_rate",
            {"education_objectives": serialize_objectives(obj), "question": question_text},
        )

    def render_win(self, obj: EducationalObjectives, question_a: str, question_b: str) -> str:
        if not question_a.strip() or not question_b.strip():
            raise MissingPlaceholder("win_rate: both questions must be non-blank")
        pair = f"Question 1: {question_a}\nQuestion 2: {question_b}"
        return self._render(
            "win_rate",
            {"education_objectives": serialize_objectives(obj), "question_pair": pair},
        )

    def render_solve(self, question_text: str) -> str:
        return self._render("solve", {"question": question_text})


def _first_json_object(text: str) -> dict:
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except ValueError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            return obj
        pos = text.find("{", pos + 1)
    raise NoJsonFound(f"no JSON object found in reply: {text[:120]!r}")


def _require_str(payload: dict, key: str, *, allow_empty: bool = True) -> str:
    if key not in payload:
        raise SchemaMismatch(f"missing key {key!r}")
    value = payload[key]
    if not isinstance(value, str):
        raise SchemaMismatch(f"key {key!r} must be a string, got {type(value).__name__}")
    if not allow_empty and not value.strip():
        raise SchemaMismatch(f"key {key!r} must be non-empty")
    return value


def _coerce_number(payload: dict, key: str) -> float:
    if key not in payload:
        raise SchemaMismatch(f"missing key {key!r}")
    value = payload[key]
    if isinstance(value, bool):
        raise SchemaMismatch(f"key {key!r} must be a number, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value.strip())
        except ValueError:
            pass
    raise SchemaMismatch(f"key {key!r} must be a number, got {value!r}")


def _coerce_flag(payload: dict, key: str, allowed: tuple[int, ...]) -> int:
    value = _coerce_number(payload, key)
    if value not in [float(a) for a in allowed]:
        raise SchemaMismatch(f"key {key!r} must be one of {allowed}, got {value!r}")
    return int(value)


def parse_json_reply(text: str, schema: str):
    """Extract and validate the first JSON object in a model reply.

    Models routinely wrap their JSON in prose or code fences; any such
    wrapping is ignored. Returns a typed payload per ``schema``:
    ``init``/``reflection`` give a :class:`QuestionDraft`, ``critic`` a
    :class:`CriticFeedback`, ``pass`` a :class:`PassVerdict`, ``win`` a
    :class:`WinVerdict`.
    """
    payload = _first_json_object(text)
    if schema == "init":
        return QuestionDraft(
            thought=_require_str(payload, "question_design_thought"),
            question=_require_str(payload, "question", allow_empty=False),
        )
    if schema == "reflection":
        return QuestionDraft(
            thought=_require_str(payload, "thought"),
            question=_require_str(payload, "question", allow_empty=False),
        )
    if schema == "critic":
        score = _coerce_number(payload, "score")
        if not 0 <= score <= 10:
            raise ScoreOutOfRange(f"critic score {score} outside [0, 10]")
        direction = _require_str(payload, "direction")
        try:
            return CriticFeedback(score=score, direction=direction)
        except ScoreOutOfRange:
            raise
        except DomainError as exc:
            raise SchemaMismatch(str(exc)) from exc
    if schema == "pass":
        return PassVerdict(
            passed=bool(_coerce_flag(payload, "pass_rate", (0, 1))),
            reason=str(payload.get("reason", "")),
        )
    if schema == "win":
        return WinVerdict(
            better=_coerce_flag(payload, "better_question", (1, 2)),
            reason=str(payload.get("reason", "")),
        )
    raise ValueError(f"unknown schema {schema!r}")


REPAIR_INSTRUCTION = "Return ONLY the JSON object in the required output format, with no other text."
