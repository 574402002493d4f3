"""Validated value types shared across the question-generation pipeline.

Everything here is an immutable value: pipeline stages never mutate a state
or a trajectory, they construct new ones.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping


class DomainError(ValueError):
    """Base class for domain validation failures."""


@dataclass(frozen=True)
class Violation:
    field: str
    code: str
    message: str


class ValidationFailure(DomainError):
    """Carries every violated field found while validating a raw record."""

    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(f"{v.field}: {v.message}" for v in self.violations))


class MissingConcepts(ValidationFailure):
    pass


class UnknownBloomLevel(ValidationFailure):
    pass


class BlankField(ValidationFailure):
    pass


class DepthMismatch(DomainError):
    pass


class ScoreOutOfRange(DomainError):
    pass


class InvalidFeedback(DomainError):
    pass


class BloomLevel(Enum):
    """The six cognitive levels an objective can target."""

    REMEMBER = "Remember"
    UNDERSTAND = "Understand"
    APPLY = "Apply"
    ANALYZE = "Analyze"
    EVALUATE = "Evaluate"
    CREATE = "Create"

    def __str__(self) -> str:
        return self.value


# Annotation sources mix noun and gerund forms ("Application", "Understanding");
# parsing is case-insensitive over this closed table. Anything else is rejected.
_BLOOM_SYNONYMS: dict[str, BloomLevel] = {
    "remember": BloomLevel.REMEMBER,
    "remembering": BloomLevel.REMEMBER,
    "understand": BloomLevel.UNDERSTAND,
    "understanding": BloomLevel.UNDERSTAND,
    "apply": BloomLevel.APPLY,
    "applying": BloomLevel.APPLY,
    "application": BloomLevel.APPLY,
    "analyze": BloomLevel.ANALYZE,
    "analyse": BloomLevel.ANALYZE,
    "analyzing": BloomLevel.ANALYZE,
    "analysing": BloomLevel.ANALYZE,
    "analysis": BloomLevel.ANALYZE,
    "evaluate": BloomLevel.EVALUATE,
    "evaluating": BloomLevel.EVALUATE,
    "evaluation": BloomLevel.EVALUATE,
    "create": BloomLevel.CREATE,
    "creating": BloomLevel.CREATE,
    "creation": BloomLevel.CREATE,
}


def parse_bloom_level(raw: str) -> BloomLevel:
    """Parse a Bloom level name, accepting common noun/gerund variants."""
    key = str(raw).strip().lower()
    if key not in _BLOOM_SYNONYMS:
        raise UnknownBloomLevel(
            [Violation("bloom_level", "unknown_bloom_level", f"unknown level {raw!r}")]
        )
    return _BLOOM_SYNONYMS[key]


# Splits single-string annotations like "trigonometry; sequences" into items.
_LIST_SPLIT = re.compile(r"[,;、，；]")


def _as_items(value: Any) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [part.strip() for part in _LIST_SPLIT.split(value) if part.strip()]
    return [str(item).strip() for item in value]


@dataclass(frozen=True)
class EducationalObjectives:
    """The multi-dimensional target every generated question must satisfy.

    ``context`` is None for standard (non-contextual) question records; its
    presence marks a contextual-question record.
    """

    concepts: tuple[str, ...]
    core_quality: tuple[str, ...] = ()
    core_ability: tuple[str, ...] = ()
    bloom_level: BloomLevel = BloomLevel.UNDERSTAND
    context: str | None = None

    def __post_init__(self) -> None:
        violations = []
        if not self.concepts:
            violations.append(Violation("concepts", "missing_concepts", "at least one concept required"))
        for name in ("concepts", "core_quality", "core_ability"):
            for i, item in enumerate(getattr(self, name)):
                if not str(item).strip():
                    violations.append(Violation(f"{name}[{i}]", "blank_field", "blank entry"))
        if self.context is not None and not self.context.strip():
            violations.append(Violation("context", "blank_field", "context present but blank"))
        if violations:
            raise _validation_error(violations)

    @property
    def is_contextual(self) -> bool:
        return self.context is not None


def _validation_error(violations: list[Violation]) -> ValidationFailure:
    codes = {v.code for v in violations}
    if codes == {"missing_concepts"}:
        return MissingConcepts(violations)
    if codes == {"unknown_bloom_level"}:
        return UnknownBloomLevel(violations)
    if codes == {"blank_field"}:
        return BlankField(violations)
    return ValidationFailure(violations)


_FIELD_ALIASES = {
    "concepts": ("concepts", "concept"),
    "core_quality": ("core_quality", "core_qualities", "quality"),
    "core_ability": ("core_ability", "core_abilities", "ability"),
    "bloom_level": ("bloom_level", "bloom", "blooms_taxonomy", "bloom_taxonomy"),
    "context": ("context",),
}


def validate_objectives(raw: Mapping[str, Any]) -> EducationalObjectives:
    """Validate a raw objectives mapping into an :class:`EducationalObjectives`.

    Collects every violation before failing, so a bad record reports all of
    its problems at once. Single-string list fields are split on commas and
    semicolons; Bloom levels accept noun/gerund variants.
    """
    if not isinstance(raw, Mapping):
        raise ValidationFailure([Violation("objectives", "blank_field", "expected a mapping")])

    def pick(canonical: str) -> Any:
        for alias in _FIELD_ALIASES[canonical]:
            if alias in raw:
                return raw[alias]
        return None

    violations: list[Violation] = []

    concepts = _as_items(pick("concepts"))
    if not concepts:
        violations.append(Violation("concepts", "missing_concepts", "at least one concept required"))
    core_quality = _as_items(pick("core_quality"))
    core_ability = _as_items(pick("core_ability"))
    for name, items in (("concepts", concepts), ("core_quality", core_quality), ("core_ability", core_ability)):
        for i, item in enumerate(items):
            if not item.strip():
                violations.append(Violation(f"{name}[{i}]", "blank_field", "blank entry"))

    bloom_raw = pick("bloom_level")
    bloom = BloomLevel.UNDERSTAND
    if bloom_raw is None:
        violations.append(Violation("bloom_level", "unknown_bloom_level", "missing level"))
    else:
        try:
            bloom = parse_bloom_level(bloom_raw)
        except UnknownBloomLevel as exc:
            violations.extend(exc.violations)

    context_raw = pick("context")
    context: str | None = None
    if context_raw is not None:
        context = str(context_raw).strip() or None

    if violations:
        raise _validation_error(violations)
    return EducationalObjectives(
        concepts=tuple(concepts),
        core_quality=tuple(core_quality),
        core_ability=tuple(core_ability),
        bloom_level=bloom,
        context=context,
    )


@dataclass(frozen=True)
class QuestionState:
    """One version of a question: the unit the search tree iterates over."""

    id: str
    question_text: str
    design_thought: str = ""
    depth: int = 0

    def __post_init__(self) -> None:
        if not self.question_text.strip():
            raise BlankField([Violation("question_text", "blank_field", "question text is empty")])
        if self.depth < 0:
            raise DepthMismatch(f"negative depth {self.depth}")


@dataclass(frozen=True)
class CriticFeedback:
    """A critic verdict: score in [0, 10] plus the suggested modification direction."""

    score: float
    direction: str = ""

    def __post_init__(self) -> None:
        if isinstance(self.score, bool) or not isinstance(self.score, (int, float)):
            raise ScoreOutOfRange(f"score must be a number, got {self.score!r}")
        if not 0 <= self.score <= 10:
            raise ScoreOutOfRange(f"score {self.score} outside [0, 10]")
        if self.score < 10 and not self.direction.strip():
            raise InvalidFeedback("direction required when score < 10")

    @property
    def reward(self) -> float:
        """Score normalized to [0, 1] for use as a search reward."""
        return float(self.score) / 10.0


@dataclass(frozen=True)
class TrajectoryStep:
    state: QuestionState
    feedback: CriticFeedback


@dataclass(frozen=True)
class Trajectory:
    """Ordered (state, feedback) history from the root down to a node's parent."""

    steps: tuple[TrajectoryStep, ...] = ()

    def __post_init__(self) -> None:
        for i, step in enumerate(self.steps):
            if step.state.depth != i:
                raise DepthMismatch(f"step {i} has depth {step.state.depth}, expected {i}")

    def __len__(self) -> int:
        return len(self.steps)


def trajectory_append(trajectory: Trajectory, state: QuestionState, feedback: CriticFeedback) -> Trajectory:
    """Return a new trajectory with (state, feedback) appended; the input is unchanged."""
    if state.depth != len(trajectory.steps):
        raise DepthMismatch(
            f"state depth {state.depth} does not extend trajectory of length {len(trajectory.steps)}"
        )
    return Trajectory(trajectory.steps + (TrajectoryStep(state, feedback),))


@dataclass(frozen=True)
class DatasetRecord:
    """One dataset row: a gold question annotated with its objectives."""

    id: str
    gold_question: str
    objectives: EducationalObjectives
    solution: str | None = None
    source: str | None = None
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not str(self.id).strip():
            raise BlankField([Violation("id", "blank_field", "record id is empty")])
        if not self.gold_question.strip():
            raise BlankField([Violation("gold_question", "blank_field", "gold question is empty")])
