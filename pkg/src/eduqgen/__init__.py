"""Educational math question generation by tree search over critic and
reflection oracles, with a model-judged evaluation harness."""

__version__ = "0.1.0"

from .domain import (
    BloomLevel,
    CriticFeedback,
    DatasetRecord,
    EducationalObjectives,
    QuestionState,
    Trajectory,
    trajectory_append,
    validate_objectives,
)
from .planner import Planner, SearchConfig, SearchResult
from .prompts import PromptRenderer, parse_json_reply

__all__ = [
    "BloomLevel",
    "CriticFeedback",
    "DatasetRecord",
    "EducationalObjectives",
    "Planner",
    "PromptRenderer",
    "QuestionState",
    "SearchConfig",
    "SearchResult",
    "Trajectory",
    "parse_json_reply",
    "trajectory_append",
    "validate_objectives",
]
