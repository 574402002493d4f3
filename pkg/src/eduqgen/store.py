"""Persistence: response cache, dataset ingestion, cost accounting, run artifacts.

The oracle cache is a single append-friendly JSONL file: one entry per line,
last write wins on reload. Dataset files are JSONL too, one record per line
in the schema documented by :func:`record_from_dict`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

from .domain import (
    BloomLevel,
    DatasetRecord,
    DomainError,
    EducationalObjectives,
    QuestionState,
    validate_objectives,
)

logger = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1

_KNOWN_RECORD_FIELDS = {"id", "gold_question", "objectives", "solution", "source", "schema_version"}


class StoreError(Exception):
    pass


class FileUnreadable(StoreError):
    pass


class AllRecordsInvalid(StoreError):
    pass


class UnknownModelPrice(StoreError):
    pass


# ---------------------------------------------------------------------------
# serialization


def objectives_to_dict(obj: EducationalObjectives) -> dict[str, Any]:
    out: dict[str, Any] = {
        "concepts": list(obj.concepts),
        "core_quality": list(obj.core_quality),
        "core_ability": list(obj.core_ability),
        "bloom_level": obj.bloom_level.value,
    }
    if obj.context is not None:
        out["context"] = obj.context
    return out


def record_to_dict(record: DatasetRecord) -> dict[str, Any]:
    out: dict[str, Any] = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "id": record.id,
        "gold_question": record.gold_question,
        "objectives": objectives_to_dict(record.objectives),
    }
    if record.solution is not None:
        out["solution"] = record.solution
    if record.source is not None:
        out["source"] = record.source
    out.update(record.extras)
    return out


def record_from_dict(raw: Mapping[str, Any]) -> DatasetRecord:
    """Parse one dataset record.

    Expected shape: ``{id, gold_question, objectives{concepts[], core_quality[],
    core_ability[], bloom_level, context?}, solution?, source?}``. Unknown
    top-level fields are preserved opaquely in ``extras``.
    """
    if "id" not in raw or "gold_question" not in raw:
        raise DomainError("record needs 'id' and 'gold_question'")
    if "objectives" not in raw:
        raise DomainError("record needs an 'objectives' object")
    objectives = validate_objectives(raw["objectives"])
    extras = {k: v for k, v in raw.items() if k not in _KNOWN_RECORD_FIELDS}
    return DatasetRecord(
        id=str(raw["id"]),
        gold_question=str(raw["gold_question"]),
        objectives=objectives,
        solution=None if raw.get("solution") is None else str(raw["solution"]),
        source=None if raw.get("source") is None else str(raw["source"]),
        extras=extras,
    )


def state_to_dict(state: QuestionState) -> dict[str, Any]:
    return {
        "id": state.id,
        "question_text": state.question_text,
        "design_thought": state.design_thought,
        "depth": state.depth,
    }


def state_from_dict(raw: Mapping[str, Any]) -> QuestionState:
    return QuestionState(
        id=str(raw["id"]),
        question_text=str(raw["question_text"]),
        design_thought=str(raw.get("design_thought", "")),
        depth=int(raw.get("depth", 0)),
    )


# ---------------------------------------------------------------------------
# dataset ingestion


@dataclass
class IngestReport:
    n_records: int
    n_errors: int
    errors: list[tuple[int, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    mean_concepts: float = 0.0


def ingest_dataset(
    path: str | Path,
    *,
    require_mode: str | None = None,
) -> tuple[list[DatasetRecord], IngestReport]:
    """Read a JSONL dataset, collecting per-line errors instead of failing.

    ``require_mode="sq"`` rejects records that carry a context (standard
    questions must be context-free); ``"cq"`` rejects records without one.
    Raises :class:`AllRecordsInvalid` when no line yields a valid record.
    """
    if require_mode not in (None, "sq", "cq"):
        raise ValueError(f"require_mode must be None, 'sq' or 'cq', got {require_mode!r}")
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc

    records: list[DatasetRecord] = []
    errors: list[tuple[int, str]] = []
    warnings: list[str] = []
    seen_ids: set[str] = set()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except ValueError as exc:
            errors.append((line_no, f"invalid JSON: {exc}"))
            continue
        try:
            record = record_from_dict(raw)
        except DomainError as exc:
            errors.append((line_no, str(exc)))
            continue
        if record.id in seen_ids:
            errors.append((line_no, f"duplicate id {record.id!r}"))
            continue
        if require_mode == "sq" and record.objectives.is_contextual:
            errors.append((line_no, f"record {record.id!r} has a context but mode is sq"))
            continue
        if require_mode == "cq" and not record.objectives.is_contextual:
            errors.append((line_no, f"record {record.id!r} lacks a context but mode is cq"))
            continue
        if not record.objectives.core_quality:
            warnings.append(f"record {record.id!r}: empty core_quality")
        if not record.objectives.core_ability:
            warnings.append(f"record {record.id!r}: empty core_ability")
        seen_ids.add(record.id)
        records.append(record)

    if not records:
        raise AllRecordsInvalid(f"{path}: no valid records ({len(errors)} line errors)")
    mean_concepts = sum(len(r.objectives.concepts) for r in records) / len(records)
    for line_no, message in errors:
        logger.warning("%s:%d: %s", path, line_no, message)
    return records, IngestReport(
        n_records=len(records),
        n_errors=len(errors),
        errors=errors,
        warnings=warnings,
        mean_concepts=mean_concepts,
    )


def sample_dataset_path() -> Path:
    """Path of the small bundled dataset used for tests and demos."""
    return Path(str(resources.files("eduqgen.data").joinpath("sample_questions.jsonl")))


def split_test(
    records: list[DatasetRecord], fraction: float = 0.10, seed: int = 0
) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Deterministic (train, test) split; the test side gets ceil(n * fraction)."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    shuffled = list(records)
    random.Random(seed).shuffle(shuffled)
    n_test = math.ceil(len(records) * fraction)
    return shuffled[n_test:], shuffled[:n_test]


# ---------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class ModelPrice:
    prompt_per_1m: float
    completion_per_1m: float

    def __post_init__(self) -> None:
        if self.prompt_per_1m < 0 or self.completion_per_1m < 0:
            raise ValueError("prices must be non-negative")


@dataclass(frozen=True)
class PriceTable:
    prices: Mapping[str, ModelPrice]

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "PriceTable":
        prices = {}
        for model, entry in raw.items():
            if isinstance(entry, Mapping):
                prices[model] = ModelPrice(float(entry["prompt_per_1m"]), float(entry["completion_per_1m"]))
            else:
                prompt_price, completion_price = entry
                prices[model] = ModelPrice(float(prompt_price), float(completion_price))
        return cls(prices)


def record_usage(model: str, prompt_tokens: int, completion_tokens: int, prices: PriceTable) -> float:
    """Cost of one call: per-million token prices applied to actual usage."""
    if model not in prices.prices:
        raise UnknownModelPrice(f"no price entry for model {model!r}")
    price = prices.prices[model]
    return prompt_tokens * price.prompt_per_1m / 1e6 + completion_tokens * price.completion_per_1m / 1e6


class UsageMeter:
    """Accumulates per-call usage and cost for a run. Thread-safe.

    Cached replies are counted as calls but cost nothing; without a price
    table every call costs zero while token counts are still tracked.
    """

    def __init__(self, prices: PriceTable | None = None):
        self.prices = prices
        self._lock = threading.Lock()
        self.call_count = 0
        self.cache_hits = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.total_cost = 0.0

    def record(self, model: str, response) -> float:
        cost = 0.0
        if not response.from_cache and self.prices is not None:
            cost = record_usage(model, response.prompt_tokens, response.completion_tokens, self.prices)
        with self._lock:
            self.call_count += 1
            if response.from_cache:
                self.cache_hits += 1
            else:
                self.prompt_tokens += response.prompt_tokens
                self.completion_tokens += response.completion_tokens
                self.total_cost += cost
        return cost


# ---------------------------------------------------------------------------
# oracle response cache


@dataclass(frozen=True)
class CacheEntry:
    key: str
    canonical_request: str
    response_text: str
    prompt_tokens: int
    completion_tokens: int
    created_at: float


class ResponseCache:
    """Single-file key-value cache with collision-checked reads.

    Each entry stores the canonical request alongside the response; a read
    whose stored request differs from the query is treated as a miss, so a
    digest collision can never surface a wrong reply.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, CacheEntry] = {}
        self.hits = 0
        self.misses = 0
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            entry = CacheEntry(
                key=raw["key"],
                canonical_request=raw["canonical_request"],
                response_text=raw["response_text"],
                prompt_tokens=int(raw["prompt_tokens"]),
                completion_tokens=int(raw["completion_tokens"]),
                created_at=float(raw["created_at"]),
            )
            self._entries[entry.key] = entry

    def get(self, key: str, canonical_request: str) -> CacheEntry | None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None and entry.canonical_request == canonical_request:
                self.hits += 1
                return entry
            self.misses += 1
            return None

    def put(self, key: str, canonical_request: str, text: str, prompt_tokens: int, completion_tokens: int) -> None:
        entry = CacheEntry(
            key=key,
            canonical_request=canonical_request,
            response_text=text,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            created_at=time.time(),
        )
        with self._lock:
            self._entries[key] = entry
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(entry), ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def hit_ratio(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


# ---------------------------------------------------------------------------
# run persistence


def _digest_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_manifest(run_dir: str | Path, *, extra: Mapping[str, Any] | None = None) -> Path:
    """Write ``manifest.json`` listing every artifact in the run directory with
    its digest, enabling exact re-aggregation without re-querying oracles."""
    run_dir = Path(run_dir)
    artifacts = []
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            artifacts.append({"path": str(path.relative_to(run_dir)), "sha256": _digest_file(path)})
    manifest: dict[str, Any] = {
        "schema_version": 1,
        "created_at": time.time(),
        "artifacts": artifacts,
    }
    if extra:
        manifest.update(extra)
    return write_json(run_dir / "manifest.json", manifest)


def read_manifest(run_dir: str | Path) -> dict[str, Any] | None:
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except ValueError:
        return None


def completed_record_ids(run_dir: str | Path) -> set[str]:
    """Record ids with a valid per-record artifact, used to resume a batch."""
    records_dir = Path(run_dir) / "records"
    done: set[str] = set()
    if not records_dir.is_dir():
        return done
    for path in records_dir.glob("*.json"):
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except ValueError:
            continue
        record_id = payload.get("record_id")
        if record_id:
            done.add(str(record_id))
    return done


def persist_run(result, run_dir: str | Path, *, extra: Mapping[str, Any] | None = None) -> Path:
    """Persist a result payload plus a manifest; returns the manifest path.

    ``result`` may be anything JSON-serializable or an object exposing
    ``to_dict()`` (a search result, a judgment batch, ...).
    """
    run_dir = Path(run_dir)
    try:
        payload = result.to_dict() if hasattr(result, "to_dict") else result
        write_json(run_dir / "result.json", payload)
        return write_manifest(run_dir, extra=extra)
    except OSError as exc:
        raise StoreError(f"cannot persist run under {run_dir}: {exc}") from exc
