"""Run configuration: JSON config files merged with command-line flags.

Flags always override file values. A run talks either to a scripted mock or
to a live backend, never both.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .planner import SearchConfig
from .store import PriceTable

RUN_MODES = ("eqpr", "greedy", "direct", "cot", "cot_bon")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    base_url: str
    api_key_env: str = "EDUQGEN_API_KEY"
    max_retries: int = 2
    timeout: float = 60.0


@dataclass(frozen=True)
class RunConfig:
    mode: str = "eqpr"
    model: str = "mock-model"
    search: SearchConfig = field(default_factory=SearchConfig)
    eval_samples: int = 5
    bon_n: int = 5
    temperature: float = 0.7
    max_tokens: int = 2048
    mock_script: str | None = None
    backend: BackendConfig | None = None
    cache_dir: str | None = None
    prices: PriceTable | None = None
    prompt_dir: str | None = None
    concurrency: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in RUN_MODES:
            raise ConfigError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        if self.mock_script and self.backend:
            raise ConfigError("mock_script and backend are mutually exclusive")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")


def _search_from_dict(raw: Mapping[str, Any]) -> SearchConfig:
    return SearchConfig(
        iterations=int(raw.get("iterations", 4)),
        depth_limit=int(raw.get("depth_limit", 3)),
        expand_width=int(raw.get("expand_width", 3)),
        exploration_c=float(raw.get("exploration_c", 2.5)),
        early_stop_score=None if raw.get("early_stop_score") is None else float(raw["early_stop_score"]),
        seed=int(raw.get("seed", 0)),
    )


def config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    backend = None
    if raw.get("backend"):
        b = raw["backend"]
        backend = BackendConfig(
            base_url=str(b["base_url"]),
            api_key_env=str(b.get("api_key_env", "EDUQGEN_API_KEY")),
            max_retries=int(b.get("max_retries", 2)),
            timeout=float(b.get("timeout", 60.0)),
        )
    prices = PriceTable.from_dict(raw["prices"]) if raw.get("prices") else None
    try:
        return RunConfig(
            mode=str(raw.get("mode", "eqpr")),
            model=str(raw.get("model", "mock-model")),
            search=_search_from_dict(raw.get("search", {})),
            eval_samples=int(raw.get("eval_samples", 5)),
            bon_n=int(raw.get("bon_n", 5)),
            temperature=float(raw.get("temperature", 0.7)),
            max_tokens=int(raw.get("max_tokens", 2048)),
            mock_script=raw.get("mock_script"),
            backend=backend,
            cache_dir=raw.get("cache_dir"),
            prices=prices,
            prompt_dir=raw.get("prompt_dir"),
            concurrency=int(raw.get("concurrency", 8)),
            seed=int(raw.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config: {exc}") from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def apply_flag_overrides(
    config: RunConfig,
    *,
    mode: str | None = None,
    model: str | None = None,
    mock_script: str | None = None,
    seed: int | None = None,
    bon_n: int | None = None,
    concurrency: int | None = None,
) -> RunConfig:
    """Return a config with any given flags replacing file values."""
    updates: dict[str, Any] = {}
    if mode is not None:
        updates["mode"] = mode
    if model is not None:
        updates["model"] = model
    if mock_script is not None:
        updates["mock_script"] = mock_script
        updates["backend"] = None
    if seed is not None:
        updates["seed"] = seed
        updates["search"] = replace(config.search, seed=seed)
    if bon_n is not None:
        updates["bon_n"] = bon_n
    if concurrency is not None:
        updates["concurrency"] = concurrency
    return replace(config, **updates) if updates else config
