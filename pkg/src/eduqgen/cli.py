"""Command-line entry points: generate, batch, evaluate, compare, report.

Human-readable progress goes to stdout; machine-readable artifacts go to
files under the output directory. Exit code 0 means no record-level
failures; partial failures leave an ``errors.json`` behind and exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from . import evalkit, store
from .config import ConfigError, RunConfig, apply_flag_overrides, load_config
from .domain import DatasetRecord, DomainError, EducationalObjectives, validate_objectives
from .evalkit import EmptyReport, QuestionJudge, RecordEval, aggregate, bleu, rouge_l, tokenize
from .oracles import CachingOracle, HttpOracle, Oracle, load_mock_script
from .planner import Planner, SearchResult
from .prompts import PromptRenderer, load_templates
from .store import (
    PriceTable,
    ResponseCache,
    UsageMeter,
    completed_record_ids,
    ingest_dataset,
    split_test,
    write_json,
    write_manifest,
)


@dataclass
class OracleParts:
    oracle: Oracle
    transport: HttpOracle | None = None
    cache: ResponseCache | None = None


def build_oracle(config: RunConfig, *, session=None) -> OracleParts:
    """Wire up the configured backend, optionally behind the response cache."""
    transport: HttpOracle | None = None
    if config.mock_script:
        oracle: Oracle = load_mock_script(config.mock_script)
    elif config.backend:
        transport = HttpOracle(
            config.backend.base_url,
            config.backend.api_key_env,
            max_retries=config.backend.max_retries,
            timeout=config.backend.timeout,
            session=session,
        )
        oracle = transport
    else:
        raise ConfigError("no oracle configured: set mock_script or backend")
    cache = None
    if config.cache_dir:
        cache = ResponseCache(Path(config.cache_dir) / "oracle_cache.jsonl")
        oracle = CachingOracle(oracle, cache)
    return OracleParts(oracle=oracle, transport=transport, cache=cache)


def build_renderer(config: RunConfig) -> PromptRenderer:
    if config.prompt_dir:
        return PromptRenderer(load_templates(config.prompt_dir))
    return PromptRenderer()


def _make_planner(config: RunConfig, oracle: Oracle, renderer: PromptRenderer, meter: UsageMeter) -> Planner:
    return Planner(
        oracle,
        renderer,
        model=config.model,
        temperature=config.temperature,
        max_tokens=config.max_tokens,
        meter=meter,
    )


def run_mode(planner: Planner, obj: EducationalObjectives, config: RunConfig) -> dict[str, Any]:
    """Run one generation in the configured mode; returns the artifact payload."""
    calls_before = planner.calls_issued
    search: SearchResult | None = None
    if config.mode == "eqpr":
        search = planner.run_search(obj, config.search)
        state = search.best_question
    elif config.mode == "greedy":
        search = planner.run_greedy(obj, config.search)
        state = search.best_question
    elif config.mode == "direct":
        state = planner.run_direct(obj)
    elif config.mode == "cot":
        state = planner.run_cot(obj)
    elif config.mode == "cot_bon":
        state = planner.run_cot_bon(obj, n=config.bon_n)
    else:
        raise ConfigError(f"unknown mode {config.mode!r}")
    payload: dict[str, Any] = {
        "mode": config.mode,
        "model": config.model,
        "question_text": state.question_text,
        "state": store.state_to_dict(state),
        "oracle_calls": planner.calls_issued - calls_before,
        "total_cost": planner.meter.total_cost if planner.meter else 0.0,
    }
    if search is not None:
        payload["search"] = search.to_dict()
    return payload


def _load_objectives_file(path: Path) -> EducationalObjectives:
    raw = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(raw, Mapping) and "objectives" in raw:
        raw = raw["objectives"]
    return validate_objectives(raw)


# ---------------------------------------------------------------------------
# batch pipeline


def run_batch(
    records: list[DatasetRecord],
    config: RunConfig,
    oracle: Oracle,
    out_dir: str | Path,
    *,
    cache: ResponseCache | None = None,
) -> tuple[list[RecordEval], dict[str, str]]:
    """Generate a question per record, skipping records already completed.

    Per-record artifacts land in ``out_dir/records/``; the aggregate CSV and
    manifest are rewritten at the end. Returns the per-record text-metric
    evaluations and a map of record id to error message for failures.
    """
    out_dir = Path(out_dir)
    renderer = build_renderer(config)
    done = completed_record_ids(out_dir)
    errors: dict[str, str] = {}

    def process(record: DatasetRecord) -> dict[str, Any] | None:
        if record.id in done:
            return None
        meter = UsageMeter(config.prices)
        planner = _make_planner(config, oracle, renderer, meter)
        payload = run_mode(planner, record.objectives, config)
        payload["record_id"] = record.id
        payload["gold_question"] = record.gold_question
        cand = tokenize(payload["question_text"])
        gold = tokenize(record.gold_question)
        payload["bleu"] = bleu(cand, gold)
        payload["rouge_l"] = rouge_l(cand, gold)
        return payload

    results: dict[str, dict[str, Any]] = {}
    if config.concurrency > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            futures = {record.id: pool.submit(process, record) for record in records}
        for record in records:
            try:
                payload = futures[record.id].result()
            except Exception as exc:  # record-level isolation
                errors[record.id] = str(exc)
                continue
            if payload is not None:
                results[record.id] = payload
    else:
        for record in records:
            try:
                payload = process(record)
            except Exception as exc:
                errors[record.id] = str(exc)
                continue
            if payload is not None:
                results[record.id] = payload

    for record_id, payload in results.items():
        write_json(out_dir / "records" / f"{record_id}.json", payload)

    evals: list[RecordEval] = []
    total_calls = 0
    total_cost = 0.0
    for record in records:
        path = out_dir / "records" / f"{record.id}.json"
        if not path.exists():
            continue
        payload = json.loads(path.read_text(encoding="utf-8"))
        total_calls += int(payload.get("oracle_calls", 0))
        total_cost += float(payload.get("total_cost", 0.0))
        evals.append(
            RecordEval(
                method=payload["mode"],
                record_id=record.id,
                bleu_score=payload.get("bleu"),
                rouge_l_score=payload.get("rouge_l"),
            )
        )

    if evals:
        rows = aggregate(evals)
        evalkit.write_report_csv(rows, out_dir / "aggregate.csv")
        evalkit.write_report_jsonl(rows, out_dir / "report.jsonl")
    totals: dict[str, Any] = {
        "records": len(evals),
        "oracle_calls": total_calls,
        "total_cost": total_cost,
        "mode": config.mode,
        "model": config.model,
    }
    if cache is not None:
        totals["cache_hits"] = cache.hits
        totals["cache_misses"] = cache.misses
        totals["cache_hit_ratio"] = cache.hit_ratio
    if errors:
        write_json(out_dir / "errors.json", errors)
    write_manifest(out_dir, extra={"totals": totals})
    return evals, errors


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    objectives_path = Path(args.objectives_file)
    if not objectives_path.exists():
        print(f"error: objectives file not found: {objectives_path}", file=sys.stderr)
        print("usage: eduqgen generate OBJECTIVES_FILE [--config ...] [--out DIR]", file=sys.stderr)
        return 1
    try:
        obj = _load_objectives_file(objectives_path)
    except (ValueError, DomainError) as exc:
        print(f"error: invalid objectives file: {exc}", file=sys.stderr)
        return 1
    parts = build_oracle(config)
    meter = UsageMeter(config.prices)
    planner = _make_planner(config, parts.oracle, build_renderer(config), meter)
    payload = run_mode(planner, obj, config)
    print(payload["question_text"])
    print(f"[mode={config.mode} calls={payload['oracle_calls']} cost={payload['total_cost']:.6f}]")
    if args.out:
        out_dir = Path(args.out)
        write_json(out_dir / "result.json", payload)
        extra = {"totals": {"oracle_calls": payload["oracle_calls"], "total_cost": payload["total_cost"]}}
        if parts.cache is not None:
            extra["totals"]["cache_hit_ratio"] = parts.cache.hit_ratio
        write_manifest(out_dir, extra=extra)
        print(f"[artifacts written to {out_dir}]")
    return 0


def cmd_batch(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if not args.out:
        print("error: batch requires --out RUN_DIR", file=sys.stderr)
        return 1
    try:
        records, report = ingest_dataset(args.dataset)
    except store.StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if report.n_errors:
        print(f"warning: {report.n_errors} dataset lines skipped", file=sys.stderr)
    if args.test_split is not None:
        _, records = split_test(records, args.test_split, seed=config.seed)
    if args.limit is not None:
        records = records[: args.limit]
    parts = build_oracle(config)
    print(f"running {config.mode} over {len(records)} records")
    evals, errors = run_batch(records, config, parts.oracle, args.out, cache=parts.cache)
    print(f"completed {len(evals)} records, {len(errors)} failures; artifacts in {args.out}")
    if errors:
        print(f"error list written to {Path(args.out) / 'errors.json'}", file=sys.stderr)
        return 1
    return 0


def _load_batch_artifacts(results_dir: Path) -> dict[str, dict[str, Any]]:
    records_dir = results_dir / "records"
    artifacts: dict[str, dict[str, Any]] = {}
    if records_dir.is_dir():
        for path in sorted(records_dir.glob("*.json")):
            payload = json.loads(path.read_text(encoding="utf-8"))
            if "record_id" in payload and "question_text" in payload:
                artifacts[str(payload["record_id"])] = payload
    return artifacts


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    results_dir = Path(args.results_dir)
    if not results_dir.is_dir():
        print(f"error: results directory not found: {results_dir}", file=sys.stderr)
        return 1
    artifacts = _load_batch_artifacts(results_dir)
    if not artifacts:
        print(f"error: no record artifacts under {results_dir}", file=sys.stderr)
        return 1
    try:
        records, _ = ingest_dataset(args.dataset)
    except store.StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    by_id = {record.id: record for record in records}
    parts = build_oracle(config)
    renderer = build_renderer(config)
    meter = UsageMeter(config.prices)
    out_dir = Path(args.out) if args.out else results_dir
    errors: dict[str, str] = {}

    def judge_one(record_id: str) -> RecordEval:
        payload = artifacts[record_id]
        record = by_id[record_id]
        judge = QuestionJudge(
            parts.oracle,
            renderer,
            model=config.model,
            samples=config.eval_samples,
            temperature=config.temperature,
            max_tokens=config.max_tokens,
            meter=meter,
        )
        question = payload["question_text"]
        return RecordEval(
            method=payload["mode"],
            record_id=record_id,
            win=judge.judge_win(record.objectives, question, record.gold_question),
            solvable=judge.judge_solvable(question),
            passed=judge.judge_pass(record.objectives, question),
            bleu_score=payload.get("bleu"),
            rouge_l_score=payload.get("rouge_l"),
        )

    shared = [record_id for record_id in sorted(artifacts) if record_id in by_id]
    evals: list[RecordEval] = []
    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        futures = {record_id: pool.submit(judge_one, record_id) for record_id in shared}
    for record_id in shared:
        try:
            evals.append(futures[record_id].result())
        except Exception as exc:
            errors[record_id] = str(exc)
    if not evals:
        print("error: every record failed evaluation", file=sys.stderr)
        return 1
    rows = aggregate(evals)
    evalkit.write_report_csv(rows, out_dir / "eqgeval.csv")
    evalkit.write_report_jsonl(rows, out_dir / "eqgeval.jsonl")
    write_json(
        out_dir / "judgments.json",
        {
            e.record_id: {
                "win": e.win.to_dict() if e.win else None,
                "solvable": e.solvable.to_dict() if e.solvable else None,
                "pass": e.passed.to_dict() if e.passed else None,
            }
            for e in evals
        },
    )
    for row in rows:
        print(
            f"{row.method}: win={_fmt(row.win_rate)} solvable={_fmt(row.solvable)} "
            f"pass={_fmt(row.pass_rate)} over {row.n_records} records"
        )
    if errors:
        write_json(out_dir / "errors.json", errors)
        print(f"{len(errors)} records failed; see {out_dir / 'errors.json'}", file=sys.stderr)
        return 1
    return 0


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.2f}%"


def cmd_compare(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    dir_a, dir_b = Path(args.results_a), Path(args.results_b)
    for d in (dir_a, dir_b):
        if not d.is_dir():
            print(f"error: results directory not found: {d}", file=sys.stderr)
            return 1
    artifacts_a = _load_batch_artifacts(dir_a)
    artifacts_b = _load_batch_artifacts(dir_b)
    try:
        records, _ = ingest_dataset(args.dataset)
    except store.StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    by_id = {record.id: record for record in records}
    shared = sorted(set(artifacts_a) & set(artifacts_b) & set(by_id))
    if not shared:
        print("error: no overlapping records to compare", file=sys.stderr)
        return 1
    parts = build_oracle(config)
    renderer = build_renderer(config)
    meter = UsageMeter(config.prices)
    wins_a = wins_b = ties = 0
    per_record = {}
    for record_id in shared:
        judge = QuestionJudge(
            parts.oracle,
            renderer,
            model=config.model,
            samples=config.eval_samples,
            temperature=config.temperature,
            max_tokens=config.max_tokens,
            meter=meter,
        )
        verdict = judge.judge_win(
            by_id[record_id].objectives,
            artifacts_a[record_id]["question_text"],
            artifacts_b[record_id]["question_text"],
        )
        if verdict.is_tie:
            ties += 1
            outcome = "tie"
        elif verdict.majority:
            wins_a += 1
            outcome = "a"
        else:
            wins_b += 1
            outcome = "b"
        per_record[record_id] = {"outcome": outcome, "vote_split": list(verdict.vote_split)}
    n = len(shared)
    out_dir = Path(args.out) if args.out else dir_a
    label_a = next(iter(artifacts_a.values()))["mode"]
    label_b = next(iter(artifacts_b.values()))["mode"]
    row = {
        "method_a": label_a,
        "method_b": label_b,
        "win_a": 100.0 * wins_a / n,
        "win_b": 100.0 * wins_b / n,
        "ties": 100.0 * ties / n,
        "n_records": n,
    }
    out_path = out_dir / "compare.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", encoding="utf-8", newline="") as fh:
        fh.write("method_a,method_b,win_a,win_b,ties,n_records\n")
        fh.write(
            f"{row['method_a']},{row['method_b']},{row['win_a']:.2f},"
            f"{row['win_b']:.2f},{row['ties']:.2f},{n}\n"
        )
    write_json(out_dir / "compare_records.json", per_record)
    print(
        f"{label_a} vs {label_b} over {n} records: "
        f"win_a={row['win_a']:.2f}% win_b={row['win_b']:.2f}% ties={row['ties']:.2f}%"
    )
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        print(f"error: run directory not found: {run_dir}", file=sys.stderr)
        return 1
    manifest = store.read_manifest(run_dir)
    agg_path = run_dir / "aggregate.csv"
    eval_path = run_dir / "eqgeval.csv"
    if manifest is None and not agg_path.exists() and not eval_path.exists():
        print(f"error: nothing to report in {run_dir}", file=sys.stderr)
        return 1
    out_dir = Path(args.out) if args.out else run_dir

    lines = ["# Run summary", ""]
    plot_rows: list[tuple[str, str, float]] = []
    for title, path in (("Generation metrics", agg_path), ("Judged metrics", eval_path)):
        if not path.exists():
            continue
        lines.append(f"## {title}")
        lines.append("")
        content = path.read_text(encoding="utf-8").strip().splitlines()
        header = content[0].split(",")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for data_line in content[1:]:
            cells = data_line.split(",")
            lines.append("| " + " | ".join(cells) + " |")
            for name, cell in zip(header[1:], cells[1:]):
                if cell:
                    try:
                        plot_rows.append((cells[0], name, float(cell)))
                    except ValueError:
                        pass
        lines.append("")
    totals = (manifest or {}).get("totals", {})
    if totals:
        lines.append("## Cost")
        lines.append("")
        n = max(1, int(totals.get("records", 1)))
        cost = float(totals.get("total_cost", 0.0))
        lines.append(f"- oracle calls: {totals.get('oracle_calls', 'n/a')}")
        lines.append(f"- total cost: {cost:.6f}")
        lines.append(f"- cost per question: {cost / n:.6f}")
        if "cache_hit_ratio" in totals:
            lines.append(f"- cache hit ratio: {float(totals['cache_hit_ratio']):.2%}")
        lines.append("")
    summary_md = out_dir / "summary.md"
    summary_md.parent.mkdir(parents=True, exist_ok=True)
    summary_md.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if plot_rows:
        with (out_dir / "plot_data.csv").open("w", encoding="utf-8", newline="") as fh:
            fh.write("method,metric,value\n")
            for method, metric, value in plot_rows:
                fh.write(f"{method},{metric},{value:.4f}\n")
    print(summary_md.read_text(encoding="utf-8"))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    return apply_flag_overrides(
        config,
        mode=args.mode,
        model=args.model,
        mock_script=args.mock_script,
        seed=args.seed,
        bon_n=getattr(args, "bon_n", None),
        concurrency=getattr(args, "concurrency", None),
    )


def _add_shared_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--mock-script", dest="mock_script", help="scripted mock oracle (JSON fingerprint map)")
    parser.add_argument("--seed", type=int, help="seed for splits and tie-breaking")
    parser.add_argument("--mode", choices=("eqpr", "greedy", "direct", "cot", "cot_bon"))
    parser.add_argument("--model", help="model identifier sent to the backend")
    parser.add_argument("--out", help="output directory for artifacts")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eduqgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate one question from an objectives file")
    p.add_argument("objectives_file")
    p.add_argument("--n", type=int, dest="bon_n", help="samples for cot_bon")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("batch", help="generate questions for every dataset record")
    p.add_argument("dataset")
    p.add_argument("--limit", type=int, help="process at most N records")
    p.add_argument("--test-split", type=float, dest="test_split", help="use only this test fraction")
    p.add_argument("--concurrency", type=int, help="max in-flight records")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("evaluate", help="judge generated questions against a dataset")
    p.add_argument("results_dir")
    p.add_argument("dataset")
    p.add_argument("--concurrency", type=int)
    _add_shared_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="pairwise win-rate between two results directories")
    p.add_argument("results_a")
    p.add_argument("results_b")
    p.add_argument("dataset")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, store.StoreError, EmptyReport) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
