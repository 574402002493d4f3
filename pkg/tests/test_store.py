from __future__ import annotations

import json
import math

import pytest

from eduqgen.store import (
    AllRecordsInvalid,
    FileUnreadable,
    IngestReport,
    ModelPrice,
    PriceTable,
    ResponseCache,
    UnknownModelPrice,
    UsageMeter,
    completed_record_ids,
    ingest_dataset,
    read_manifest,
    record_usage,
    sample_dataset_path,
    split_test,
    write_json,
    write_manifest,
)


def _write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    return path


def _record(i: int, concepts=("Sets",), context=None):
    objectives = {"concepts": list(concepts), "bloom_level": "Apply"}
    if context:
        objectives["context"] = context
    return {"id": f"r{i}", "gold_question": f"Question {i}?", "objectives": objectives}


def test_ingest_partial_tolerance(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text(
        json.dumps(_record(1)) + "\n" + "{broken json\n" + json.dumps(_record(2)) + "\n",
        encoding="utf-8",
    )
    records, report = ingest_dataset(path)
    assert [r.id for r in records] == ["r1", "r2"]
    assert report.n_records == 2
    assert report.n_errors == 1
    assert report.errors[0][0] == 2


def test_ingest_sq_mode_rejects_contextual(tmp_path):
    path = _write_jsonl(
        tmp_path / "data.jsonl",
        [_record(1), _record(2, context="A tree-planting day at school")],
    )
    records, report = ingest_dataset(path, require_mode="sq")
    assert [r.id for r in records] == ["r1"]
    assert report.n_errors == 1
    records_cq, report_cq = ingest_dataset(path, require_mode="cq")
    assert [r.id for r in records_cq] == ["r2"]


def test_ingest_duplicate_ids_flagged(tmp_path):
    path = _write_jsonl(tmp_path / "data.jsonl", [_record(1), _record(1)])
    records, report = ingest_dataset(path)
    assert len(records) == 1
    assert report.n_errors == 1


def test_ingest_missing_file():
    with pytest.raises(FileUnreadable):
        ingest_dataset("/nonexistent/nope.jsonl")


def test_ingest_all_invalid(tmp_path):
    path = (tmp_path / "bad.jsonl")
    path.write_text("{}\nnot json\n", encoding="utf-8")
    with pytest.raises(AllRecordsInvalid):
        ingest_dataset(path)


def test_ingest_mean_concepts_hand_count(tmp_path):
    rows = [
        _record(1, concepts=("a", "b", "c")),
        _record(2, concepts=("a", "b", "c", "d")),
        _record(3, concepts=("a",)),
        _record(4, concepts=("a", "b")),
    ]
    _, report = ingest_dataset(_write_jsonl(tmp_path / "d.jsonl", rows))
    assert report.mean_concepts == pytest.approx(2.5)


def test_bundled_sample_dataset_stats():
    records, report = ingest_dataset(sample_dataset_path())
    assert report.n_records == 10
    assert report.n_errors == 0
    assert report.mean_concepts == pytest.approx(2.5)
    contextual = [r for r in records if r.objectives.is_contextual]
    assert len(contextual) == 5
    assert not report.warnings


def test_ingest_warns_on_empty_quality(tmp_path):
    row = _record(1)
    row["objectives"].pop("core_quality", None)
    _, report = ingest_dataset(_write_jsonl(tmp_path / "d.jsonl", [row]))
    assert any("core_quality" in w for w in report.warnings)


def test_ingest_deterministic(tmp_path):
    path = _write_jsonl(tmp_path / "d.jsonl", [_record(i) for i in range(5)])
    first, _ = ingest_dataset(path)
    second, _ = ingest_dataset(path)
    assert first == second


# ---------------------------------------------------------------------------
# splits


def _records(n):
    from eduqgen.store import record_from_dict

    return [record_from_dict(_record(i)) for i in range(n)]


def test_split_sizes():
    train, test = split_test(_records(100), 0.10, seed=1)
    assert len(test) == 10
    assert len(train) == 90


def test_split_ceil():
    train, test = split_test(_records(1034), 0.10, seed=1)
    assert len(test) == 104
    assert len(train) == 930


def test_split_deterministic():
    records = _records(30)
    first = split_test(records, 0.2, seed=7)
    second = split_test(records, 0.2, seed=7)
    assert first == second
    different = split_test(records, 0.2, seed=8)
    assert first != different


def test_split_partitions():
    records = _records(25)
    train, test = split_test(records, 0.3, seed=3)
    assert sorted(r.id for r in train + test) == sorted(r.id for r in records)


# ---------------------------------------------------------------------------
# pricing


def _prices() -> PriceTable:
    return PriceTable.from_dict({"m": {"prompt_per_1m": 0.15, "completion_per_1m": 0.60}})


def test_record_usage_arithmetic():
    assert record_usage("m", 1000, 500, _prices()) == pytest.approx(0.00045)
    assert record_usage("m", 0, 0, _prices()) == 0.0


def test_record_usage_unknown_model():
    with pytest.raises(UnknownModelPrice):
        record_usage("other", 10, 10, _prices())


def test_price_validation():
    with pytest.raises(ValueError):
        ModelPrice(-1.0, 0.5)


def test_meter_accumulates_and_ignores_cached(tmp_path):
    from eduqgen.oracles import OracleResponse

    meter = UsageMeter(_prices())
    meter.record("m", OracleResponse(text="x", prompt_tokens=1000, completion_tokens=500))
    meter.record("m", OracleResponse(text="x", prompt_tokens=999, completion_tokens=999, from_cache=True))
    assert meter.call_count == 2
    assert meter.cache_hits == 1
    assert meter.total_cost == pytest.approx(0.00045)


def test_meter_cost_monotone():
    from eduqgen.oracles import OracleResponse

    meter = UsageMeter(_prices())
    last = 0.0
    total = 0.0
    for i in range(10):
        cost = meter.record("m", OracleResponse(text="x", prompt_tokens=10 * i, completion_tokens=i))
        total += cost
        assert meter.total_cost >= last
        last = meter.total_cost
    assert meter.total_cost == pytest.approx(total)


# ---------------------------------------------------------------------------
# cache and manifests


def test_cache_hit_ratio(tmp_path):
    cache = ResponseCache(tmp_path / "c.jsonl")
    cache.put("k", "req", "text", 1, 2)
    assert cache.get("k", "req") is not None
    assert cache.get("missing", "req") is None
    assert cache.hits == 1 and cache.misses == 1
    assert cache.hit_ratio == pytest.approx(0.5)


def test_manifest_lists_digests(tmp_path):
    write_json(tmp_path / "records" / "r1.json", {"record_id": "r1", "question_text": "Q"})
    manifest_path = write_manifest(tmp_path, extra={"totals": {"records": 1}})
    manifest = read_manifest(tmp_path)
    assert manifest_path.name == "manifest.json"
    assert manifest["totals"] == {"records": 1}
    assert manifest["artifacts"][0]["path"] == "records/r1.json"
    digest = manifest["artifacts"][0]["sha256"]

    write_json(tmp_path / "records" / "r1.json", {"record_id": "r1", "question_text": "changed"})
    write_manifest(tmp_path)
    assert read_manifest(tmp_path)["artifacts"][0]["sha256"] != digest


def test_completed_record_ids(tmp_path):
    write_json(tmp_path / "records" / "r1.json", {"record_id": "r1"})
    write_json(tmp_path / "records" / "r2.json", {"record_id": "r2"})
    (tmp_path / "records" / "broken.json").write_text("{oops", encoding="utf-8")
    assert completed_record_ids(tmp_path) == {"r1", "r2"}


def test_persist_and_reload_roundtrip(tmp_path):
    from eduqgen.store import persist_run

    payload = {"verdicts": [1, 0, 1], "mode": "eqpr"}
    persist_run(payload, tmp_path / "run")
    reloaded = json.loads((tmp_path / "run" / "result.json").read_text(encoding="utf-8"))
    assert reloaded == payload
    assert read_manifest(tmp_path / "run") is not None
