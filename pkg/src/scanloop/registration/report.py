"""One JSON-lines record per registered pair."""

from pathlib import Path
from typing import Any

from scanloop.common.jsonl import append_jsonl
from scanloop.registration.metrics import MatchQualityReport, RegistrationMetrics
from scanloop.registration.solvers import RegistrationResult


def registration_record(
    pair_id: str | int,
    result: RegistrationResult,
    metrics: RegistrationMetrics | None = None,
    quality: MatchQualityReport | None = None,
    config: dict[str, Any] | None = None,
) -> dict[str, Any]:
    record: dict[str, Any] = {"pair": pair_id, **result.as_dict()}
    if metrics is not None:
        record["metrics"] = metrics.as_dict()
    if quality is not None:
        record["match_quality"] = quality.as_dict()
    if config is not None:
        record["config"] = config
    return record


def export_result(path: str | Path, record: dict[str, Any]) -> None:
    append_jsonl(path, record)
