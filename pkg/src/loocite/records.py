"""JSON-lines datasets and result streams."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .context import ContextPartition, Example, PartitionError


class DatasetError(ValueError):
    pass


class DuplicateSourceWarning(UserWarning):
    pass


def parse_record(obj: Any, where: str = "record") -> Example:
    if not isinstance(obj, dict):
        raise DatasetError(f"{where}: expected a JSON object")
    for key in ("id", "query", "context"):
        if key not in obj:
            raise DatasetError(f"{where}: missing field {key!r}")
    ctx = obj["context"]
    if not isinstance(ctx, list) or not ctx or not all(isinstance(g, list) for g in ctx):
        raise DatasetError(f"{where}: context must be a non-empty list of source lists")
    if not all(isinstance(s, str) for g in ctx for s in g):
        raise DatasetError(f"{where}: sources must be strings")
    response = obj.get("response")
    if response is not None and not isinstance(response, str):
        raise DatasetError(f"{where}: response must be a string")
    try:
        partition = ContextPartition.from_lists(ctx)
    except PartitionError as e:
        raise DatasetError(f"{where}: {e}") from None
    return Example(str(obj["id"]), str(obj["query"]), partition, response)


def load_dataset(path: str | Path) -> list[Example]:
    """Read one example per line, validating each and warning about repeated sources."""
    examples: list[Example] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{where}: malformed JSON ({e.msg})") from None
            ex = parse_record(obj, where)
            if ex.id in seen_ids:
                raise DatasetError(f"{where}: duplicate example id {ex.id!r}")
            seen_ids.add(ex.id)
            sources = ex.partition.sources
            if len(set(sources)) != len(sources):
                warnings.warn(f"{where}: example {ex.id!r} repeats a source; consider deduplicating",
                              DuplicateSourceWarning, stacklevel=2)
            examples.append(ex)
    return examples


def example_to_record(ex: Example) -> dict:
    d = {"id": ex.id, "query": ex.query, "context": [list(g.sources) for g in ex.partition.groups]}
    if ex.response is not None:
        d["response"] = ex.response
    return d


@dataclass
class RunResult:
    id: str
    method: str
    params: dict
    scores: list[float]
    cost: dict
    counted_flops: float
    theoretical_flops: float | None = None
    outliers: list[int] | None = None
    response: str = ""
    response_tokens: list[int] = field(default_factory=list)
    seed: int = 0
    models: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(**d)


def dumps_result(r: RunResult) -> str:
    return json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False, allow_nan=False)


def write_results(path: str | Path, results: Iterable[RunResult]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            fh.write(dumps_result(r) + "\n")


def read_results(path: str | Path) -> list[RunResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(RunResult.from_dict(json.loads(line)))
                except (json.JSONDecodeError, TypeError) as e:
                    raise DatasetError(f"{path}:{lineno}: bad result line ({e})") from None
    return out
