"""CSV ingestion: one example per row with columns groups, label and optionally point_prediction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator

from ..core import Example


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class StreamRow:
    example: Example
    point_prediction: float | None = None


def _unit(text: str, what: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise StreamError(f"line {line}: {what} {text!r} is not a number") from None
    if not (math.isfinite(v) and 0.0 <= v <= 1.0):
        raise StreamError(f"line {line}: {what} {v} outside [0, 1]")
    return v


def read_rows(path) -> Iterator[StreamRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"groups", "label"} <= set(reader.fieldnames):
            raise StreamError(f"{path}: header must contain 'groups' and 'label'")
        has_fx = "point_prediction" in reader.fieldnames
        for rec in reader:
            line = reader.line_num
            raw = (rec.get("groups") or "").strip()
            try:
                ids = sorted({int(tok) for tok in raw.split(";") if tok.strip()})
            except ValueError:
                raise StreamError(f"line {line}: bad group list {raw!r}") from None
            if any(g < 0 for g in ids):
                raise StreamError(f"line {line}: negative group id")
            if rec.get("label") in (None, ""):
                raise StreamError(f"line {line}: missing label")
            y = _unit(rec["label"], "label", line)
            fx = None
            if has_fx and rec.get("point_prediction") not in (None, ""):
                fx = _unit(rec["point_prediction"], "point_prediction", line)
            yield StreamRow(Example(tuple(ids), label=y), fx)


def load_stream(path) -> Iterator[Example]:
    for row in read_rows(path):
        yield row.example


def write_stream(path, examples, point_predictions=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["groups", "label"] + (["point_prediction"] if point_predictions is not None else []))
        for t, ex in enumerate(examples):
            row = [";".join(str(g) for g in ex.group_ids), repr(ex.label)]
            if point_predictions is not None:
                row.append(repr(point_predictions[t]))
            writer.writerow(row)
