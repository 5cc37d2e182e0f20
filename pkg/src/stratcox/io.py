"""CSV readers and writers, and the text formats for fitted models and
normalization references.

Floats are written with ``repr`` so every value round-trips bit-exactly.
All writes go to a temporary file in the target directory that is then
renamed over the destination.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    BatchLayout,
    Dataset,
    ExpressionMatrix,
    FittedModel,
    SparseCoefficients,
    SurvivalRecord,
    validate_dataset,
)
from .errors import ModelFormatError, ValidationError
from .normalize import NormalizationReference

MODEL_HEADER = "stratcox-model v1"
REFERENCE_HEADER = "stratcox-reference v1"
CLINICAL_COLUMNS = ("sample_id", "time", "status", "batch")


class CSVFormatError(ValidationError):
    """Malformed CSV input; the message carries the file and line number."""


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def fmt(x) -> str:
    """Shortest round-tripping text for a number; integers stay integral."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def _rows(path) -> list[list[str]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.reader(fh))
    except FileNotFoundError:
        raise CSVFormatError(f"{path}: file not found") from None
    except (UnicodeDecodeError, csv.Error) as exc:
        raise CSVFormatError(f"{path}: unreadable CSV ({exc})") from None


def _float(text: str, where: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise CSVFormatError(f"{where}: {text!r} is not a number") from None
    if not math.isfinite(value):
        raise CSVFormatError(f"{where}: non-finite value {text!r}")
    return value


def read_expression(path) -> ExpressionMatrix:
    """Header ``sample_id,<feature_1>,...``; one row per sample."""
    rows = _rows(path)
    if not rows:
        raise CSVFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0] != "sample_id":
        raise CSVFormatError(f"{path}:1: header must start with 'sample_id' followed by feature ids")
    features = header[1:]
    ids, values = [], []
    for line, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise CSVFormatError(f"{path}:{line}: expected {len(header)} fields, found {len(row)}")
        ids.append(row[0].strip())
        values.append([_float(c, f"{path}:{line}") for c in row[1:]])
    if not ids:
        raise CSVFormatError(f"{path}: no sample rows")
    try:
        return ExpressionMatrix(np.array(values, dtype=float), tuple(ids), tuple(features))
    except ValidationError as exc:
        raise CSVFormatError(f"{path}: {exc}") from None


def read_clinical(path) -> tuple[dict[str, SurvivalRecord], BatchLayout]:
    """Header ``sample_id,time,status,batch[,slide]``."""
    rows = _rows(path)
    if not rows:
        raise CSVFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if tuple(header[:4]) != CLINICAL_COLUMNS or len(header) > 5 or (len(header) == 5 and header[4] != "slide"):
        raise CSVFormatError(f"{path}:1: header must be sample_id,time,status,batch[,slide]")
    has_slide = len(header) == 5
    survival: dict[str, SurvivalRecord] = {}
    batch_of: dict[str, str] = {}
    slide_of: dict[str, str] | None = {} if has_slide else None
    for line, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        where = f"{path}:{line}"
        if len(row) != len(header):
            raise CSVFormatError(f"{where}: expected {len(header)} fields, found {len(row)}")
        sid = row[0].strip()
        if sid in survival:
            raise CSVFormatError(f"{where}: duplicate sample id {sid!r}")
        time = _float(row[1], where)
        status = row[2].strip()
        if status not in ("0", "1"):
            raise CSVFormatError(f"{where}: status must be 0 or 1, got {status!r}")
        survival[sid] = SurvivalRecord(time, int(status))
        batch_of[sid] = row[3].strip()
        if slide_of is not None:
            slide_of[sid] = row[4].strip()
    if not survival:
        raise CSVFormatError(f"{path}: no sample rows")
    return survival, BatchLayout(batch_of, slide_of)


def load_dataset(expression_path, clinical_path) -> Dataset:
    expr = read_expression(expression_path)
    survival, layout = read_clinical(clinical_path)
    return validate_dataset(expr, survival, layout)


def expression_csv(expr: ExpressionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("sample_id", *expr.feature_ids))
    for sid, row in zip(expr.sample_ids, expr.values):
        w.writerow((sid, *(fmt(v) for v in row)))
    return buf.getvalue()


def write_expression(path, expr: ExpressionMatrix) -> None:
    atomic_write_text(path, expression_csv(expr))


def clinical_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CLINICAL_COLUMNS + (("slide",) if dataset.slide is not None else ()))
    for i, sid in enumerate(dataset.sample_ids):
        row = [sid, fmt(float(dataset.time[i])), int(dataset.event[i]), dataset.batch[i]]
        if dataset.slide is not None:
            row.append(dataset.slide[i])
        w.writerow(row)
    return buf.getvalue()


def table_csv(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (float, int, np.floating, np.integer)) else v for v in row])
    return buf.getvalue()


def write_table(path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_text(path, table_csv(columns, rows))


def read_table(path) -> list[dict[str, str]]:
    rows = _rows(path)
    if not rows:
        raise CSVFormatError(f"{path}: empty file")
    header = rows[0]
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CSVFormatError(f"{path}:{line}: expected {len(header)} fields, found {len(row)}")
        out.append(dict(zip(header, row)))
    return out


def read_signal(path) -> SparseCoefficients:
    """Two-column CSV ``feature,coefficient`` naming the true signal."""
    rows = _rows(path)
    if not rows or [h.strip() for h in rows[0]] != ["feature", "coefficient"]:
        raise CSVFormatError(f"{path}:1: header must be feature,coefficient")
    entries = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise CSVFormatError(f"{path}:{line}: expected 2 fields, found {len(row)}")
        entries.append((row[0].strip(), _float(row[1], f"{path}:{line}")))
    try:
        return SparseCoefficients(tuple(entries))
    except ValidationError as exc:
        raise CSVFormatError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# key = value text formats


def _reference_lines(ref: NormalizationReference, prefix: str = "") -> list[str]:
    lines = [f"{prefix}kind = {ref.kind}"]
    if ref.kind == "median":
        lines.append(f"{prefix}reference_median = {fmt(ref.reference_median)}")
    return lines


def _quantile_block(ref: NormalizationReference | None) -> list[str]:
    if ref is None or ref.kind != "quantile":
        return []
    return ["[reference_quantiles]", *(fmt(q) for q in ref.reference_quantiles)]


def reference_text(ref: NormalizationReference) -> str:
    return "\n".join([REFERENCE_HEADER, *_reference_lines(ref), *_quantile_block(ref)]) + "\n"


def write_reference(path, ref: NormalizationReference) -> None:
    atomic_write_text(path, reference_text(ref))


def _parse_sections(text: str, header: str, path) -> tuple[dict[str, str], dict[str, list[str]]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != header:
        raise ModelFormatError(f"{path}:1: expected header line {header!r}")
    keys: dict[str, str] = {}
    sections: dict[str, list[str]] = {}
    current = None
    for no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current in sections:
                raise ModelFormatError(f"{path}:{no}: duplicate section [{current}]")
            sections[current] = []
        elif current is not None:
            sections[current].append(raw)
        else:
            key, sep, value = line.partition(" = ")
            if not sep:
                raise ModelFormatError(f"{path}:{no}: expected 'key = value', got {line!r}")
            if key in keys:
                raise ModelFormatError(f"{path}:{no}: duplicate key {key!r}")
            keys[key] = value
    return keys, sections


def _number(text: str, what: str, path) -> float:
    try:
        # integral text stays int so a parsed model re-serializes unchanged
        return int(text) if text.lstrip("-").isdigit() else float(text)
    except ValueError:
        raise ModelFormatError(f"{path}: {what} is not a number: {text!r}") from None


def _reference_from(keys: dict[str, str], sections, prefix: str, path) -> NormalizationReference | None:
    kind = keys.get(f"{prefix}kind")
    if kind is None:
        return None
    try:
        if kind == "median":
            return NormalizationReference("median", reference_median=_number(
                keys.get(f"{prefix}reference_median", ""), "reference_median", path))
        q = [_number(v.strip(), "reference quantile", path) for v in sections.get("reference_quantiles", [])]
        return NormalizationReference(kind, reference_quantiles=np.array(q))
    except ValidationError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None


def read_reference(path) -> NormalizationReference:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ModelFormatError(f"{path}: file not found") from None
    keys, sections = _parse_sections(text, REFERENCE_HEADER, path)
    ref = _reference_from(keys, sections, "", path)
    if ref is None:
        raise ModelFormatError(f"{path}: missing 'kind'")
    return ref


def model_text(model: FittedModel) -> str:
    lines = [
        MODEL_HEADER,
        f"method = {model.method}",
        f"stratum_level = {model.stratum_level}",
        f"seed = {'none' if model.seed is None else int(model.seed)}",
    ]
    lines += [f"tuning.{k} = {fmt(v)}" for k, v in sorted(model.tuning.items())]
    lines += [f"summary.{k} = {fmt(v)}" for k, v in sorted(model.training_summary.items())]
    ref = model.preprocessing.get("normalization")
    for k, v in sorted(model.preprocessing.items()):
        if k != "normalization":
            lines.append(f"preprocessing.{k} = {v}")
    if ref is not None:
        lines += _reference_lines(ref, "normalization.")
    lines += _quantile_block(ref)
    lines.append("[coefficients]")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("feature", "coefficient"))
    for f, b in model.coefficients.entries:
        w.writerow((f, fmt(b)))
    return "\n".join(lines) + "\n" + buf.getvalue()


def write_model(path, model: FittedModel) -> None:
    atomic_write_text(path, model_text(model))


def parse_model(text: str, path="<model>") -> FittedModel:
    keys, sections = _parse_sections(text, MODEL_HEADER, path)
    for required in ("method", "stratum_level"):
        if required not in keys:
            raise ModelFormatError(f"{path}: missing key {required!r}")
    if "coefficients" not in sections:
        raise ModelFormatError(f"{path}: missing [coefficients] section")
    rows = list(csv.reader(sections["coefficients"]))
    if not rows or rows[0] != ["feature", "coefficient"]:
        raise ModelFormatError(f"{path}: coefficient table must start with 'feature,coefficient'")
    entries = []
    for row in rows[1:]:
        if len(row) != 2:
            raise ModelFormatError(f"{path}: malformed coefficient row {row!r}")
        entries.append((row[0], _number(row[1], f"coefficient of {row[0]!r}", path)))
    seed_text = keys.get("seed", "none")
    seed = None if seed_text == "none" else int(_number(seed_text, "seed", path))
    tuning = {k[7:]: _number(v, k, path) for k, v in keys.items() if k.startswith("tuning.")}
    summary = {k[8:]: _number(v, k, path) for k, v in keys.items() if k.startswith("summary.")}
    pre: dict = {k[14:]: v for k, v in keys.items() if k.startswith("preprocessing.")}
    ref = _reference_from(keys, sections, "normalization.", path)
    if ref is not None:
        pre["normalization"] = ref
    try:
        return FittedModel(
            SparseCoefficients(tuple(entries)), keys["method"], keys["stratum_level"],
            tuning, summary, seed, pre,
        )
    except (ValueError, ValidationError) as exc:
        raise ModelFormatError(f"{path}: {exc}") from None


def read_model(path) -> FittedModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ModelFormatError(f"{path}: file not found") from None
    return parse_model(text, path)
