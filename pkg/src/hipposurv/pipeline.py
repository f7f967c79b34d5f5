"""File formats and dataset plumbing behind the command-line tool.

Manifest CSV columns::

    subject_id, left_path, right_path, label, time_months, event,
    age, sex, education, apoe4, adas13, ravlt_immediate, ravlt_learning,
    faq, mmse, csf_abeta42, suvr

Volume paths are resolved relative to the manifest's directory. Blank
cells mean missing. Numeric CSV output uses 9 significant digits.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, PreconditionError
from .records import CLINICAL_COLUMNS, LABELS, SubjectRecord
from .volume import read_volume, write_volume

MANIFEST_COLUMNS = ("subject_id", "left_path", "right_path", "label", "time_months", "event") + CLINICAL_COLUMNS


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return ""
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.9g}"
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty CSV")
        return list(reader.fieldnames), list(reader)


@dataclass
class ManifestRow:
    subject_id: str
    left_path: Path
    right_path: Path
    label: str
    time: float | None = None
    event: int | None = None
    clinical: dict = field(default_factory=dict)


def _opt_float(v, what):
    v = (v or "").strip()
    if not v:
        return None
    try:
        return float(v)
    except ValueError:
        raise FormatError(f"{what}: not a number: {v!r}") from None


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    header, raw = read_csv(path)
    missing = [c for c in MANIFEST_COLUMNS[:6] if c not in header]
    if missing:
        raise FormatError(f"{path}: manifest lacks columns {missing}")
    base = path.parent
    rows, seen = [], set()
    for lineno, r in enumerate(raw, start=2):
        where = f"{path}:{lineno}"
        sid = r["subject_id"].strip()
        if not sid:
            raise FormatError(f"{where}: empty subject_id")
        if sid in seen:
            raise FormatError(f"{where}: duplicate subject_id {sid!r}")
        seen.add(sid)
        label = r["label"].strip()
        if label not in LABELS:
            raise FormatError(f"{where}: label must be one of {LABELS}, got {label!r}")
        time = _opt_float(r["time_months"], where)
        event = _opt_float(r["event"], where)
        if event is not None and event not in (0.0, 1.0):
            raise FormatError(f"{where}: event must be 0 or 1")
        if label == "MCI" and (time is None or event is None):
            raise FormatError(f"{where}: MCI rows must carry time_months and event")
        clinical = {}
        for c in CLINICAL_COLUMNS:
            if c in r:
                val = _opt_float(r[c], f"{where} column {c}")
                if val is not None:
                    clinical[c] = val
        rows.append(ManifestRow(sid, base / r["left_path"].strip(), base / r["right_path"].strip(), label,
                                time, None if event is None else int(event), clinical))
    return rows


def write_manifest(records, path, volume_dir="volumes", write_volumes=True, survival_labels=("MCI",)) -> None:
    """Write ``records`` as VOL3 files plus a manifest.

    Time and event are only written for labels in ``survival_labels``.
    """
    path = Path(path)
    vdir = path.parent / volume_dir
    vdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        lp = f"{volume_dir}/{rec.subject_id}_L.vol3"
        rp = f"{volume_dir}/{rec.subject_id}_R.vol3"
        if write_volumes:
            write_volume(rec.left, path.parent / lp)
            write_volume(rec.right, path.parent / rp)
        surv = rec.label in survival_labels
        row = [rec.subject_id, lp, rp, rec.label, rec.time if surv else None, rec.event if surv else None]
        row += [rec.clinical.get(c) for c in CLINICAL_COLUMNS]
        rows.append(row)
    write_csv(path, MANIFEST_COLUMNS, rows)


def load_records(rows) -> list[SubjectRecord]:
    out = []
    for r in rows:
        for p in (r.left_path, r.right_path):
            if not os.path.exists(p):
                raise FormatError(f"volume file not found: {p}")
        out.append(SubjectRecord(r.subject_id, read_volume(r.left_path), read_volume(r.right_path),
                                 r.label, r.time, r.event, dict(r.clinical)))
    return out


def read_table(path, key="subject_id"):
    """Numeric CSV keyed by ``key``; returns ``(columns, {id: row_array})``."""
    header, raw = read_csv(path)
    if key not in header:
        raise FormatError(f"{path}: missing {key!r} column")
    cols = [c for c in header if c != key]
    table = {}
    for lineno, r in enumerate(raw, start=2):
        try:
            table[r[key]] = np.array([float(r[c]) if r[c] != "" else math.nan for c in cols])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return cols, table


def assemble_covariates(names, rows, sources):
    """Covariate matrix for ``rows`` with one column per name.

    ``sources`` maps a source label to ``(columns, table)`` pairs from
    :func:`read_table`; manifest clinical columns are always available.
    """
    X = np.empty((len(rows), len(names)))
    for i, r in enumerate(rows):
        for j, name in enumerate(names):
            val = None
            if name in CLINICAL_COLUMNS:
                val = r.clinical.get(name)
            else:
                for cols, table in sources.values():
                    if name in cols:
                        if r.subject_id not in table:
                            raise PreconditionError(f"subject {r.subject_id} missing from the table providing {name!r}")
                        val = table[r.subject_id][cols.index(name)]
                        break
                else:
                    raise PreconditionError(f"no input provides covariate {name!r}")
            if val is None or (isinstance(val, float) and math.isnan(val)):
                raise PreconditionError(f"subject {r.subject_id} is missing covariate {name!r}")
            X[i, j] = val
    return X


def survival_arrays(rows):
    bad = [r.subject_id for r in rows if r.time is None or r.event is None]
    if bad:
        raise PreconditionError(f"rows lack time/event: {bad[:5]}{'...' if len(bad) > 5 else ''}")
    return np.array([r.time for r in rows], dtype=float), np.array([r.event for r in rows], dtype=int)


def read_config(path) -> dict:
    """Flat ``key=value`` file; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise FormatError(f"{path}:{lineno}: expected key=value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out
