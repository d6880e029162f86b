"""On-disk dataset format, quality gating and subject-aware cross-validation splits.

A dataset directory holds ``manifest.jsonl`` (one record per line),
``signals/<record_id>.f32le`` (raw little-endian float32 samples) and an
optional ``schema.json`` with the dataset name and task schema.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import HR_MAX_BPM, HR_MIN_BPM, detect_r_peaks, heart_rate_bpm

logger = logging.getLogger(__name__)

TASK_KINDS = ("classification", "multilabel", "regression")


class ManifestError(ValueError):
    pass


@dataclass
class EcgRecord:
    record_id: str
    subject_id: str
    sampling_rate_hz: float
    samples: np.ndarray
    labels: dict = field(default_factory=dict)
    session_tag: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if not self.sampling_rate_hz > 0:
            raise ManifestError(f"record {self.record_id!r}: sampling_rate_hz must be > 0")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ManifestError(f"record {self.record_id!r}: samples must be a non-empty 1-D series")


@dataclass
class DatasetManifest:
    dataset_name: str
    records: list[EcgRecord]
    task_schema: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for i, rec in enumerate(self.records):
            if rec.record_id in seen:
                raise ManifestError(f"record {i}: duplicate record_id {rec.record_id!r}")
            seen.add(rec.record_id)
        for task, spec in self.task_schema.items():
            if spec.get("kind") not in TASK_KINDS:
                raise ManifestError(f"task {task!r}: kind must be one of {TASK_KINDS}")
        missing = {k for rec in self.records for k in rec.labels} - set(self.task_schema)
        if missing:
            raise ManifestError(f"task_schema does not cover label keys {sorted(missing)}")

    @property
    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def by_id(self) -> dict[str, EcgRecord]:
        return {r.record_id: r for r in self.records}


def infer_task_schema(records) -> dict:
    """Integer-valued labels become classification tasks, the rest regression."""
    values: dict[str, list] = {}
    for rec in records:
        for k, v in rec.labels.items():
            values.setdefault(k, []).append(v)
    schema = {}
    for k, vs in values.items():
        if all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in vs):
            schema[k] = {"kind": "classification", "cardinality": int(max(vs)) + 1}
        elif all(isinstance(v, list) for v in vs):
            schema[k] = {"kind": "multilabel", "cardinality": len(vs[0])}
        else:
            arr = np.asarray(vs, dtype=float)
            schema[k] = {"kind": "regression", "range": [float(arr.min()), float(arr.max())]}
    return schema


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    (path / "signals").mkdir(parents=True, exist_ok=True)
    with open(path / "manifest.jsonl", "w") as fh:
        for rec in manifest.records:
            rel = f"signals/{rec.record_id}.f32le"
            rec.samples.astype("<f4").tofile(path / rel)
            entry = {
                "record_id": rec.record_id,
                "subject_id": rec.subject_id,
                "sampling_rate_hz": rec.sampling_rate_hz,
                "signal": rel,
            }
            if rec.labels:
                entry["labels"] = rec.labels
            if rec.session_tag is not None:
                entry["session_tag"] = rec.session_tag
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    with open(path / "schema.json", "w") as fh:
        json.dump({"dataset_name": manifest.dataset_name, "task_schema": manifest.task_schema},
                  fh, indent=2, sort_keys=True)
    return path


def load_manifest(path) -> DatasetManifest:
    """Read and validate a dataset directory; errors name the offending line."""
    path = Path(path)
    mfile = path / "manifest.jsonl"
    if not mfile.is_file():
        raise ManifestError(f"missing manifest file {mfile}")
    records = []
    seen = set()
    with open(mfile) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                rid = str(entry["record_id"])
                subject = str(entry["subject_id"])
                rate = float(entry["sampling_rate_hz"])
                rel = entry["signal"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"record {i}: malformed manifest line ({exc})") from exc
            if rid in seen:
                raise ManifestError(f"record {i}: duplicate record_id {rid!r}")
            seen.add(rid)
            if not rate > 0:
                raise ManifestError(f"record {i} ({rid!r}): sampling_rate_hz must be > 0, got {rate}")
            sfile = path / rel
            if not sfile.is_file():
                raise ManifestError(f"record {i} ({rid!r}): missing signal file {sfile}")
            samples = np.fromfile(sfile, dtype="<f4")
            if samples.size == 0:
                raise ManifestError(f"record {i} ({rid!r}): empty signal file {sfile}")
            records.append(EcgRecord(rid, subject, rate, samples,
                                     labels=entry.get("labels") or {},
                                     session_tag=entry.get("session_tag")))
    sfile = path / "schema.json"
    if sfile.is_file():
        meta = json.loads(sfile.read_text())
        name, schema = meta.get("dataset_name", path.name), meta.get("task_schema", {})
    else:
        name, schema = path.name, infer_task_schema(records)
    return DatasetManifest(name, records, schema)


def import_csv(csv_path, out_dir, record_id: str, subject_id: str, sampling_rate_hz: float,
               labels: dict | None = None, session_tag: str | None = None) -> DatasetManifest:
    """Convert a one-sample-per-line CSV export into a dataset directory.

    Appends to an existing manifest in ``out_dir`` if there is one.
    """
    samples = np.loadtxt(csv_path, delimiter=",", ndmin=1, dtype=np.float64)
    if samples.ndim != 1:
        raise ManifestError(f"{csv_path}: expected one sample per line")
    rec = EcgRecord(record_id, subject_id, sampling_rate_hz, samples, labels or {}, session_tag)
    out_dir = Path(out_dir)
    if (out_dir / "manifest.jsonl").is_file():
        existing = load_manifest(out_dir)
        records = existing.records + [rec]
        name = existing.dataset_name
    else:
        records, name = [rec], out_dir.name
    manifest = DatasetManifest(name, records, infer_task_schema(records))
    save_manifest(manifest, out_dir)
    return manifest


# -- quality gate --------------------------------------------------------------


def record_passes(rec: EcgRecord) -> bool:
    """At least two R-peaks and a mean heart rate inside [40, 210] bpm."""
    x = rec.samples.astype(np.float64)
    if rec.sampling_rate_hz < 50 or len(x) < 2 * rec.sampling_rate_hz:
        return False
    peaks = detect_r_peaks(x, rec.sampling_rate_hz)
    if len(peaks) < 2:
        return False
    return HR_MIN_BPM <= heart_rate_bpm(peaks, rec.sampling_rate_hz) <= HR_MAX_BPM


def quality_gate(records, threshold: float = 0.9):
    """Drop whole sessions whose passing fraction is below ``threshold``.

    Records are grouped by ``(subject_id, session_tag)``; untagged records are
    judged one by one. Sessions that clear the threshold are kept intact.

    Returns:
        ``(kept, dropped)`` lists, each in input order.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    records = list(records)
    passed = [record_passes(r) for r in records]
    groups: dict[tuple, list[int]] = {}
    for i, rec in enumerate(records):
        key = (rec.subject_id, rec.session_tag) if rec.session_tag is not None else ("", i)
        groups.setdefault(key, []).append(i)
    keep = [False] * len(records)
    for key, idx in groups.items():
        frac = sum(passed[i] for i in idx) / len(idx)
        ok = frac >= threshold
        for i in idx:
            keep[i] = ok
        if not ok and key[0] != "":
            logger.info("dropping session %s/%s: detection rate %.2f", key[0], key[1], frac)
    kept = [r for r, k in zip(records, keep) if k]
    dropped = [r for r, k in zip(records, keep) if not k]
    return kept, dropped


# -- splits --------------------------------------------------------------------


@dataclass
class Fold:
    train: list[str]
    validation: list[str]
    test: list[str]


@dataclass
class SplitPlan:
    mode: str
    folds: list[Fold]
    seed: int

    def to_dict(self) -> dict:
        return {"mode": self.mode, "seed": self.seed,
                "folds": [{"train": f.train, "validation": f.validation, "test": f.test}
                          for f in self.folds]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(d["mode"], [Fold(f["train"], f["validation"], f["test"]) for f in d["folds"]],
                   d["seed"])


def _chunks(items: list, k: int) -> list[list]:
    """k contiguous chunks; the first ``len % k`` chunks get one extra item."""
    base, extra = divmod(len(items), k)
    out, start = [], 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        out.append(items[start:start + size])
        start += size
    return out


def make_splits(manifest: DatasetManifest, mode: str = "subject-agnostic", k: int = 5,
                seed: int = 0, val_fraction: float = 0.2) -> SplitPlan:
    """k-fold plan; validation is carved from each fold's training units."""
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    if mode == "subject-agnostic":
        units = manifest.subjects
        if len(units) < k:
            raise ValueError(f"{len(units)} subjects cannot fill {k} subject-agnostic folds")
        members: dict[str, list[str]] = {}
        for rec in manifest.records:
            members.setdefault(rec.subject_id, []).append(rec.record_id)
    elif mode == "mixed-subject":
        units = [r.record_id for r in manifest.records]
        if len(units) < k:
            raise ValueError(f"{len(units)} records cannot fill {k} folds")
        members = {u: [u] for u in units}
    else:
        raise ValueError(f"unknown split mode {mode!r}")

    order = [units[i] for i in rng.permutation(len(units))]
    chunks = _chunks(order, k)
    folds = []
    for f in range(k):
        test_units = chunks[f]
        train_units = [u for g, c in enumerate(chunks) if g != f for u in c]
        train_units = [train_units[i] for i in rng.permutation(len(train_units))]
        n_val = int(round(val_fraction * len(train_units))) if len(train_units) >= 2 else 0
        n_val = max(n_val, 1) if len(train_units) >= 2 else 0
        val_units, train_units = train_units[:n_val], train_units[n_val:]

        def expand(us):
            return sorted(r for u in us for r in members[u])

        folds.append(Fold(expand(train_units), expand(val_units), expand(test_units)))
    return SplitPlan(mode, folds, seed)
