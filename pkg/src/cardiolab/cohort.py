"""Supervised dataset construction: labels, targets, tabular features, patient splits."""

from __future__ import annotations

import bisect
import csv
import hashlib
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AllMissingInTrain, DuplicateLabel, MalformedRow, TooFewPatients
from .ingestion import (
    RACES,
    VITAL_CHANNELS,
    EcgRecord,
    LabEvent,
    PatientContext,
    VitalSample,
)

MISSING = -1
CATEGORIES = ("Ca", "Re", "He", "Me", "Im", "Co")
THRESHOLD_COLUMNS = ("label_id", "item_id", "display_name", "direction", "threshold", "unit", "category")

# age, sex, race one-hot, six vitals, bmi, weight, height
FEATURE_NAMES = (
    ("age", "sex")
    + tuple(f"race_{r}" for r in RACES)
    + VITAL_CHANNELS
    + ("bmi", "weight_kg", "height_cm")
)
IMPUTED_FIELDS = ("age", "sex") + VITAL_CHANNELS + ("bmi", "weight_kg", "height_cm")
FLAG_NAMES = tuple(f"missing_{f}" for f in IMPUTED_FIELDS)
FEATURE_DIM = len(FEATURE_NAMES) + len(FLAG_NAMES)

FOLDS = ("train", "valid", "test")


class Direction(str, Enum):
    LOW = "LOW"
    HIGH = "HIGH"


class Mode(str, Enum):
    ESTIMATION = "ESTIMATION"
    MONITORING = "MONITORING"


@dataclass(frozen=True)
class AbnormalityLabel:
    label_id: str
    item_id: str
    display_name: str
    direction: Direction
    threshold: float
    unit: str
    category: str

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        if not math.isfinite(self.threshold):
            raise ValueError(f"{self.label_id}: threshold must be finite")
        if self.category not in CATEGORIES:
            raise ValueError(f"{self.label_id}: category must be one of {CATEGORIES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["direction"] = self.direction.value
        return d


@dataclass(frozen=True)
class TaskConfig:
    mode: Mode = Mode.ESTIMATION
    vitals_window_s: int = 1800
    estimation_lab_window_s: int = 3600
    horizon_s: int | None = None
    min_pos: int = 10
    min_neg: int = 10
    split_ratio: tuple[int, int, int] = (18, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "split_ratio", tuple(self.split_ratio))
        if self.vitals_window_s <= 0 or self.estimation_lab_window_s <= 0:
            raise ValueError("windows must be strictly positive")
        if self.min_pos < 1 or self.min_neg < 1:
            raise ValueError("min_pos and min_neg must be >= 1")
        if self.mode is Mode.MONITORING and self.horizon_s not in (1800, 3600, 7200):
            raise ValueError("monitoring horizon_s must be one of 1800, 3600, 7200")
        if len(self.split_ratio) != 3 or min(self.split_ratio) <= 0:
            raise ValueError("split_ratio needs three positive parts")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["split_ratio"] = list(self.split_ratio)
        return d


@dataclass
class TargetMatrix:
    records: list[str]
    labels: list[str]
    entries: np.ndarray  # int8, values in {0, 1, MISSING}

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.int8)
        if self.entries.shape != (len(self.records), len(self.labels)):
            raise ValueError("target matrix shape does not match records x labels")
        if not np.all(np.isin(self.entries, (0, 1, MISSING))):
            raise ValueError("target entries must be 0, 1 or MISSING")

    def column(self, label_id: str) -> np.ndarray:
        return self.entries[:, self.labels.index(label_id)]

    def subset_labels(self, label_ids: Sequence[str]) -> "TargetMatrix":
        idx = [self.labels.index(l) for l in label_ids]
        return TargetMatrix(list(self.records), list(label_ids), self.entries[:, idx])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["record_id"] + list(self.labels))
            for rid, row in zip(self.records, self.entries):
                w.writerow([rid] + ["NA" if v == MISSING else str(int(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "TargetMatrix":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            records, rows = [], []
            for cells in reader:
                records.append(cells[0])
                rows.append([MISSING if c == "NA" else int(c) for c in cells[1:]])
        entries = np.array(rows, dtype=np.int8).reshape(len(records), len(header) - 1)
        return cls(records, header[1:], entries)


@dataclass
class DatasetSplit:
    folds: dict[str, str]  # record_id -> fold

    def indices(self, records: Sequence[str], fold: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(records) if self.folds[r] == fold], dtype=np.int64)


# ---------------------------------------------------------------------------
# label space
# ---------------------------------------------------------------------------

def build_label_space(thresholds: Iterable[AbnormalityLabel]) -> list[AbnormalityLabel]:
    seen: dict[tuple[str, Direction], str] = {}
    ids = set()
    labels = []
    for lab in thresholds:
        key = (lab.item_id, lab.direction)
        if key in seen:
            raise DuplicateLabel(f"{lab.item_id} {lab.direction.value} defined by {seen[key]!r} and {lab.label_id!r}")
        if lab.label_id in ids:
            raise DuplicateLabel(f"label_id {lab.label_id!r} used twice")
        seen[key] = lab.label_id
        ids.add(lab.label_id)
        labels.append(lab)
    return sorted(labels, key=lambda l: l.label_id)


def parse_thresholds(path) -> list[AbnormalityLabel]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != THRESHOLD_COLUMNS:
            raise MalformedRow(f"header must be {','.join(THRESHOLD_COLUMNS)}", 0)
        for i, r in enumerate(reader, start=1):
            try:
                out.append(
                    AbnormalityLabel(
                        label_id=r["label_id"],
                        item_id=r["item_id"],
                        display_name=r["display_name"],
                        direction=Direction(r["direction"]),
                        threshold=float(r["threshold"]),
                        unit=r["unit"],
                        category=r["category"],
                    )
                )
            except ValueError as exc:
                raise MalformedRow(str(exc), i) from None
    return out


def write_thresholds(labels: Iterable[AbnormalityLabel], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(THRESHOLD_COLUMNS)
        for l in labels:
            w.writerow([l.label_id, l.item_id, l.display_name, l.direction.value, repr(float(l.threshold)), l.unit, l.category])


def is_abnormal(value: float, label: AbnormalityLabel) -> int:
    if label.direction is Direction.LOW:
        return int(value <= label.threshold)
    return int(value >= label.threshold)


# ---------------------------------------------------------------------------
# window rules
# ---------------------------------------------------------------------------

def _nearest_index(times: Sequence[int], t: int, window: int) -> int | None:
    """Index of the time closest to ``t`` with |dt| <= window; ties go to the earlier time."""
    j = bisect.bisect_left(times, t)
    best = None
    # candidates: last time < t (and its equal-time run start), first time >= t
    if j > 0:
        before = times[j - 1]
        k = bisect.bisect_left(times, before)
        if t - before <= window:
            best = k
    if j < len(times) and times[j] - t <= window:
        if best is None or times[j] - t < t - times[best]:
            best = j
    return best


def estimation_target(t_ecg: int, events: Sequence[LabEvent], label: AbnormalityLabel, window_s: int = 3600) -> int:
    times = [e.time for e in events]
    i = _nearest_index(times, t_ecg, window_s)
    if i is None:
        return MISSING
    return is_abnormal(events[i].value, label)


def monitoring_target(t_ecg: int, events: Sequence[LabEvent], label: AbnormalityLabel, horizon_s: int) -> int:
    times = [e.time for e in events]
    lo = bisect.bisect_right(times, t_ecg)
    hi = bisect.bisect_right(times, t_ecg + horizon_s)
    if lo == hi:
        return MISSING
    return int(any(is_abnormal(e.value, label) for e in events[lo:hi]))


def nearest_vitals(t_ecg: int, vitals: Sequence[VitalSample], window_s: int = 1800) -> dict[str, float | None]:
    by_channel: dict[str, list[VitalSample]] = defaultdict(list)
    for v in vitals:
        by_channel[v.channel].append(v)
    out: dict[str, float | None] = {}
    for ch in VITAL_CHANNELS:
        samples = by_channel.get(ch, [])
        i = _nearest_index([s.time for s in samples], t_ecg, window_s)
        out[ch] = None if i is None else samples[i].value
    return out


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

@dataclass
class RawFeatures:
    """Per-record tabular fields before imputation (None = missing)."""

    fields: dict[str, float | None]
    race: str | None


def raw_features(ctx: PatientContext | None, vitals: Mapping[str, float | None]) -> RawFeatures:
    fields: dict[str, float | None] = {
        "age": ctx.age if ctx else None,
        "sex": (1.0 if ctx.sex == "male" else 0.0) if ctx and ctx.sex else None,
    }
    fields.update({ch: vitals.get(ch) for ch in VITAL_CHANNELS})
    for k in ("bmi", "weight_kg", "height_cm"):
        fields[k] = getattr(ctx, k) if ctx else None
    return RawFeatures(fields, ctx.race if ctx else None)


def impute_features(rows: Sequence[RawFeatures], train_idx: Sequence[int]) -> tuple[np.ndarray, dict[str, float]]:
    """Median-impute with train-fold medians; returns (n x FEATURE_DIM matrix, imputation table)."""
    table: dict[str, float] = {}
    for f in IMPUTED_FIELDS:
        observed = [rows[i].fields[f] for i in train_idx if rows[i].fields[f] is not None]
        if not observed:
            raise AllMissingInTrain(f)
        table[f] = float(np.median(np.asarray(observed, dtype=np.float64)))
    return apply_imputation(rows, table), table


def apply_imputation(rows: Sequence[RawFeatures], table: Mapping[str, float]) -> np.ndarray:
    X = np.zeros((len(rows), FEATURE_DIM), dtype=np.float64)
    col = {name: j for j, name in enumerate(FEATURE_NAMES)}
    n_values = len(FEATURE_NAMES)
    for i, r in enumerate(rows):
        for k, f in enumerate(IMPUTED_FIELDS):
            v = r.fields[f]
            if v is None:
                X[i, col[f]] = table[f]
                X[i, n_values + k] = 1.0
            else:
                X[i, col[f]] = v
        X[i, col[f"race_{r.race or 'other'}"]] = 1.0
    return X


# ---------------------------------------------------------------------------
# splitting and task filtering
# ---------------------------------------------------------------------------

def _fold_counts(n: int, ratio: Sequence[int]) -> tuple[int, int, int]:
    total = sum(ratio)
    n_valid = int(math.floor(n * ratio[1] / total + 0.5))
    n_test = int(math.floor(n * ratio[2] / total + 0.5))
    return n - n_valid - n_test, n_valid, n_test


def split_patients(
    record_patients: Mapping[str, str],
    ratio: Sequence[int] = (18, 1, 1),
    seed: int = 0,
    strata: Mapping[str, str] | None = None,
) -> DatasetSplit:
    """Seeded patient-level split. ``record_patients`` maps record_id -> patient_id.

    With ``strata`` (patient_id -> key) the allocation is done within each stratum.
    """
    patients = sorted(set(record_patients.values()))
    if len(patients) < 20:
        raise TooFewPatients(f"need at least 20 patients, got {len(patients)}")
    rng = np.random.default_rng(seed)
    groups: dict[str, list[str]] = defaultdict(list)
    for p in patients:
        groups[strata[p] if strata else ""].append(p)
    fold_of: dict[str, str] = {}
    for key in sorted(groups):
        members = groups[key]
        order = rng.permutation(len(members))
        n_train, n_valid, _ = _fold_counts(len(members), ratio)
        for rank, j in enumerate(order):
            fold_of[members[j]] = "train" if rank < n_train else "valid" if rank < n_train + n_valid else "test"
    return DatasetSplit({r: fold_of[p] for r, p in record_patients.items()})


def label_counts(targets: TargetMatrix, split: DatasetSplit, fold: str) -> dict[str, tuple[int, int]]:
    idx = split.indices(targets.records, fold)
    sub = targets.entries[idx]
    return {l: (int(np.sum(sub[:, k] == 1)), int(np.sum(sub[:, k] == 0))) for k, l in enumerate(targets.labels)}


def filter_tasks(targets: TargetMatrix, split: DatasetSplit, min_pos: int = 10, min_neg: int = 10) -> list[str]:
    valid = label_counts(targets, split, "valid")
    test = label_counts(targets, split, "test")
    return [
        l
        for l in targets.labels
        if all(c[l][0] >= min_pos and c[l][1] >= min_neg for c in (valid, test))
    ]


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

@dataclass
class AssembledDataset:
    records: list[str]
    patients: list[str]
    features: np.ndarray
    targets: TargetMatrix
    split: DatasetSplit
    retained: list[str]
    labels: list[AbnormalityLabel]
    imputation: dict[str, float]
    config: TaskConfig
    seed: int
    waveforms: np.ndarray | None = None  # (n, 12, L) at the working rate
    extra: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "format": "cardiolab-manifest/1",
            "task": self.config.to_dict(),
            "seed": self.seed,
            "config_hash": config_hash({"task": self.config.to_dict(), "seed": self.seed, **self.extra}),
            "rows": [{"record_id": r, "patient_id": p} for r, p in zip(self.records, self.patients)],
            "labels": [l.to_dict() for l in self.labels],
            "retained_labels": list(self.retained),
            "folds": {r: self.split.folds[r] for r in self.records},
            "imputation": dict(self.imputation),
            "feature_names": list(FEATURE_NAMES + FLAG_NAMES),
            "targets_sha256": hashlib.sha256(np.ascontiguousarray(self.targets.entries).tobytes()).hexdigest(),
            "features_sha256": hashlib.sha256(np.ascontiguousarray(self.features).tobytes()).hexdigest(),
        }


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _group(items, key):
    out = defaultdict(list)
    for it in items:
        out[key(it)].append(it)
    return out


def compute_targets(
    ecgs: Sequence[EcgRecord], events: Sequence[LabEvent], labels: Sequence[AbnormalityLabel], config: TaskConfig
) -> TargetMatrix:
    by_key = _group(events, lambda e: (e.patient_id, e.item_id))
    entries = np.full((len(ecgs), len(labels)), MISSING, dtype=np.int8)
    for i, ecg in enumerate(ecgs):
        for k, lab in enumerate(labels):
            evs = by_key.get((ecg.patient_id, lab.item_id), [])
            if config.mode is Mode.ESTIMATION:
                entries[i, k] = estimation_target(ecg.acquisition_time, evs, lab, config.estimation_lab_window_s)
            else:
                entries[i, k] = monitoring_target(ecg.acquisition_time, evs, lab, config.horizon_s)
    return TargetMatrix([e.record_id for e in ecgs], [l.label_id for l in labels], entries)


def assemble_dataset(
    config: TaskConfig,
    ecgs: Sequence[EcgRecord],
    events: Sequence[LabEvent],
    vitals: Sequence[VitalSample],
    contexts: Sequence[PatientContext],
    thresholds: Sequence[AbnormalityLabel],
    seed: int = 0,
    strata: Mapping[str, str] | None = None,
) -> AssembledDataset:
    """One row per ECG record (ordered by record_id) with features, targets, folds and retained labels.

    ``ecgs`` may be header-only stand-ins; waveforms are attached separately by the caller.
    """
    labels = build_label_space(thresholds)
    ecgs = sorted(ecgs, key=lambda e: e.record_id)
    records = [e.record_id for e in ecgs]
    if len(set(records)) != len(records):
        raise ValueError("duplicate record_id")
    patients = [e.patient_id for e in ecgs]

    split = split_patients(dict(zip(records, patients)), config.split_ratio, seed, strata)

    ctx_by_patient = {c.patient_id: c for c in contexts}
    vitals_by_patient = _group(vitals, lambda v: v.patient_id)
    raw = [
        raw_features(
            ctx_by_patient.get(e.patient_id),
            nearest_vitals(e.acquisition_time, vitals_by_patient.get(e.patient_id, []), config.vitals_window_s),
        )
        for e in ecgs
    ]
    train_idx = split.indices(records, "train")
    features, table = impute_features(raw, train_idx)

    targets = compute_targets(ecgs, events, labels, config)
    retained = filter_tasks(targets, split, config.min_pos, config.min_neg)
    return AssembledDataset(
        records=records,
        patients=patients,
        features=features,
        targets=targets,
        split=split,
        retained=retained,
        labels=labels,
        imputation=table,
        config=config,
        seed=seed,
    )


def write_dataset(ds: AssembledDataset, out_dir) -> Path:
    """Write manifest.json, targets.csv, features.npy (and waveforms.npy when attached)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds.targets.to_csv(out_dir / "targets.csv")
    np.save(out_dir / "features.npy", ds.features)
    if ds.waveforms is not None:
        np.save(out_dir / "waveforms.npy", ds.waveforms)
    path = out_dir / "manifest.json"
    path.write_text(canonical_json(ds.manifest()))
    return path


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class LoadedDataset:
    """Training-side view of a written dataset directory."""

    manifest: dict
    manifest_hash: str
    records: list[str]
    folds: np.ndarray  # str per row
    features: np.ndarray
    waveforms: np.ndarray
    targets: np.ndarray  # (n, K) int8 over retained labels
    labels: list[dict]  # retained label metadata, in training order

    def fold_indices(self, fold: str) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)


def load_dataset(directory) -> LoadedDataset:
    directory = Path(directory)
    man_path = directory / "manifest.json"
    manifest = json.loads(man_path.read_text())
    tm = TargetMatrix.from_csv(directory / "targets.csv")
    records = [r["record_id"] for r in manifest["rows"]]
    if tm.records != records:
        raise ValueError("targets.csv row order disagrees with manifest")
    retained = manifest["retained_labels"]
    meta = {l["label_id"]: l for l in manifest["labels"]}
    return LoadedDataset(
        manifest=manifest,
        manifest_hash=manifest_hash(man_path),
        records=records,
        folds=np.array([manifest["folds"][r] for r in records]),
        features=np.load(directory / "features.npy"),
        waveforms=np.load(directory / "waveforms.npy", mmap_mode="r"),
        targets=tm.subset_labels(retained).entries,
        labels=[meta[l] for l in retained],
    )
