"""Readers and writers for the on-disk cohort inputs.

Waveforms are stored as a raw little-endian float32 channel-major payload
(``<record_id>.bin``) next to a JSON sidecar (``<record_id>.json``).  Lab
events, vital samples and patient context are plain CSV files.  Every writer
here produces files its matching reader parses back to an equal value.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal

from .errors import (
    LengthMismatch,
    MalformedHeader,
    MalformedRow,
    NonFiniteSample,
    NonFiniteValue,
    NonIntegerFactor,
    UnknownChannel,
    UnparseableTime,
)

LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
RECORD_SECONDS = 10
VITAL_CHANNELS = ("temperature_f", "heart_rate_bpm", "resp_rate_bpm", "spo2_pct", "sbp_mmhg", "dbp_mmhg")
SEXES = ("female", "male")
RACES = ("caucasian", "african", "asian", "latino", "other")

LAB_COLUMNS = ("patient_id", "item_id", "time", "value", "unit")
VITAL_COLUMNS = ("patient_id", "channel", "time", "value")
CONTEXT_COLUMNS = ("patient_id", "age", "sex", "race", "bmi", "weight_kg", "height_cm")
SIDECAR_FIELDS = ("record_id", "patient_id", "acquisition_time", "sampling_rate_hz", "n_samples", "channel_names", "scale")
PAYLOAD_SCALE = "float32-le"


@dataclass(eq=False)
class EcgRecord:
    record_id: str
    patient_id: str
    acquisition_time: int
    sampling_rate_hz: int
    samples: np.ndarray  # (12, L) millivolts
    channel_names: tuple[str, ...] = LEADS

    def __post_init__(self):
        self.channel_names = tuple(self.channel_names)
        if self.channel_names != LEADS:
            raise MalformedHeader(f"{self.record_id}: channels must be {LEADS}, got {self.channel_names}")
        if self.sampling_rate_hz <= 0:
            raise MalformedHeader(f"{self.record_id}: sampling rate must be positive")
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(LEADS):
            raise MalformedHeader(f"{self.record_id}: samples must be 12 x L, got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise NonFiniteSample(f"{self.record_id}: non-finite sample value")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.patient_id == other.patient_id
            and self.acquisition_time == other.acquisition_time
            and self.sampling_rate_hz == other.sampling_rate_hz
            and self.channel_names == other.channel_names
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(frozen=True, order=True)
class LabEvent:
    patient_id: str
    time: int
    item_id: str
    value: float
    unit: str


@dataclass(frozen=True, order=True)
class VitalSample:
    patient_id: str
    time: int
    channel: str
    value: float


@dataclass(frozen=True)
class PatientContext:
    patient_id: str
    age: float | None = None
    sex: str | None = None
    race: str | None = None
    bmi: float | None = None
    weight_kg: float | None = None
    height_cm: float | None = None

    def __post_init__(self):
        if self.sex is not None and self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}")
        if self.race is not None and self.race not in RACES:
            raise ValueError(f"race must be one of {RACES}")
        for name in ("age", "bmi", "weight_kg", "height_cm"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive")


# ---------------------------------------------------------------------------
# waveforms
# ---------------------------------------------------------------------------

def write_waveform(rec: EcgRecord, directory: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``rec`` as payload + sidecar; returns (payload path, sidecar path)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = directory / f"{rec.record_id}.bin"
    sidecar = directory / f"{rec.record_id}.json"
    payload.write_bytes(np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())
    header = {
        "record_id": rec.record_id,
        "patient_id": rec.patient_id,
        "acquisition_time": int(rec.acquisition_time),
        "sampling_rate_hz": int(rec.sampling_rate_hz),
        "n_samples": int(rec.n_samples),
        "channel_names": list(rec.channel_names),
        "scale": PAYLOAD_SCALE,
    }
    sidecar.write_text(json.dumps(header, sort_keys=True) + "\n")
    return payload, sidecar


def parse_waveform(path: str | os.PathLike, sidecar: str | os.PathLike) -> EcgRecord:
    try:
        header = json.loads(Path(sidecar).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{sidecar}: invalid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise MalformedHeader(f"{sidecar}: header must be an object")
    missing = [f for f in SIDECAR_FIELDS if f not in header]
    if missing:
        raise MalformedHeader(f"{sidecar}: missing field(s) {missing}")
    if header["scale"] != PAYLOAD_SCALE:
        raise MalformedHeader(f"{sidecar}: unsupported scale {header['scale']!r}")
    names = tuple(header["channel_names"])
    if names != LEADS:
        raise MalformedHeader(f"{sidecar}: expected the 12 standard leads, got {len(names)} channel(s)")
    rate = header["sampling_rate_hz"]
    n = header["n_samples"]
    if not (isinstance(rate, int) and isinstance(n, int) and rate > 0):
        raise MalformedHeader(f"{sidecar}: sampling_rate_hz and n_samples must be integers")
    if n != rate * RECORD_SECONDS:
        raise MalformedHeader(f"{sidecar}: n_samples {n} is not {RECORD_SECONDS} s at {rate} Hz")
    raw = Path(path).read_bytes()
    expected = len(LEADS) * n * 4
    if len(raw) != expected:
        raise LengthMismatch(f"{path}: payload has {len(raw)} bytes, header implies {expected}")
    samples = np.frombuffer(raw, dtype="<f4").reshape(len(LEADS), n).astype(np.float32)
    if not np.all(np.isfinite(samples)):
        raise NonFiniteSample(f"{path}: non-finite sample value")
    return EcgRecord(
        record_id=str(header["record_id"]),
        patient_id=str(header["patient_id"]),
        acquisition_time=int(header["acquisition_time"]),
        sampling_rate_hz=rate,
        samples=samples,
    )


def iter_waveforms(directory: str | os.PathLike) -> Iterable[EcgRecord]:
    """Parse every ``*.json`` sidecar in ``directory`` in record-id order."""
    for sidecar in sorted(Path(directory).glob("*.json")):
        yield parse_waveform(sidecar.with_suffix(".bin"), sidecar)


def resample_ecg(rec: EcgRecord, target_hz: int) -> EcgRecord:
    """Integer decimation with a zero-phase windowed-sinc anti-alias filter (cutoff 0.45 * target_hz)."""
    if target_hz <= 0 or rec.sampling_rate_hz % target_hz:
        raise NonIntegerFactor(f"{target_hz} Hz does not divide {rec.sampling_rate_hz} Hz")
    q = rec.sampling_rate_hz // target_hz
    if q == 1:
        out = rec.samples.copy()
    else:
        taps = _antialias_taps(rec.sampling_rate_hz, target_hz)
        x = rec.samples.astype(np.float64)
        padlen = min(3 * len(taps), x.shape[1] - 1)
        y = signal.filtfilt(taps, [1.0], x, axis=1, padtype="odd", padlen=padlen)
        out = y[:, ::q].astype(rec.samples.dtype)
    return EcgRecord(
        record_id=rec.record_id,
        patient_id=rec.patient_id,
        acquisition_time=rec.acquisition_time,
        sampling_rate_hz=target_hz,
        samples=out,
    )


_TAPS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _antialias_taps(source_hz: int, target_hz: int) -> np.ndarray:
    key = (source_hz, target_hz)
    if key not in _TAPS_CACHE:
        q = source_hz // target_hz
        _TAPS_CACHE[key] = signal.firwin(20 * q + 1, 0.45 * target_hz, fs=source_hz)
    return _TAPS_CACHE[key]


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def parse_time(text: str, row: int) -> int:
    """ISO-8601 with an explicit offset, or integer epoch seconds -> UTC epoch seconds."""
    s = text.strip()
    if not s:
        raise UnparseableTime("empty time", row)
    if s.lstrip("+-").isdigit():
        return int(s)
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(s)
    except ValueError:
        raise UnparseableTime(f"cannot parse time {text!r}", row) from None
    if dt.tzinfo is None:
        raise UnparseableTime(f"time {text!r} has no UTC offset", row)
    ts = dt.timestamp()
    if ts != int(ts):
        raise UnparseableTime(f"time {text!r} has sub-second precision", row)
    return int(ts)


def _float(text: str, row: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise MalformedRow(f"{column}: not a number: {text!r}", row) from None
    if not math.isfinite(v):
        raise NonFiniteValue(f"{column}: non-finite value {text!r}", row)
    return v


def _optional_float(text: str, row: int, column: str) -> float | None:
    if text.strip() == "":
        return None
    v = _float(text, row, column)
    if v <= 0:
        raise MalformedRow(f"{column}: must be positive, got {v}", row)
    return v


def _read_rows(path, columns: Sequence[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow("missing header", 0) from None
        if tuple(h.strip() for h in header) != tuple(columns):
            raise MalformedRow(f"header must be {','.join(columns)}", 0)
        for i, cells in enumerate(reader, start=1):
            if not cells:
                continue
            if len(cells) != len(columns):
                raise MalformedRow(f"expected {len(columns)} cells, got {len(cells)}", i)
            yield i, dict(zip(columns, cells))


def _assert_sorted(items: list) -> list:
    assert all(
        (a.patient_id, a.time) <= (b.patient_id, b.time) for a, b in zip(items, items[1:])
    ), "output not sorted by (patient_id, time)"
    return items


def parse_events(path) -> list[LabEvent]:
    out = []
    for i, r in _read_rows(path, LAB_COLUMNS):
        if not r["patient_id"] or not r["item_id"]:
            raise MalformedRow("empty patient_id or item_id", i)
        out.append(
            LabEvent(
                patient_id=r["patient_id"],
                time=parse_time(r["time"], i),
                item_id=r["item_id"],
                value=_float(r["value"], i, "value"),
                unit=r["unit"],
            )
        )
    out.sort()
    return _assert_sorted(out)


def parse_vitals(path) -> list[VitalSample]:
    out = []
    for i, r in _read_rows(path, VITAL_COLUMNS):
        if r["channel"] not in VITAL_CHANNELS:
            raise UnknownChannel(f"unknown vital channel {r['channel']!r}", i)
        if not r["patient_id"]:
            raise MalformedRow("empty patient_id", i)
        out.append(
            VitalSample(
                patient_id=r["patient_id"],
                time=parse_time(r["time"], i),
                channel=r["channel"],
                value=_float(r["value"], i, "value"),
            )
        )
    out.sort()
    return _assert_sorted(out)


def parse_context(path) -> list[PatientContext]:
    out = []
    seen = set()
    for i, r in _read_rows(path, CONTEXT_COLUMNS):
        pid = r["patient_id"]
        if not pid:
            raise MalformedRow("empty patient_id", i)
        if pid in seen:
            raise MalformedRow(f"duplicate patient_id {pid!r}", i)
        seen.add(pid)
        sex = r["sex"].strip() or None
        race = r["race"].strip() or None
        if sex is not None and sex not in SEXES:
            raise UnknownChannel(f"unknown sex {sex!r}", i)
        if race is not None and race not in RACES:
            raise UnknownChannel(f"unknown race {race!r}", i)
        out.append(
            PatientContext(
                patient_id=pid,
                age=_optional_float(r["age"], i, "age"),
                sex=sex,
                race=race,
                bmi=_optional_float(r["bmi"], i, "bmi"),
                weight_kg=_optional_float(r["weight_kg"], i, "weight_kg"),
                height_cm=_optional_float(r["height_cm"], i, "height_cm"),
            )
        )
    out.sort(key=lambda c: c.patient_id)
    return out


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_events(events: Iterable[LabEvent], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LAB_COLUMNS)
        for e in events:
            w.writerow([e.patient_id, e.item_id, e.time, _cell(float(e.value)), e.unit])


def write_vitals(vitals: Iterable[VitalSample], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VITAL_COLUMNS)
        for v in vitals:
            w.writerow([v.patient_id, v.channel, v.time, _cell(float(v.value))])


def write_context(contexts: Iterable[PatientContext], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONTEXT_COLUMNS)
        for c in contexts:
            w.writerow([c.patient_id] + [_cell(getattr(c, k)) for k in CONTEXT_COLUMNS[1:]])


@dataclass
class CohortFiles:
    """Locations of the ingestion inputs inside one cohort directory."""

    root: Path
    waveform_dir: Path = field(init=False)
    labs: Path = field(init=False)
    vitals: Path = field(init=False)
    context: Path = field(init=False)
    thresholds: Path = field(init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.waveform_dir = self.root / "waveforms"
        self.labs = self.root / "labs.csv"
        self.vitals = self.root / "vitals.csv"
        self.context = self.root / "context.csv"
        self.thresholds = self.root / "thresholds.csv"
