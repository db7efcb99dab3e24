"""Synthetic cohort with a planted ECG <-> lab dependency.

Every patient contributes ``records_per_patient`` episodes on separate days.
Per episode and label an abnormal status is drawn; when abnormal, leads II
and V2 carry a stronger sinusoid at the label's frequency and one vital sign
is shifted (both scaled by ``signal_strength``), and every lab draw of the
label's item in that episode lands on the abnormal side of the threshold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .cohort import CATEGORIES, AbnormalityLabel, Direction, write_thresholds
from .ingestion import (
    LEADS,
    RACES,
    RECORD_SECONDS,
    CohortFiles,
    EcgRecord,
    LabEvent,
    PatientContext,
    VitalSample,
    write_context,
    write_events,
    write_vitals,
    write_waveform,
)

FREQUENCIES_HZ = (3.0, 7.0, 11.0, 17.0, 23.0, 29.0, 37.0, 41.0)
PLANT_LEADS = (LEADS.index("II"), LEADS.index("V2"))
BACKGROUND_AMP_MV = 0.05
PLANTED_AMP_MV = 0.5
# label k shifts vital VITAL_SHIFTS[k % 4] by delta * signal_strength when abnormal
VITAL_SHIFTS = (("heart_rate_bpm", 12.0), ("resp_rate_bpm", 4.0), ("spo2_pct", -3.0), ("sbp_mmhg", 15.0))
VITAL_BASELINES = {
    "temperature_f": (98.2, 0.7, 0.3),
    "heart_rate_bpm": (75.0, 10.0, 4.0),
    "resp_rate_bpm": (16.0, 3.0, 1.5),
    "spo2_pct": (97.0, 1.2, 0.8),
    "sbp_mmhg": (125.0, 15.0, 6.0),
    "dbp_mmhg": (78.0, 10.0, 5.0),
}  # channel -> (population mean, between-patient sd, within-patient sd)
LAB_THRESHOLD = 100.0
LAB_SPREAD = 40.0
BASE_TIME = 1_600_000_000
EPISODE_HALF_WIDTH_S = 3 * 3600


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 500
    records_per_patient: int = 4
    n_labels: int = 4
    signal_strength: float = 0.8
    missing_rate_tabular: float = 0.2
    lab_event_rate: float = 1.0  # per hour
    prevalence: float = 0.3
    sampling_rate_hz: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1 or self.records_per_patient < 1 or self.n_labels < 1:
            raise ValueError("counts must be positive")
        if self.n_labels > len(FREQUENCIES_HZ):
            raise ValueError(f"at most {len(FREQUENCIES_HZ)} planted labels")
        for name in ("signal_strength", "missing_rate_tabular", "prevalence"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.lab_event_rate < 0:
            raise ValueError("lab_event_rate must be non-negative")
        if self.sampling_rate_hz < 100 or self.sampling_rate_hz % 100:
            raise ValueError("sampling_rate_hz must be a positive multiple of 100")

    def to_dict(self) -> dict:
        return asdict(self)


def planted_labels(n_labels: int) -> list[AbnormalityLabel]:
    out = []
    for k in range(n_labels):
        direction = Direction.HIGH if k % 2 == 0 else Direction.LOW
        out.append(
            AbnormalityLabel(
                label_id=f"L{k:02d}_{direction.value}",
                item_id=f"ITEM{k:02d}",
                display_name=f"Synthetic {k}",
                direction=direction,
                threshold=LAB_THRESHOLD,
                unit="u/L",
                category=CATEGORIES[k % len(CATEGORIES)],
            )
        )
    return out


def _beat_template(fs: int) -> np.ndarray:
    t = np.arange(int(0.6 * fs)) / fs
    qrs = np.exp(-0.5 * ((t - 0.1) / 0.012) ** 2)
    q = -0.15 * np.exp(-0.5 * ((t - 0.08) / 0.008) ** 2)
    tw = 0.3 * np.exp(-0.5 * ((t - 0.35) / 0.05) ** 2)
    return qrs + q + tw


def _waveform(rng, cfg: SynthConfig, gains, hr_bpm, abnormal, template) -> np.ndarray:
    fs = cfg.sampling_rate_hz
    L = fs * RECORD_SECONDS
    t = np.arange(L) / fs
    rr = 60.0 / hr_bpm
    beats = np.arange(rng.uniform(0, rr), RECORD_SECONDS, rr)
    beats = beats + rng.normal(0, 0.02 * rr, size=beats.size)
    train = np.zeros(L)
    idx = np.clip((beats * fs).astype(int), 0, L - 1)
    np.add.at(train, idx, 1.0)
    beat = signal.fftconvolve(train, template)[:L]
    x = gains[:, None] * beat[None, :]
    x += 0.1 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t + rng.uniform(0, 2 * np.pi))[None, :]
    x += rng.normal(0, 0.05, size=x.shape)
    for k in range(cfg.n_labels):
        amp = BACKGROUND_AMP_MV + abnormal[k] * cfg.signal_strength * PLANTED_AMP_MV
        wave = amp * np.sin(2 * np.pi * FREQUENCIES_HZ[k] * t + rng.uniform(0, 2 * np.pi))
        for lead in PLANT_LEADS:
            x[lead] += wave
    return x.astype(np.float32)


def _maybe(rng, value, rate):
    return None if rng.random() < rate else value


def _patient(cfg: SynthConfig, p: int, labels, template):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, p]))
    pid = f"P{p:05d}"
    miss = cfg.missing_rate_tabular
    height = float(np.clip(rng.normal(170, 10), 140, 205))
    weight = float(np.clip(rng.normal(80, 15), 40, 160))
    ctx = PatientContext(
        patient_id=pid,
        age=_maybe(rng, round(float(rng.uniform(20, 90)), 1), miss),
        sex=_maybe(rng, ("female", "male")[int(rng.integers(2))], miss),
        race=_maybe(rng, RACES[int(rng.integers(len(RACES)))], miss),
        bmi=_maybe(rng, round(weight / (height / 100) ** 2, 2), miss),
        weight_kg=_maybe(rng, round(weight, 1), miss),
        height_cm=_maybe(rng, round(height, 1), miss),
    )
    gains = rng.normal(1.0, 0.3, size=len(LEADS))
    gains[LEADS.index("aVR")] *= -1
    baselines = {ch: rng.normal(m, sd) for ch, (m, sd, _) in VITAL_BASELINES.items()}

    records, events, vitals, truth = [], [], [], {}
    for r in range(cfg.records_per_patient):
        rid = f"{pid}_R{r:02d}"
        t_ecg = BASE_TIME + r * 86400 + EPISODE_HALF_WIDTH_S + int(rng.integers(0, 86400 - 2 * EPISODE_HALF_WIDTH_S))
        abnormal = (rng.random(cfg.n_labels) < cfg.prevalence).astype(int)
        shift = {ch: 0.0 for ch in VITAL_BASELINES}
        for k in range(cfg.n_labels):
            ch, delta = VITAL_SHIFTS[k % len(VITAL_SHIFTS)]
            shift[ch] += abnormal[k] * delta * cfg.signal_strength
        hr_now = baselines["heart_rate_bpm"] + shift["heart_rate_bpm"] + rng.normal(0, 3)
        samples = _waveform(rng, cfg, gains, float(np.clip(hr_now, 40, 150)), abnormal, template)
        records.append(EcgRecord(rid, pid, t_ecg, cfg.sampling_rate_hz, samples))

        for ch, (_, _, within_sd) in VITAL_BASELINES.items():
            for _ in range(rng.poisson(2.0)):
                if rng.random() < miss:
                    continue
                dt = int(rng.integers(-3600, 3601))
                value = baselines[ch] + shift[ch] + rng.normal(0, within_sd)
                vitals.append(VitalSample(pid, t_ecg + dt, ch, round(float(value), 1)))

        for k, lab in enumerate(labels):
            n_ev = rng.poisson(cfg.lab_event_rate * 2 * EPISODE_HALF_WIDTH_S / 3600)
            offsets = np.sort(rng.integers(-EPISODE_HALF_WIDTH_S, EPISODE_HALF_WIDTH_S + 1, size=n_ev))
            above = bool(abnormal[k]) == (lab.direction is Direction.HIGH)
            for off in offsets:
                margin = LAB_SPREAD * rng.uniform(0.05, 1.0)
                value = round(LAB_THRESHOLD + (margin if above else -margin), 2)
                events.append(LabEvent(pid, int(t_ecg + off), lab.item_id, float(value), lab.unit))

        truth[rid] = {"patient_id": pid, "time": t_ecg, "abnormal": [int(a) for a in abnormal]}
    return ctx, records, events, vitals, truth


def generate(cfg: SynthConfig, out_dir) -> CohortFiles:
    """Write a full cohort (ingestion formats + truth.json) under ``out_dir``."""
    files = CohortFiles(Path(out_dir))
    files.waveform_dir.mkdir(parents=True, exist_ok=True)
    labels = planted_labels(cfg.n_labels)
    template = _beat_template(cfg.sampling_rate_hz)
    contexts, events, vitals, truth = [], [], [], {}
    for p in range(cfg.n_patients):
        ctx, recs, evs, vits, tr = _patient(cfg, p, labels, template)
        contexts.append(ctx)
        events += evs
        vitals += vits
        truth.update(tr)
        for rec in recs:
            write_waveform(rec, files.waveform_dir)
    write_context(contexts, files.context)
    write_events(sorted(events), files.labs)
    write_vitals(sorted(vitals), files.vitals)
    write_thresholds(labels, files.thresholds)
    doc = {
        "config": cfg.to_dict(),
        "labels": [
            {
                "label_id": lab.label_id,
                "item_id": lab.item_id,
                "frequency_hz": FREQUENCIES_HZ[k],
                "vital": VITAL_SHIFTS[k % len(VITAL_SHIFTS)][0],
            }
            for k, lab in enumerate(labels)
        ],
        "records": truth,
    }
    (files.root / "truth.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return files
