"""Waveform files, CSV tables and resampling."""

import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiolab import ingestion as ing
from cardiolab.errors import (
    LengthMismatch,
    MalformedHeader,
    MalformedRow,
    NonFiniteSample,
    NonFiniteValue,
    NonIntegerFactor,
    UnknownChannel,
    UnparseableTime,
)


def make_record(rate=500, seed=0, rid="r1", pid="p1"):
    rng = np.random.default_rng(seed)
    samples = rng.standard_normal((12, rate * 10)).astype(np.float32)
    return ing.EcgRecord(rid, pid, 1_700_000_000, rate, samples)


class TestWaveform:
    def test_round_trip_bit_exact(self, tmp_path):
        rec = make_record()
        payload, sidecar = ing.write_waveform(rec, tmp_path)
        back = ing.parse_waveform(payload, sidecar)
        assert back == rec
        assert back.n_samples == 5000
        assert back.samples.tobytes() == rec.samples.tobytes()

    @settings(max_examples=25, deadline=None)
    @given(rate=st.sampled_from([50, 100, 250, 500]), seed=st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, tmp_path_factory, rate, seed):
        d = tmp_path_factory.mktemp("wf")
        rec = make_record(rate, seed)
        back = ing.parse_waveform(*ing.write_waveform(rec, d))
        assert back == rec

    def test_eleven_channels_rejected(self, tmp_path):
        payload, sidecar = ing.write_waveform(make_record(), tmp_path)
        header = json.loads(sidecar.read_text())
        header["channel_names"] = header["channel_names"][:11]
        sidecar.write_text(json.dumps(header))
        with pytest.raises(MalformedHeader):
            ing.parse_waveform(payload, sidecar)

    @pytest.mark.parametrize("field", ing.SIDECAR_FIELDS)
    def test_missing_field(self, tmp_path, field):
        payload, sidecar = ing.write_waveform(make_record(), tmp_path)
        header = json.loads(sidecar.read_text())
        del header[field]
        sidecar.write_text(json.dumps(header))
        with pytest.raises(MalformedHeader):
            ing.parse_waveform(payload, sidecar)

    def test_header_length_not_ten_seconds(self, tmp_path):
        payload, sidecar = ing.write_waveform(make_record(), tmp_path)
        header = json.loads(sidecar.read_text())
        header["n_samples"] = 4999
        sidecar.write_text(json.dumps(header))
        with pytest.raises(MalformedHeader):
            ing.parse_waveform(payload, sidecar)

    def test_truncated_payload(self, tmp_path):
        payload, sidecar = ing.write_waveform(make_record(), tmp_path)
        payload.write_bytes(payload.read_bytes()[:-4])
        with pytest.raises(LengthMismatch):
            ing.parse_waveform(payload, sidecar)

    def test_non_finite_payload(self, tmp_path):
        payload, sidecar = ing.write_waveform(make_record(), tmp_path)
        raw = bytearray(payload.read_bytes())
        raw[0:4] = np.array([np.nan], dtype="<f4").tobytes()
        payload.write_bytes(bytes(raw))
        with pytest.raises(NonFiniteSample):
            ing.parse_waveform(payload, sidecar)

    def test_non_finite_in_memory(self):
        s = np.zeros((12, 5000))
        s[3, 7] = np.inf
        with pytest.raises(NonFiniteSample):
            ing.EcgRecord("r", "p", 0, 500, s)

    def test_iter_sorted(self, tmp_path):
        for rid in ["c", "a", "b"]:
            ing.write_waveform(make_record(100, rid=rid), tmp_path)
        assert [r.record_id for r in ing.iter_waveforms(tmp_path)] == ["a", "b", "c"]


class TestResample:
    def test_length(self):
        out = ing.resample_ecg(make_record(500), 100)
        assert out.n_samples == 1000 and out.sampling_rate_hz == 100
        assert out.acquisition_time == 1_700_000_000 and out.patient_id == "p1"

    def test_constant_preserved(self):
        rec = ing.EcgRecord("r", "p", 0, 500, np.full((12, 5000), 1.7, dtype=np.float64))
        out = ing.resample_ecg(rec, 100)
        np.testing.assert_allclose(out.samples, 1.7, atol=1e-6)

    def test_sinusoid_amplitude(self):
        t = np.arange(5000) / 500.0
        rec = ing.EcgRecord("r", "p", 0, 500, np.tile(np.sin(2 * np.pi * 5 * t), (12, 1)))
        out = ing.resample_ecg(rec, 100).samples[0]
        t2 = np.arange(1000) / 100.0
        ref = np.sin(2 * np.pi * 5 * t2)
        # amplitude by least-squares projection onto the analytic tone, away from the edges
        core = slice(100, 900)
        amp = np.dot(out[core], ref[core]) / np.dot(ref[core], ref[core])
        assert abs(amp - 1.0) < 0.02
        assert np.max(np.abs(out[core] - ref[core])) < 0.02

    def test_same_rate_identity(self):
        rec = make_record(100)
        out = ing.resample_ecg(rec, 100)
        np.testing.assert_allclose(out.samples, rec.samples, atol=1e-9)
        once = ing.resample_ecg(ing.resample_ecg(make_record(500), 100), 100)
        np.testing.assert_allclose(once.samples, ing.resample_ecg(make_record(500), 100).samples, atol=1e-9)

    @pytest.mark.parametrize("target", [300, 0, 7])
    def test_non_integer_factor(self, target):
        with pytest.raises(NonIntegerFactor):
            ing.resample_ecg(make_record(500), target)


def random_events(rng, n):
    items = ["NTproBNP", "Creatinine", "Potassium"]
    out = []
    for _ in range(n):
        out.append(
            ing.LabEvent(
                patient_id=f"p{rng.integers(0, 50):03d}",
                time=int(rng.integers(1_600_000_000, 1_700_000_000)),
                item_id=items[rng.integers(0, 3)],
                value=float(rng.normal(100, 40)),
                unit="mg/dL",
            )
        )
    return out


class TestTables:
    def test_events_round_trip_10k(self, tmp_path):
        rng = np.random.default_rng(1)
        events = random_events(rng, 10_000)
        path = tmp_path / "labs.csv"
        ing.write_events(events, path)
        back = ing.parse_events(path)
        assert Counter(back) == Counter(events)
        assert back == sorted(back, key=lambda e: (e.patient_id, e.time)) or all(
            (a.patient_id, a.time) <= (b.patient_id, b.time) for a, b in zip(back, back[1:])
        )

    def test_vitals_round_trip_10k(self, tmp_path):
        rng = np.random.default_rng(2)
        vitals = [
            ing.VitalSample(f"p{rng.integers(0, 40)}", int(rng.integers(0, 10**9)),
                            ing.VITAL_CHANNELS[rng.integers(0, 6)], float(rng.normal(80, 10)))
            for _ in range(10_000)
        ]
        path = tmp_path / "vitals.csv"
        ing.write_vitals(vitals, path)
        back = ing.parse_vitals(path)
        assert Counter(back) == Counter(vitals)
        assert all((a.patient_id, a.time) <= (b.patient_id, b.time) for a, b in zip(back, back[1:]))

    def test_context_round_trip(self, tmp_path):
        ctx = [
            ing.PatientContext("p2", 61.5, "male", None, 27.1, None, 180.0),
            ing.PatientContext("p1", None, None, "asian", None, 70.25, None),
        ]
        path = tmp_path / "context.csv"
        ing.write_context(ctx, path)
        assert ing.parse_context(path) == sorted(ctx, key=lambda c: c.patient_id)

    def test_header_only(self, tmp_path):
        path = tmp_path / "labs.csv"
        ing.write_events([], path)
        assert ing.parse_events(path) == []

    def test_unknown_channel_row_number(self, tmp_path):
        path = tmp_path / "vitals.csv"
        path.write_text("patient_id,channel,time,value\np1,heart_rate_bpm,10,70\np1,pulse,20,71\n")
        with pytest.raises(UnknownChannel) as exc:
            ing.parse_vitals(path)
        assert exc.value.row == 2 and "row 2" in str(exc.value)

    @pytest.mark.parametrize("text", ["yesterday", "2024-01-01T10:00:00", "2024-13-01T00:00:00+00:00", ""])
    def test_unparseable_time(self, tmp_path, text):
        path = tmp_path / "labs.csv"
        path.write_text(f"patient_id,item_id,time,value,unit\np1,K,{text},4.0,mmol/L\n")
        with pytest.raises(UnparseableTime):
            ing.parse_events(path)

    @pytest.mark.parametrize("value", ["nan", "inf", "-inf"])
    def test_non_finite_value(self, tmp_path, value):
        path = tmp_path / "labs.csv"
        path.write_text(f"patient_id,item_id,time,value,unit\np1,K,0,{value},mmol/L\n")
        with pytest.raises(NonFiniteValue):
            ing.parse_events(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "labs.csv"
        path.write_text("patient,item,time,value,unit\n")
        with pytest.raises(MalformedRow):
            ing.parse_events(path)

    @pytest.mark.parametrize(
        "text, expected",
        [
            ("1700000000", 1_700_000_000),
            ("2023-11-14T22:13:20Z", 1_700_000_000),
            ("2023-11-14T23:13:20+01:00", 1_700_000_000),
            ("2023-11-14T17:13:20-05:00", 1_700_000_000),
        ],
    )
    def test_time_normalized_to_utc(self, text, expected):
        assert ing.parse_time(text, 1) == expected
