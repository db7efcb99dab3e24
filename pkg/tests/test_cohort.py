"""Label space, window rules, features, splitting, filtering and assembly."""

import json
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cardiolab import cohort as co
from cardiolab import ingestion as ing
from cardiolab.cohort import MISSING, AbnormalityLabel
from cardiolab.errors import AllMissingInTrain, DuplicateLabel, TooFewPatients

NTPROBNP = AbnormalityLabel("NTproBNP_HIGH", "NTproBNP", "NTproBNP", "HIGH", 353.0, "pg/mL", "Ca")
UREA_LOW = AbnormalityLabel("UreaN_LOW", "UreaN", "Urea Nitrogen", "LOW", 6.0, "mg/dL", "Re")
UREA_HIGH = AbnormalityLabel("UreaN_HIGH", "UreaN", "Urea Nitrogen", "HIGH", 20.0, "mg/dL", "Re")
HOUR = 3600
MIN = 60


def ev(t, value, item="X"):
    return ing.LabEvent("p", t, item, value, "u")


class TestLabelSpace:
    def test_single_label(self):
        space = co.build_label_space([NTPROBNP])
        assert len(space) == 1 and space[0].category == "Ca"

    def test_two_directions_are_distinct(self):
        space = co.build_label_space([UREA_LOW, UREA_HIGH])
        assert [l.label_id for l in space] == ["UreaN_HIGH", "UreaN_LOW"]

    def test_duplicate(self):
        dup = AbnormalityLabel("other", "NTproBNP", "NTproBNP", "HIGH", 400.0, "pg/mL", "Ca")
        with pytest.raises(DuplicateLabel):
            co.build_label_space([NTPROBNP, dup])

    def test_thresholds_round_trip(self, tmp_path):
        path = tmp_path / "thresholds.csv"
        co.write_thresholds([UREA_LOW, NTPROBNP], path)
        assert co.build_label_space(co.parse_thresholds(path)) == co.build_label_space([UREA_LOW, NTPROBNP])

    @pytest.mark.parametrize(
        "value, label, expected",
        [(353.0, NTPROBNP, 1), (352.99, NTPROBNP, 0), (6.1, UREA_LOW, 0), (6.0, UREA_LOW, 1), (5.0, UREA_LOW, 1)],
    )
    def test_is_abnormal(self, value, label, expected):
        assert co.is_abnormal(value, label) == expected

    def test_is_abnormal_random(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            lab = oracles.random_label(rng)
            v = float(rng.choice([100.0, rng.normal(100, 5)]))
            assert co.is_abnormal(v, lab) == oracles.abnormal(v, lab)


class TestEstimationTarget:
    def test_closest_wins(self):
        events = [ev(-50 * MIN, 300.0), ev(20 * MIN, 400.0)]
        assert co.estimation_target(0, events, NTPROBNP) == 1

    def test_outside_window(self):
        assert co.estimation_target(0, [ev(61 * MIN, 400.0)], NTPROBNP) == MISSING

    def test_boundary_inclusive(self):
        assert co.estimation_target(0, [ev(-HOUR, 400.0)], NTPROBNP) == 1
        assert co.estimation_target(0, [ev(HOUR + 1, 400.0)], NTPROBNP) == MISSING

    def test_tie_goes_to_earlier(self):
        events = [ev(-600, 400.0), ev(600, 100.0)]
        assert co.estimation_target(0, events, NTPROBNP) == 1
        events = [ev(-600, 100.0), ev(600, 400.0)]
        assert co.estimation_target(0, events, NTPROBNP) == 0

    def test_random_streams(self):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            lab = oracles.random_label(rng)
            events = oracles.random_event_stream(rng)
            assert co.estimation_target(0, events, lab) == oracles.estimation_scan(0, events, lab)


class TestMonitoringTarget:
    events = [ev(10 * MIN, 300.0), ev(45 * MIN, 400.0)]

    def test_short_horizon(self):
        assert co.monitoring_target(0, self.events, NTPROBNP, 1800) == 0

    def test_long_horizon(self):
        assert co.monitoring_target(0, self.events, NTPROBNP, 3600) == 1

    def test_event_at_ecg_time_excluded(self):
        assert co.monitoring_target(0, [ev(0, 400.0)], NTPROBNP, 1800) == MISSING

    def test_horizon_end_included(self):
        assert co.monitoring_target(0, [ev(1800, 400.0)], NTPROBNP, 1800) == 1

    def test_no_events_is_missing(self):
        assert co.monitoring_target(0, [ev(-60, 400.0)], NTPROBNP, 7200) == MISSING

    @pytest.mark.parametrize("horizon", [1800, 3600, 7200])
    def test_random_streams(self, horizon):
        rng = np.random.default_rng(horizon)
        for _ in range(1000):
            lab = oracles.random_label(rng)
            events = oracles.random_event_stream(rng)
            got = co.monitoring_target(0, events, lab, horizon)
            assert got == oracles.monitoring_scan(0, events, lab, horizon)


class TestNearestVitals:
    def test_closest_wins(self):
        vit = [ing.VitalSample("p", -5 * MIN, "heart_rate_bpm", 70.0), ing.VitalSample("p", 2 * MIN, "heart_rate_bpm", 90.0)]
        assert co.nearest_vitals(0, vit)["heart_rate_bpm"] == 90.0

    def test_outside_window(self):
        vit = [ing.VitalSample("p", 31 * MIN, "spo2_pct", 97.0)]
        assert co.nearest_vitals(0, vit)["spo2_pct"] is None

    def test_per_channel(self):
        vit = [ing.VitalSample("p", 60, "heart_rate_bpm", 70.0), ing.VitalSample("p", 1700, "sbp_mmhg", 120.0)]
        got = co.nearest_vitals(0, vit)
        assert got["heart_rate_bpm"] == 70.0 and got["sbp_mmhg"] == 120.0 and got["spo2_pct"] is None

    def test_random_streams(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            vit = oracles.random_vital_stream(rng)
            assert co.nearest_vitals(0, vit) == oracles.vitals_scan(0, vit)


def raw_row(race="asian", **fields):
    base = {f: 1.0 for f in co.IMPUTED_FIELDS}
    base.update(fields)
    return co.RawFeatures(base, race)


class TestImputation:
    def test_median_of_three(self):
        rows = [raw_row(weight_kg=w) for w in (60.0, 80.0, 100.0)] + [raw_row(weight_kg=None)]
        X, table = co.impute_features(rows, [0, 1, 2])
        col = co.FEATURE_NAMES.index("weight_kg")
        flag = len(co.FEATURE_NAMES) + co.IMPUTED_FIELDS.index("weight_kg")
        assert table["weight_kg"] == 80.0
        assert X[3, col] == 80.0 and X[3, flag] == 1.0
        assert X[:3, flag].tolist() == [0.0, 0.0, 0.0]

    def test_fully_observed_is_identity(self):
        rows = [raw_row(age=float(a)) for a in (30, 40, 50)]
        X, _ = co.impute_features(rows, [0, 1, 2])
        assert X.shape == (3, co.FEATURE_DIM)
        assert not X[:, len(co.FEATURE_NAMES):].any()
        assert X[:, 0].tolist() == [30.0, 40.0, 50.0]

    def test_test_fold_does_not_leak(self):
        rows = [raw_row(age=10.0), raw_row(age=20.0), raw_row(age=1000.0)]
        _, table = co.impute_features(rows, [0, 1])
        assert table["age"] == 15.0

    def test_all_missing_in_train(self):
        rows = [raw_row(bmi=None), raw_row(bmi=None), raw_row(bmi=25.0)]
        with pytest.raises(AllMissingInTrain):
            co.impute_features(rows, [0, 1])

    def test_missing_race_maps_to_other(self):
        X = co.apply_imputation([co.RawFeatures({f: 1.0 for f in co.IMPUTED_FIELDS}, None)], {})
        assert X[0, co.FEATURE_NAMES.index("race_other")] == 1.0
        assert X[0, [co.FEATURE_NAMES.index(f"race_{r}") for r in ing.RACES]].sum() == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.one_of(st.none(), st.floats(1, 200)), min_size=1, max_size=30).filter(lambda v: any(x is not None for x in v)))
    def test_median_matches_sort_oracle(self, values):
        rows = [raw_row(height_cm=v) for v in values]
        _, table = co.impute_features(rows, range(len(rows)))
        obs = sorted(v for v in values if v is not None)
        n = len(obs)
        expected = obs[n // 2] if n % 2 else (obs[n // 2 - 1] + obs[n // 2]) / 2
        assert table["height_cm"] == pytest.approx(expected, rel=1e-15, abs=0)


def record_patients(n_patients, per=3, seed=0):
    rng = np.random.default_rng(seed)
    out = {}
    for p in range(n_patients):
        for k in range(int(rng.integers(1, per + 1))):
            out[f"r{p:04d}_{k}"] = f"p{p:04d}"
    return out


class TestSplit:
    def test_sizes_200(self):
        rp = {f"r{i}": f"p{i}" for i in range(200)}
        split = co.split_patients(rp, seed=0)
        counts = defaultdict(int)
        for f in split.folds.values():
            counts[f] += 1
        assert (counts["train"], counts["valid"], counts["test"]) == (180, 10, 10)

    def test_deterministic(self):
        rp = record_patients(100)
        assert co.split_patients(rp, seed=3).folds == co.split_patients(rp, seed=3).folds
        assert co.split_patients(rp, seed=3).folds != co.split_patients(rp, seed=4).folds

    @pytest.mark.parametrize("seed", range(20))
    def test_patient_disjoint(self, seed):
        rp = record_patients(60, per=5, seed=seed)
        split = co.split_patients(rp, seed=seed)
        fold_of = defaultdict(set)
        for r, p in rp.items():
            fold_of[p].add(split.folds[r])
        assert all(len(f) == 1 for f in fold_of.values())

    def test_stratified(self):
        rp = {f"r{i}": f"p{i}" for i in range(400)}
        strata = {f"p{i}": ("a" if i < 200 else "b") for i in range(400)}
        split = co.split_patients(rp, seed=0, strata=strata)
        for key in "ab":
            members = [r for r in rp if strata[rp[r]] == key]
            assert sum(split.folds[r] == "test" for r in members) == 10

    def test_too_few(self):
        with pytest.raises(TooFewPatients):
            co.split_patients({f"r{i}": f"p{i}" for i in range(19)})


def matrix_with_counts(valid_pos, valid_neg, test_pos=10, test_neg=10):
    recs, folds, col = [], {}, []
    for fold, npos, nneg in (("valid", valid_pos, valid_neg), ("test", test_pos, test_neg)):
        for v in [1] * npos + [0] * nneg + [MISSING] * 3:
            rid = f"r{len(recs)}"
            recs.append(rid)
            folds[rid] = fold
            col.append(v)
    return co.TargetMatrix(recs, ["L"], np.array(col)[:, None]), co.DatasetSplit(folds)


class TestFilter:
    def test_nine_positives_dropped(self):
        assert co.filter_tasks(*matrix_with_counts(9, 10)) == []

    def test_ten_ten_retained(self):
        assert co.filter_tasks(*matrix_with_counts(10, 10, 10, 10)) == ["L"]

    def test_test_fold_also_checked(self):
        assert co.filter_tasks(*matrix_with_counts(50, 50, 10, 9)) == []

    def test_recount_oracle(self):
        rng = np.random.default_rng(0)
        n, K = 400, 12
        entries = rng.choice([0, 1, MISSING], size=(n, K), p=[0.5, 0.1, 0.4])
        recs = [f"r{i}" for i in range(n)]
        folds = dict(zip(recs, rng.choice(["train", "valid", "test"], size=n, p=[0.7, 0.15, 0.15])))
        tm = co.TargetMatrix(recs, [f"L{k}" for k in range(K)], entries)
        got = co.filter_tasks(tm, co.DatasetSplit(folds))
        expected = []
        for k in range(K):
            ok = True
            for fold in ("valid", "test"):
                vals = [entries[i, k] for i, r in enumerate(recs) if folds[r] == fold]
                ok &= vals.count(1) >= 10 and vals.count(0) >= 10
            if ok:
                expected.append(f"L{k}")
        assert got == expected


def random_cohort(seed, n_patients=120, n_records=500):
    rng = np.random.default_rng(seed)
    labels = [
        AbnormalityLabel("A_HIGH", "A", "A", "HIGH", 100.0, "u", "Ca"),
        AbnormalityLabel("A_LOW", "A", "A", "LOW", 80.0, "u", "Ca"),
        AbnormalityLabel("B_HIGH", "B", "B", "HIGH", 100.0, "u", "Re"),
    ]
    pids = [f"p{i:03d}" for i in range(n_patients)]
    ecgs, events, vitals = [], [], []
    for r in range(n_records):
        pid = pids[int(rng.integers(0, n_patients))]
        t = int(rng.integers(0, 40)) * 86_400 + int(rng.integers(0, 86_400))
        ecgs.append(ing.EcgRecord(f"r{r:04d}", pid, t, 1, np.zeros((12, 1))))
        for item in ("A", "B"):
            for e in oracles.random_event_stream(rng, t0=t, max_events=4):
                events.append(ing.LabEvent(pid, e.time, item, e.value, "u"))
        for v in oracles.random_vital_stream(rng, t0=t, max_samples=6):
            vitals.append(ing.VitalSample(pid, v.time, v.channel, v.value))
    contexts = []
    for pid in pids:
        def maybe(x):
            return None if rng.random() < 0.3 else x
        contexts.append(
            ing.PatientContext(
                pid, maybe(float(rng.integers(20, 90))), maybe(ing.SEXES[rng.integers(0, 2)]),
                maybe(ing.RACES[rng.integers(0, 5)]), maybe(float(rng.normal(27, 3))),
                maybe(float(rng.normal(75, 10))), maybe(float(rng.normal(170, 8))),
            )
        )
    events.sort()
    vitals.sort()
    return ecgs, events, vitals, contexts, labels


def slow_assembly(config, ecgs, events, vitals, contexts, labels, split):
    """Row-by-row reimplementation sharing only the split with the library."""
    ecgs = sorted(ecgs, key=lambda e: e.record_id)
    T = np.zeros((len(ecgs), len(labels)), dtype=np.int8)
    for i, e in enumerate(ecgs):
        for k, lab in enumerate(labels):
            evs = [x for x in events if x.patient_id == e.patient_id and x.item_id == lab.item_id]
            if config.mode is co.Mode.ESTIMATION:
                T[i, k] = oracles.estimation_scan(e.acquisition_time, evs, lab)
            else:
                T[i, k] = oracles.monitoring_scan(e.acquisition_time, evs, lab, config.horizon_s)
    ctx = {c.patient_id: c for c in contexts}
    raw = []
    for e in ecgs:
        c = ctx[e.patient_id]
        vit = oracles.vitals_scan(e.acquisition_time, [v for v in vitals if v.patient_id == e.patient_id])
        fields = {"age": c.age, "sex": None if c.sex is None else float(c.sex == "male")}
        fields.update(vit)
        fields.update(bmi=c.bmi, weight_kg=c.weight_kg, height_cm=c.height_cm)
        raw.append((fields, c.race or "other"))
    train = [i for i, e in enumerate(ecgs) if split.folds[e.record_id] == "train"]
    medians = {}
    for f in co.IMPUTED_FIELDS:
        obs = sorted(raw[i][0][f] for i in train if raw[i][0][f] is not None)
        n = len(obs)
        medians[f] = obs[n // 2] if n % 2 else (obs[n // 2 - 1] + obs[n // 2]) / 2
    X = np.zeros((len(ecgs), co.FEATURE_DIM))
    for i, (fields, race) in enumerate(raw):
        vals = []
        flags = []
        for f in co.IMPUTED_FIELDS:
            flags.append(float(fields[f] is None))
        row = {f: (medians[f] if fields[f] is None else fields[f]) for f in co.IMPUTED_FIELDS}
        vals = [row["age"], row["sex"]] + [float(race == r) for r in ing.RACES]
        vals += [row[ch] for ch in ing.VITAL_CHANNELS] + [row["bmi"], row["weight_kg"], row["height_cm"]]
        X[i] = vals + flags
    return T, X


class TestAssembly:
    @pytest.mark.parametrize("mode, horizon", [("ESTIMATION", None), ("MONITORING", 3600)])
    def test_matches_slow_path(self, mode, horizon):
        ecgs, events, vitals, contexts, labels = random_cohort(0)
        cfg = co.TaskConfig(mode=mode, horizon_s=horizon)
        ds = co.assemble_dataset(cfg, ecgs, events, vitals, contexts, labels, seed=1)
        T, X = slow_assembly(cfg, ecgs, events, vitals, contexts, co.build_label_space(labels), ds.split)
        np.testing.assert_array_equal(ds.targets.entries, T)
        np.testing.assert_allclose(ds.features, X, rtol=1e-15, atol=0)

    def test_modes_differ_only_in_targets(self):
        ecgs, events, vitals, contexts, labels = random_cohort(2)
        a = co.assemble_dataset(co.TaskConfig(), ecgs, events, vitals, contexts, labels, seed=0)
        b = co.assemble_dataset(co.TaskConfig(mode="MONITORING", horizon_s=7200), ecgs, events, vitals, contexts, labels, seed=0)
        np.testing.assert_array_equal(a.features, b.features)
        assert a.split.folds == b.split.folds
        assert not np.array_equal(a.targets.entries, b.targets.entries)

    def test_no_events_all_missing(self):
        ecgs, _, vitals, contexts, labels = random_cohort(3)
        ds = co.assemble_dataset(co.TaskConfig(), ecgs, [], vitals, contexts, labels)
        assert (ds.targets.entries == MISSING).all()
        assert ds.retained == []

    def test_manifest_byte_identical(self, tmp_path):
        ecgs, events, vitals, contexts, labels = random_cohort(4)
        paths = []
        for d in ("a", "b"):
            ds = co.assemble_dataset(co.TaskConfig(), ecgs, events, vitals, contexts, labels, seed=7)
            ds.waveforms = np.zeros((len(ecgs), 12, 1), dtype=np.float32)
            paths.append(co.write_dataset(ds, tmp_path / d))
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_imputation_table_recomputable(self, tmp_path):
        ecgs, events, vitals, contexts, labels = random_cohort(5)
        ds = co.assemble_dataset(co.TaskConfig(), ecgs, events, vitals, contexts, labels, seed=0)
        ds.waveforms = np.zeros((len(ecgs), 12, 1), dtype=np.float32)
        man = json.loads(co.write_dataset(ds, tmp_path).read_text())
        rows = [
            co.raw_features(
                {c.patient_id: c for c in contexts}[e.patient_id],
                co.nearest_vitals(e.acquisition_time, [v for v in vitals if v.patient_id == e.patient_id]),
            )
            for e in sorted(ecgs, key=lambda e: e.record_id)
        ]
        train = [i for i, r in enumerate(ds.records) if man["folds"][r] == "train"]
        _, table = co.impute_features(rows, train)
        assert table == man["imputation"]

    def test_target_csv_round_trip(self, tmp_path):
        tm = co.TargetMatrix(["a", "b"], ["L1", "L2"], np.array([[1, MISSING], [0, 1]]))
        tm.to_csv(tmp_path / "t.csv")
        back = co.TargetMatrix.from_csv(tmp_path / "t.csv")
        assert back.records == tm.records and back.labels == tm.labels
        np.testing.assert_array_equal(back.entries, tm.entries)
        assert (tmp_path / "t.csv").read_text() == "record_id,L1,L2\na,1,NA\nb,0,1\n"
