from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fednilm.data import (
    ApplianceThreshold,
    CsvSchema,
    LoadSeries,
    NormalizationStats,
    SynthConfig,
    align_and_resample,
    concat_datasets,
    ingest_csv,
    load_dataset,
    make_windows,
    normalize_fit,
    partition_owners,
    rect_wave,
    save_dataset,
    synth_generate,
)
from fednilm.errors import DataError, DegenerateStatsError, InsufficientDataError, ParseError

FIX = Path(__file__).parent / "fixtures"
KETTLE = ApplianceThreshold("kettle", 1400.0)


def series(values, appliance=None, period=8.0):
    return LoadSeries("m", np.asarray(values, dtype=float), period, 0, appliance)


# --- ingestion -------------------------------------------------------------------


def test_ingest_refit_header():
    schema = CsvSchema("Unix", "Aggregate", {"Appliance4": "dishwasher"})
    total, dw = ingest_csv(FIX / "refit_small.csv", schema)
    assert total.kind == "total"
    assert dw.kind == "appliance(dishwasher)"
    assert list(dw.values) == [0, 25, 2150, 2161, 9]
    assert list(total.values) == [512, 540, 2690, 2701, 530]
    assert total.period_s == 8.0
    assert total.start_epoch_s == 1383264000


def test_ingest_three_rows(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("t,agg,app\n0,1,0\n1,2,1\n2,3,0\n")
    out = ingest_csv(p, CsvSchema("t", "agg", {"app": "kettle"}))
    assert len(out) == 2 and all(len(s) == 3 for s in out)


def test_ingest_bad_cell_cites_line():
    with pytest.raises(ParseError) as err:
        ingest_csv(FIX / "bad_cell.csv", CsvSchema("Unix", "Aggregate", {"Kettle": "kettle"}))
    assert err.value.line == 3
    assert "line 3" in str(err.value)


def test_ingest_rejects_negative_and_non_monotonic(tmp_path):
    p = tmp_path / "neg.csv"
    p.write_text("t,agg\n0,1\n1,-2\n")
    with pytest.raises(ParseError) as err:
        ingest_csv(p, CsvSchema("t", "agg"))
    assert err.value.line == 3
    p.write_text("t,agg\n0,1\n5,2\n5,3\n")
    with pytest.raises(ParseError) as err:
        ingest_csv(p, CsvSchema("t", "agg"))
    assert err.value.line == 4


def test_ingest_missing_column():
    with pytest.raises(DataError):
        ingest_csv(FIX / "refit_small.csv", CsvSchema("Unix", "Aggregate", {"Appliance99": "x"}))


def test_ingest_is_deterministic():
    schema = CsvSchema("Unix", "Aggregate", {"Appliance4": "dishwasher"})
    a = ingest_csv(FIX / "refit_small.csv", schema)
    b = ingest_csv(FIX / "refit_small.csv", schema)
    stats = NormalizationStats(600.0, 900.0)
    da = make_windows(a[0], a[1], 3, ApplianceThreshold("dishwasher", 10), stats)
    db = make_windows(b[0], b[1], 3, ApplianceThreshold("dishwasher", 10), stats)
    assert da.inputs.tobytes() == db.inputs.tobytes()
    assert da.target_power.tobytes() == db.target_power.tobytes()


def test_load_series_rejects_bad_values():
    with pytest.raises(DataError):
        series([1.0, -1.0])
    with pytest.raises(DataError):
        series([1.0, np.nan])
    with pytest.raises(DataError):
        series([])


# --- alignment -------------------------------------------------------------------


def test_align_uniform_pair_unchanged():
    a, b = series([1, 2, 3, 4]), series([0, 5, 0, 5], "kettle")
    out = align_and_resample(a, b, 8.0, 30.0)
    assert np.array_equal(out.total.values, a.values)
    assert np.array_equal(out.appliance.values, b.values)
    assert out.truncated_at_s is None and out.dropped_s == 0


def test_align_fills_short_gap_and_cuts_long_gap():
    total, kettle = ingest_csv(FIX / "gappy.csv", CsvSchema("Unix", "Aggregate", {"Kettle": "kettle"}))
    out = align_and_resample(total, kettle, 8.0, 30.0)
    # grid 0..48 s: 7 samples, the missing t=24 repeats t=16
    assert list(out.total.values) == [100, 110, 2100, 2100, 2120, 130, 140]
    assert list(out.appliance.values) == [0, 0, 2000, 2000, 2000, 0, 0]
    assert out.truncated_at_s == 48.0
    assert out.dropped_s == 116.0 - 48.0


def test_align_gap_of_twice_max_gap():
    ts = np.array([0, 10, 20, 30, 90, 100], dtype=float)  # 60 s hole, max_gap 30
    a = LoadSeries("a", np.arange(6.0), 10.0, 0, None, ts)
    b = LoadSeries("b", np.arange(6.0) * 2, 10.0, 0, "kettle", ts)
    out = align_and_resample(a, b, 10.0, 30.0)
    assert len(out.total) == 4
    assert list(out.appliance.values) == [0, 2, 4, 6]


def test_align_no_overlap():
    a = LoadSeries("a", [1.0, 1.0], 1.0, 0, None, np.array([0.0, 1.0]))
    b = LoadSeries("b", [1.0, 1.0], 1.0, 0, "x", np.array([5.0, 6.0]))
    with pytest.raises(DataError):
        align_and_resample(a, b, 1.0, 30.0)


# --- normalization and windows -------------------------------------------------------


def test_normalize_examples():
    s = normalize_fit([0.0, 2.0])
    assert (s.mean, s.std) == (1.0, 1.0)
    with pytest.raises(DegenerateStatsError):
        normalize_fit([5, 5, 5])


@given(st.lists(st.floats(0, 1e5), min_size=2, max_size=200).filter(lambda xs: np.std(xs) > 1e-3))
def test_zscore_moments(xs):
    s = normalize_fit(xs)
    z = s.apply(xs)
    assert abs(np.mean(z)) < 1e-9
    assert abs(np.std(z) - 1) < 1e-9
    assert np.allclose(s.invert(z), xs, rtol=1e-9, atol=1e-6)


def test_windows_single_and_index_arithmetic():
    W = 599
    vals = np.arange(601, dtype=float)
    ds = make_windows(series(vals), series(vals, "kettle"), W, KETTLE, NormalizationStats(0, 1))
    assert ds.N == 3
    assert ds.target_power[0] == 299 and ds.target_power[2] == 301
    one = make_windows(series(vals[:W]), series(vals[:W], "kettle"), W, KETTLE, NormalizationStats(0, 1))
    assert one.N == 1 and one.target_power[0] == 299


def test_threshold_boundary_is_off():
    app = series([0, 1400, 1400.5], "kettle")
    ds = make_windows(series([1, 2, 3]), app, 1, KETTLE, NormalizationStats(0, 1))
    assert list(ds.target_on) == [0, 0, 1]


def test_window_errors():
    with pytest.raises(DataError):
        make_windows(series([1, 2, 3, 4]), series([1, 2, 3, 4], "k"), 2, KETTLE, NormalizationStats(0, 1))
    with pytest.raises(InsufficientDataError):
        make_windows(series([1, 2]), series([1, 2], "k"), 3, KETTLE, NormalizationStats(0, 1))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40).map(lambda k: 2 * k - 1), st.integers(0, 60), st.integers(0, 2**32 - 1))
def test_window_laws(W, extra, seed):
    T = W + extra
    rng = np.random.default_rng(seed)
    tot = rng.uniform(0, 3000, T)
    app = np.round(rng.uniform(0, 3000, T), 1)
    stats = NormalizationStats(1000.0, 500.0)
    ds = make_windows(series(tot), series(app, "kettle"), W, KETTLE, stats)
    assert ds.N == T - W + 1
    idx = np.arange(ds.N) + W // 2
    assert np.array_equal(ds.target_power, app[idx].astype(np.float32))
    assert np.array_equal(ds.target_on, (ds.target_power > KETTLE.watts).astype(np.uint8))
    assert np.allclose(ds.inputs[:, 0], stats.apply(tot[: ds.N]), rtol=1e-6, atol=1e-6)


def test_partition_examples():
    vals = np.arange(12, dtype=float)
    ds = make_windows(series(vals), series(vals, "kettle"), 3, KETTLE, NormalizationStats(0, 1))
    assert ds.N == 10
    a, b = partition_owners(ds, 2, 5)
    assert list(a.target_power) == [1, 2, 3, 4, 5]
    assert list(b.target_power) == [6, 7, 8, 9, 10]
    with pytest.raises(InsufficientDataError):
        partition_owners(ds, 3, 4)


@given(st.integers(1, 6), st.integers(1, 10), st.integers(0, 10))
def test_partition_disjoint_cover(K, s, leftover):
    n = K * s + leftover
    vals = np.arange(n + 2, dtype=float)
    ds = make_windows(series(vals), series(vals, "kettle"), 3, KETTLE, NormalizationStats(0, 1))
    parts = partition_owners(ds, K, s)
    seen = []
    for p in parts:
        ids = [int(v) - 1 for v in p.target_power]
        assert ids == sorted(ids)
        seen.extend(ids)
    assert len(seen) == len(set(seen)) == K * s
    assert set(seen) == set(range(K * s))


def test_concat_round_trip():
    vals = np.arange(20, dtype=float)
    ds = make_windows(series(vals), series(vals, "kettle"), 5, KETTLE, NormalizationStats(0, 1))
    back = concat_datasets(partition_owners(ds, 4, 4))
    assert np.array_equal(back.inputs, ds.inputs)


# --- synthetic ---------------------------------------------------------------------


def test_synth_single_appliance_noiseless():
    cfg = SynthConfig(500, ({"name": "kettle", "on_power": 2000.0, "duty_cycle": 0.2, "cycle_len": 50},))
    total, (kettle,) = synth_generate(cfg)
    assert np.array_equal(total.values, kettle.values)


def test_rect_wave_on_count():
    w = rect_wave(1000, 1.0, 0.25, 100, phase=37)
    assert int(w.sum()) == 250


def test_synth_deterministic_and_noise_positive():
    apps = ({"name": "a", "on_power": 100.0, "duty_cycle": 0.5, "cycle_len": 10},)
    cfg = SynthConfig(300, apps, noise_std=50.0, seed=9)
    t1, a1 = synth_generate(cfg)
    t2, a2 = synth_generate(cfg)
    assert t1.values.tobytes() == t2.values.tobytes()
    assert np.all(t1.values >= a1[0].values)
    with pytest.raises(DataError):
        synth_generate(SynthConfig(10, ({"name": "a", "on_power": 1.0, "duty_cycle": 1.0, "cycle_len": 4},)))


def test_dataset_cache_round_trip(tmp_path):
    vals = np.linspace(0, 3000, 40)
    ds = make_windows(series(vals), series(vals[::-1].copy(), "kettle"), 7, KETTLE,
                      NormalizationStats(1500, 800), NormalizationStats(10, 20))
    path = save_dataset(tmp_path / "d.fnds", ds)
    back = load_dataset(path)
    for name in ("inputs", "target_power", "target_power_norm", "target_on"):
        assert getattr(back, name).tobytes() == getattr(ds, name).tobytes()
    assert back.stats == ds.stats and back.target_stats == ds.target_stats
    raw = path.read_bytes()
    assert raw[:8] == b"FNLMDS01"
    assert int.from_bytes(raw[8:16], "little") == 7
    assert int.from_bytes(raw[16:24], "little") == ds.N
    path.write_bytes(raw[:-1])
    with pytest.raises(DataError):
        load_dataset(path)
