import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fednilm.data import ApplianceThreshold, LoadSeries, NormalizationStats, SynthConfig, make_windows, synth_generate
from fednilm.errors import DimensionError, ZeroDenominatorError
from fednilm.metrics import (
    ConfusionCounts,
    MetricReport,
    compare,
    confusion,
    evaluate_model,
    f1,
    gap,
    improvement,
    mae,
)
from fednilm.model import ArchitectureSpec, Dense, ParameterVector, zeros_params

bools = st.lists(st.booleans(), min_size=1, max_size=200)


def naive_mae(a, b):
    total = 0.0
    for x, y in zip(a, b):
        total += abs(x - y)
    return total / len(a)


def test_mae_examples():
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0
    assert mae([3.0, 2.0], [1.0, 2.0]) == 1.0
    with pytest.raises(DimensionError):
        mae([1.0], [1.0, 2.0])
    with pytest.raises(DimensionError):
        mae([], [])


def test_mae_vs_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 300))
        a, b = rng.uniform(0, 3000, n), rng.uniform(0, 3000, n)
        assert abs(mae(a, b) - naive_mae(a, b)) <= 1e-12 * max(1.0, naive_mae(a, b))


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=50), st.floats(-1e3, 1e3), st.integers(0, 2**32 - 1))
def test_mae_laws(xs, c, seed):
    a = np.asarray(xs)
    b = a + np.random.default_rng(seed).normal(0, 10, a.size)
    assert mae(a, b) == mae(b, a)
    assert mae(a, a) == 0
    assert abs(mae(a + c, b + c) - mae(a, b)) <= 1e-9 * max(1.0, abs(c), np.max(np.abs(a)))


def test_confusion_examples():
    assert confusion([1, 1, 1], [1, 1, 1]) == ConfusionCounts(3, 0, 0, 0)
    assert confusion([1, 0, 1, 0], [1, 1, 0, 0]) == ConfusionCounts(tp=1, tn=1, fp=1, fn=1)
    with pytest.raises(DimensionError):
        confusion([1], [1, 0])


@given(bools, st.integers(0, 2**32 - 1))
def test_confusion_partition_and_f1_range(pred, seed):
    truth = np.random.default_rng(seed).random(len(pred)) > 0.5
    c = confusion(pred, truth)
    assert c.total == len(pred)
    value, degenerate = f1(c)
    assert 0 <= value <= 1
    assert (value == 1) == (c.fp == 0 and c.fn == 0 and c.tp > 0)
    assert degenerate == (2 * c.tp + c.fp + c.fn == 0)


def test_f1_examples():
    assert f1(ConfusionCounts(5, 0, 0, 0)) == (1.0, False)
    assert f1(ConfusionCounts(1, 0, 1, 1)) == (0.5, False)
    assert f1(ConfusionCounts(0, 7, 0, 0)) == (0.0, True)


def test_table_row_indicators():
    imp_mae, imp_f = improvement(56.880, 15.851, 0.148, 0.510)
    gap_mae, gap_f = gap(15.438, 15.851, 0.512, 0.510)
    assert imp_mae == pytest.approx(72.133, abs=1e-3)
    assert imp_f == pytest.approx(244.595, abs=1e-3)
    assert gap_mae == pytest.approx(-2.675, abs=1e-3)
    assert gap_f == pytest.approx(-0.391, abs=1e-3)
    assert improvement(327.417, 85.200, 1, 1)[0] == pytest.approx(73.978, abs=1e-3)


def test_indicator_identities_and_errors():
    assert improvement(10.0, 10.0, 0.5, 0.5) == (0.0, 0.0)
    assert gap(10.0, 10.0, 0.5, 0.5) == (0.0, 0.0)
    with pytest.raises(ZeroDenominatorError):
        improvement(0.0, 1.0, 0.5, 0.5)
    with pytest.raises(ZeroDenominatorError):
        gap(1.0, 1.0, 0.0, 0.5)
    r = compare(10.0, 5.0, 0.0, 0.0, 0.5, 0.5, strict=False)
    assert r.imp_mae_pct == 50.0 and math.isnan(r.gap_mae_pct) and math.isnan(r.imp_f_pct)


pos = st.floats(1e-3, 1e4)


@given(pos, pos, pos, st.floats(1e-3, 1.0), st.floats(0, 1.0), st.floats(1e-3, 1.0))
def test_compare_reproducible_from_echo(loc, fed, cent, floc, ffed, fcent):
    r = compare(loc, fed, cent, floc, ffed, fcent)
    checks = [
        (r.imp_mae_pct, 100 * (r.avg_mae_loc - r.mae_fed) / r.avg_mae_loc),
        (r.imp_f_pct, 100 * (r.f_fed - r.avg_f_loc) / r.avg_f_loc),
        (r.gap_mae_pct, 100 * (r.mae_cent - r.mae_fed) / r.mae_cent),
        (r.gap_f_pct, 100 * (r.f_fed - r.f_cent) / r.f_cent),
    ]
    for got, want in checks:
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want))


def test_report_json_round_trip():
    rep = MetricReport(float("nan"), 0.5, 0.5, 0.5, ConfusionCounts(1, 1, 1, 1), 4)
    d = rep.to_dict()
    assert d["mae"] is None
    back = MetricReport.from_dict(d)
    assert math.isnan(back.mae) and back.counts == rep.counts


def _ident_spec():
    # W=1 linear model: prediction = w * input + b
    return ArchitectureSpec(1, (Dense(1, 1, "linear"),))


def test_evaluate_perfect_predictor():
    spec = _ident_spec()
    vals = np.array([0.0, 0.0, 500.0, 800.0, 0.0])
    stats = NormalizationStats(0.0, 1.0)
    s = LoadSeries("m", vals, 8.0)
    a = LoadSeries("a", vals, 8.0, 0, "microwave")
    ds = make_windows(s, a, 1, ApplianceThreshold("microwave", 200), stats, NormalizationStats(0.0, 1.0))
    p = ParameterVector(np.array([1.0, 0.0], np.float32), spec.spec_hash)
    rep = evaluate_model(spec, p, ds, ApplianceThreshold("microwave", 200))
    assert rep.mae == 0 and rep.f1 == 1.0
    assert rep.counts.total == ds.N


def test_evaluate_zero_predictor_closed_form():
    P = 1000.0
    cfg = SynthConfig(4000, ({"name": "x", "on_power": P, "duty_cycle": 0.25, "cycle_len": 100},), seed=3)
    total, (app,) = synth_generate(cfg)
    W = 5
    ds = make_windows(total, app, W, ApplianceThreshold("x", 10), NormalizationStats(200, 400))
    spec = ArchitectureSpec(W, (Dense(W, 1, "linear"),))
    rep = evaluate_model(spec, zeros_params(spec), ds, ApplianceThreshold("x", 10))
    # N = 3996 windows; on fraction is 0.25 up to one partial cycle
    assert rep.mae == pytest.approx(0.25 * P, abs=P * 100 / ds.N)
    assert rep.recall == 0 and rep.f1 == 0
    assert rep.counts.total == ds.N


def test_evaluate_clamps_negative_watts():
    spec = _ident_spec()
    vals = np.array([0.0, 0.0, 0.0])
    ds = make_windows(LoadSeries("m", vals + 1, 8.0), LoadSeries("a", vals, 8.0, 0, "k"), 1,
                      ApplianceThreshold("k", 1), NormalizationStats(0, 1))
    p = ParameterVector(np.array([0.0, -50.0], np.float32), spec.spec_hash)
    assert evaluate_model(spec, p, ds, ApplianceThreshold("k", 1)).mae == 0
