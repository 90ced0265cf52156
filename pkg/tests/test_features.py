import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermoformer.errors import DataError, InsufficientDataError
from thermoformer.features import (
    PAST_CHANNELS,
    BuildingStatic,
    ChannelStats,
    TimeSeriesRecord,
    assemble_windows,
    build_future_covariates,
    centered_difference,
    fit_standardizer,
    load_statics,
    past_channels,
    window_batch,
)


def make_record(t_in, building_id="b0", mode=2, start="2023-03-01T00:00:00", **overrides):
    L = len(t_in)
    rng = np.random.default_rng(len(t_in))
    cols = dict(
        t_out=rng.normal(10, 3, L),
        solar=np.abs(rng.normal(200, 100, L)),
        q_hvac=rng.normal(0, 500, L),
        q_occ=np.abs(rng.normal(400, 50, L)),
    )
    cols.update(overrides)
    stamps = np.datetime64(start, "s") + np.arange(L) * np.timedelta64(3600, "s")
    return TimeSeriesRecord(building_id, mode, "marine", stamps, np.asarray(t_in, float), **cols)


STATIC = BuildingStatic(120.0, 1.5, 0.25, 3.0, 5.0, 4.0)


def unit_standardizer(rec):
    std = fit_standardizer([rec], {rec.building_id: STATIC})
    std.past.mean[:] = 0.0
    std.past.std[:] = 1.0
    return std


# centered_difference -------------------------------------------------

def test_centered_difference_constant():
    assert centered_difference([5, 5, 5, 5], 1.0).tolist() == [0, 0, 0, 0]


def test_centered_difference_quadratic():
    d = centered_difference(np.arange(5.0) ** 2, 1.0)
    assert d[1:-1].tolist() == [2.0, 4.0, 6.0]
    assert d[0] == 1.0 and d[-1] == 7.0


def test_centered_difference_linear():
    assert centered_difference([0, 2, 4], 1.0).tolist() == [2, 2, 2]


def test_centered_difference_too_short():
    with pytest.raises(InsufficientDataError):
        centered_difference([1.0, 2.0])


@settings(max_examples=40, deadline=None)
@given(
    st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10),
    st.sampled_from([0.5, 1.0, 0.25]), st.integers(3, 30),
)
def test_centered_difference_exact_on_quadratics(a, b, c, dt, L):
    t = np.arange(L) * dt
    d = centered_difference(a * t**2 + b * t + c, dt)
    exact = 2 * a * t + b
    scale = max(1.0, abs(a) * t[-1] ** 2, abs(b) * t[-1], abs(c))
    np.testing.assert_allclose(d[1:-1], exact[1:-1], rtol=0, atol=64 * np.finfo(float).eps * scale / dt)


# calendar -------------------------------------------------------------

def test_future_covariates_midnight_jan1():
    v = build_future_covariates("2023-01-01T00:00:00")
    assert v.shape == (4,)
    assert v[0] == 0.0 and v[1] == 1.0


def test_future_covariates_six_am():
    v = build_future_covariates("2023-03-10T06:00:00")
    assert v[0] == pytest.approx(1.0, abs=1e-15)
    assert v[1] == pytest.approx(0.0, abs=1e-15)


def test_future_covariates_day_angle_jul2():
    v = build_future_covariates("2023-07-02T12:00:00")
    ang = 2 * math.pi * 182 / 365
    assert v[2] == pytest.approx(math.sin(ang), abs=1e-15)
    assert v[3] == pytest.approx(math.cos(ang), abs=1e-15)
    # day angle ~ pi: sin(pi/365) = 0.0086, cos = -0.99996
    assert v[2] == pytest.approx(0.0086, abs=5e-5) and v[3] == pytest.approx(-1.0, abs=5e-4)
    assert v[0] == pytest.approx(0.0, abs=1e-15) and v[1] == -1.0


def test_future_covariates_with_weather():
    v = build_future_covariates("2023-01-01T00:00:00", weather=[1.5, -0.5])
    assert v.shape == (6,) and v[4:].tolist() == [1.5, -0.5]


# standardizer ---------------------------------------------------------

def test_channel_stats_degenerate_floor():
    s = ChannelStats.fit([1.0, 1.0, 1.0])
    assert s.mean.tolist() == [1.0] and s.std.tolist() == [1e-8]


def test_channel_stats_population_std():
    s = ChannelStats.fit([0.0, 2.0])
    assert s.mean.tolist() == [1.0] and s.std.tolist() == [1.0]


def test_static_stats_over_buildings():
    a = make_record(np.linspace(20, 22, 10), "a")
    b = make_record(np.linspace(20, 22, 10), "b")
    statics = {
        "a": BuildingStatic(100.0, 1.5, 0.25, 3.0, 5.0, 4.0),
        "b": BuildingStatic(300.0, 1.5, 0.25, 3.0, 5.0, 4.0),
    }
    std = fit_standardizer([a, b, make_record(np.linspace(20, 22, 10), "a", mode=3)], statics)
    assert std.static.mean[0] == 200.0 and std.static.std[0] == 100.0


def test_fit_standardizer_empty():
    with pytest.raises(DataError):
        fit_standardizer([], {})


def test_standardized_training_channels_are_unit():
    rng = np.random.default_rng(0)
    recs = [make_record(20 + rng.normal(0, 1, 50).cumsum() * 0.1, f"b{i}") for i in range(3)]
    std = fit_standardizer(recs, {r.building_id: STATIC for r in recs})
    z = std.past.apply(np.concatenate([past_channels(r) for r in recs]))
    assert z.shape[1] == len(PAST_CHANNELS)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-10)


# windows --------------------------------------------------------------

def test_window_counting():
    n = 6
    rec = make_record(np.linspace(18, 21, n + 1))
    assert len(assemble_windows(rec, STATIC, unit_standardizer(rec), n)) == 1


def test_constant_temperature_zero_delta():
    rec = make_record(np.full(30, 21.0))
    assert all(w.target_delta == 0.0 for w in assemble_windows(rec, STATIC, unit_standardizer(rec), 5))


def test_hand_indexed_sample():
    rec = make_record([20.0, 21.0, 23.0])
    (w,) = assemble_windows(rec, STATIC, unit_standardizer(rec), 2)
    assert w.t_prev == 21.0 and w.target_delta == 2.0
    assert w.past.shape == (2, 10)
    assert w.past[:, 0].tolist() == [20.0, 21.0]
    assert w.past[:, 5].tolist() == [1.0, 1.0]


def test_record_too_short():
    rec = make_record(np.arange(5.0))
    with pytest.raises(InsufficientDataError):
        assemble_windows(rec, STATIC, unit_standardizer(rec), 5)


def test_window_derivative_is_windowed_centered_difference():
    rng = np.random.default_rng(3)
    rec = make_record(20 + rng.normal(size=40))
    n = 8
    batch = window_batch(rec, STATIC, unit_standardizer(rec), n)
    for i, t in enumerate(batch.target_index):
        expected = centered_difference(rec.t_in[t - n : t])
        np.testing.assert_array_equal(batch.past[i, :, 5], expected)


def test_no_leakage_from_future_values():
    rng = np.random.default_rng(4)
    base = make_record(20 + rng.normal(size=60))
    std = fit_standardizer([base], {"b0": STATIC})
    n = 12
    ref = window_batch(base, STATIC, std, n)
    for trial in range(30):
        t = int(rng.integers(n, len(base)))
        j = int(rng.integers(t, len(base)))
        ch = ["t_in", "t_out", "solar", "q_hvac", "q_occ"][trial % 5]
        pert = make_record(base.t_in.copy())
        getattr(pert, ch)[j] += rng.normal() * 10
        got = window_batch(pert, STATIC, std, n, targets=[t])
        row = t - n
        assert got.past[0].tobytes() == ref.past[row].tobytes()
        assert got.future[0].tobytes() == ref.future[row].tobytes()
        assert got.static[0].tobytes() == ref.static[row].tobytes()
        assert got.t_prev[0] == ref.t_prev[row]


def test_assemble_is_deterministic_and_ordered():
    rec = make_record(20 + np.sin(np.arange(50) / 3))
    std = unit_standardizer(rec)
    a = assemble_windows(rec, STATIC, std, 6)
    b = assemble_windows(rec, STATIC, std, 6)
    assert [w.target_index for w in a] == list(range(6, 50))
    assert all(x.past.tobytes() == y.past.tobytes() for x, y in zip(a, b))


# descriptors ----------------------------------------------------------

@pytest.mark.parametrize(
    "kw",
    [dict(floor_area=0.0), dict(aspect_ratio=-1.0), dict(wwr=1.5), dict(wall_r=0.0), dict(internal_gain_density=-1)],
)
def test_building_static_invariants(kw):
    base = dict(floor_area=100.0, aspect_ratio=1.0, wwr=0.2, wall_r=2.0, roof_r=4.0, internal_gain_density=3.0)
    base.update(kw)
    with pytest.raises(DataError):
        BuildingStatic(**base)


def test_statics_json(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"x": dict(floor_area=100, aspect_ratio=1, wwr=0.2, wall_r=2, roof_r=4, internal_gain_density=3)}))
    assert load_statics(p)["x"].floor_area == 100.0
    p.write_text(json.dumps({"x": dict(floor_area=100)}))
    with pytest.raises(DataError, match="aspect_ratio"):
        load_statics(p)


def test_record_rejects_irregular_timestamps():
    stamps = np.array(["2023-01-01T00", "2023-01-01T01", "2023-01-01T03"], dtype="datetime64[s]")
    with pytest.raises(DataError):
        TimeSeriesRecord("b", 1, "cold", stamps, *[np.zeros(3)] * 5)
