import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hevlab.cycle_io import (CycleError, DriveCycle, ExpertPolicy, load_cycle, load_expert,
                             resample, save_cycle, save_expert, synth_cycle)


def test_accel_is_forward_difference_with_zero_tail():
    c = DriveCycle("c", 1.0, [0.0, 2.0, 5.0, 5.0])
    assert c.accel.tolist() == [2.0, 3.0, 0.0, 0.0]
    c2 = DriveCycle("c", 0.5, [0.0, 1.0, 1.0])
    assert c2.accel.tolist() == [2.0, 0.0, 0.0]


def test_cycle_arrays_are_read_only():
    c = DriveCycle("c", 1.0, [0.0, 1.0])
    with pytest.raises(ValueError):
        c.speed[0] = 3.0


@pytest.mark.parametrize("speed,dt", [([], 1.0), ([0.0, -1.0], 1.0), ([0.0, 1.0], 0.0),
                                      ([0.0, np.nan], 1.0)])
def test_invalid_cycles_rejected(speed, dt):
    with pytest.raises(CycleError):
        DriveCycle("bad", dt, speed)


def test_distance_is_trapezoidal():
    c = DriveCycle("c", 2.0, [0.0, 10.0, 10.0])
    assert c.distance == pytest.approx(10.0 + 20.0)
    assert c.duration == 4.0


def test_resample_linear():
    out = resample(np.array([0.0, 2.0]), np.array([0.0, 4.0]), 0.5)
    assert out.tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]


def test_cycle_csv_round_trip(tmp_path):
    c = synth_cycle("urban_like", 120, seed=3)
    path = tmp_path / "c.csv"
    save_cycle(c, path)
    back = load_cycle(path)
    assert np.array_equal(back.speed, c.speed)
    assert back.name == "c"


def test_load_cycle_resamples(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("t,v\n0,0\n2,4\n4,4\n")
    c = load_cycle(path, dt=1.0)
    assert c.speed.tolist() == [0.0, 2.0, 4.0, 4.0, 4.0]


@pytest.mark.parametrize("body,match", [
    ("x,y\n0,0\n1,1\n", "header"),
    ("t,v\n0,0\n1,abc\n", "non-numeric"),
    ("t,v\n0,0\n", "at least 2"),
    ("t,v\n0,0\n0,1\n", "increasing"),
    ("t,v\n0,0\n1,-1\n", "negative"),
])
def test_malformed_cycle_files(tmp_path, body, match):
    path = tmp_path / "c.csv"
    path.write_text(body)
    with pytest.raises(CycleError, match=match):
        load_cycle(path)


def test_missing_cycle_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cycle(tmp_path / "nope.csv")


def test_expert_round_trip_in_kw(tmp_path):
    c = DriveCycle("c", 1.0, np.zeros(4))
    e = ExpertPolicy("c", 1.0, [0.0, 1500.0, 57000.0, 20000.0])
    path = tmp_path / "e.csv"
    save_expert(e, path)
    assert path.read_text().splitlines()[0] == "t,pe_kw"
    back = load_expert(path, c)
    assert np.allclose(back.engine_power, e.engine_power, rtol=0, atol=1e-9)


def test_expert_length_and_range_checked(tmp_path):
    c = DriveCycle("c", 1.0, np.zeros(4))
    path = tmp_path / "e.csv"
    path.write_text("t,pe_kw\n0,0\n1,0\n2,0\n")
    with pytest.raises(CycleError, match="samples"):
        load_expert(path, c)
    path.write_text("t,pe_kw\n0,0\n1,0\n2,60\n3,0\n")
    with pytest.raises(CycleError, match="outside"):
        load_expert(path, c)


@pytest.mark.parametrize("kind", ["pulse", "urban_like", "highway_like"])
def test_synthetic_cycles_bounded_and_deterministic(kind):
    a = synth_cycle(kind, 600, seed=4)
    b = synth_cycle(kind, 600, seed=4)
    assert np.array_equal(a.speed, b.speed)
    assert len(a) == 600
    assert a.speed.min() >= 0 and a.speed.max() <= 35.0
    assert np.abs(a.accel).max() <= 3.0 + 1e-9


def test_pulse_template_shape():
    c = synth_cycle("pulse", 120)
    assert c.speed[0] == 0.0 and c.speed[10] == 15.0 and c.speed[59] == 0.0
    assert np.array_equal(c.speed[:60], c.speed[60:])


def test_highway_ends_at_rest_and_urban_stays_slow():
    assert synth_cycle("highway_like", 600, seed=1).speed[-1] == 0.0
    assert synth_cycle("urban_like", 600, seed=1).speed.max() <= 20.0


def test_synth_rejects_unknown_kind_and_short_duration():
    with pytest.raises(CycleError):
        synth_cycle("rally")
    with pytest.raises(CycleError):
        synth_cycle("pulse", 30)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 40, allow_nan=False), min_size=2, max_size=50),
       st.sampled_from([0.5, 1.0, 2.0]))
def test_accel_integrates_back_to_speed(speed, dt):
    c = DriveCycle("h", dt, speed)
    rebuilt = c.speed[0] + np.concatenate(([0.0], np.cumsum(c.accel[:-1]) * dt))
    assert np.allclose(rebuilt, c.speed, atol=1e-9)
