import numpy as np
import pytest

from macrogrid import cases
from macrogrid.dynsim import (BrakeInsertion, BranchTrip, GenTrip, Pulse, SimulationError,
                              SimulationModel, TimeSeriesSet, ringdown_window, simulate)
from macrogrid.grid import ac_powerflow

BRAKE = BrakeInsertion("7", 200.0, 1.0, 0.5)


def to_pu(ts, name, f0=60.0, base=1000.0):
    unit = ts.units.get(name, "")
    scale = {"Hz": f0, "MW": base, "Mvar": base}.get(unit, 1.0)
    return ts[name] / scale


@pytest.fixture(scope="module")
def two_area():
    return cases.two_area()


@pytest.fixture(scope="module")
def brake_run(two_area):
    return simulate(two_area, events=[BRAKE], duration=20.0, dt=2e-3)


def test_flat_run(two_area):
    ts = simulate(two_area, duration=20.0, dt=2e-3)
    for n in ts.names:
        assert np.max(np.abs(ts[n] - ts[n][0])) <= 1e-9, n


def test_brake_returns_to_equilibrium(two_area):
    ts = simulate(two_area, events=[BrakeInsertion("7", 1200.0, 1.0, 0.5)], duration=40.0, dt=2e-3)
    for n in ts.names:
        y = to_pu(ts, n)
        assert np.max(np.abs(y[-200:] - y[0])) <= 1e-4, n


def test_step_halving(two_area, brake_run):
    fine = simulate(two_area, events=[BRAKE], duration=20.0, dt=1e-3)
    for n in brake_run.names:
        assert np.max(np.abs(to_pu(brake_run, n) - to_pu(fine, n))) < 1e-5, n


def test_rk4_order(two_area):
    # event times must fall on every step grid
    ch = ["gen:G1:speed", "bus:7:freq"]
    runs = [simulate(two_area, events=[BRAKE], duration=3.0, dt=h, output_rate=None, channels=ch)
            for h in (1e-2, 5e-3, 2.5e-3)]
    for n in ch:
        e1 = np.max(np.abs(runs[0][n] - runs[1][n][::2]))
        e2 = np.max(np.abs(runs[1][n][::2] - runs[2][n][::4]))
        assert np.log2(e1 / e2) >= 3.0, n


def test_deterministic(two_area):
    a = simulate(two_area, events=[BRAKE], duration=5.0, dt=2e-3, seed=7)
    b = simulate(two_area, events=[BRAKE], duration=5.0, dt=2e-3, seed=7)
    for n in a.names:
        np.testing.assert_array_equal(a[n], b[n])


def test_event_order_isolation(two_area):
    evs = [BranchTrip("L8", 3.0), BRAKE, GenTrip("G4", 3.0)]
    a = simulate(two_area, events=evs, duration=6.0, dt=2e-3)
    b = simulate(two_area, events=evs[::-1], duration=6.0, dt=2e-3)
    c = simulate(two_area, events=[evs[1], evs[0], evs[2]], duration=6.0, dt=2e-3)
    for n in a.names:
        np.testing.assert_array_equal(a[n], b[n])
        np.testing.assert_array_equal(a[n], c[n])


def test_requested_channels_only(two_area):
    ts = simulate(two_area, duration=1.0, dt=2e-3, channels=["bus:7:freq", "gen:G2:speed"])
    assert ts.names == ["bus:7:freq", "gen:G2:speed"]
    assert ts.units == {"bus:7:freq": "Hz", "gen:G2:speed": "pu"}
    assert len(ts) == 100


def test_unknown_channel_and_event(two_area):
    with pytest.raises(ValueError):
        simulate(two_area, duration=1.0, channels=["bus:nope:freq"])
    with pytest.raises(ValueError):
        simulate(two_area, events=[GenTrip("G99", 0.5)], duration=1.0)
    with pytest.raises(ValueError):
        simulate(two_area, events=[BrakeInsertion("7", 100.0, 0.5, 0.0)], duration=1.0)


def test_divergence_reports_time():
    net = cases.single_machine(load=0.8, damping=-40.0)
    with pytest.raises(SimulationError) as exc:
        simulate(net, events=[BrakeInsertion("2", 200.0, 0.1, 0.1)], duration=60.0, dt=5e-3)
    assert exc.value.time is not None and exc.value.time > 0.1
    assert "t =" in str(exc.value)


def test_ringdown_window_arithmetic():
    ts = TimeSeriesSet(0.0, 0.01, {"y": np.zeros(3001)})
    w = ringdown_window(ts, BrakeInsertion("x", 1.0, 5.0, 0.5))
    assert w.t0 == pytest.approx(5.5)
    assert w.t_end == pytest.approx(25.5)
    assert ringdown_window(ts, GenTrip("g", 10.0)).t0 == pytest.approx(10.0)
    with pytest.raises(ValueError, match="past"):
        ringdown_window(ts, GenTrip("g", 12.0))
    assert ringdown_window(ts, Pulse("c", 1.0, 2.0, 0.25), 5.0).t0 == pytest.approx(2.25)


def test_csv_round_trip(tmp_path, brake_run):
    p = brake_run.to_csv(tmp_path / "ts.csv")
    back = TimeSeriesSet.from_csv(p)
    assert back.names == brake_run.names
    assert back.dt == brake_run.dt
    assert back.units == brake_run.units
    for n in back.names:
        np.testing.assert_array_equal(back[n], brake_run[n])
    assert back.meta["events"][0]["kind"] == "brake_insertion"


def test_pulse_moves_converter_power():
    n1, n2, mt = cases.three_terminal()
    ts = simulate(n1, n2, mt, events=[Pulse("A", 50.0, 0.5, 1.0)], duration=3.0, dt=2e-3,
                  channels=["conv:A:p", "conv:A:dpref"])
    p = ts["conv:A:p"]
    i = int(round(1.4 / ts.dt))
    assert p[i] - p[0] == pytest.approx(50.0, rel=0.05)
    assert ts["conv:A:dpref"][i] == pytest.approx(50.0)


def test_model_without_mtdc_matches_powerflow(two_area):
    m = SimulationModel(two_area)
    pf = ac_powerflow(two_area, tol=1e-10)
    np.testing.assert_allclose(m.grid.v0, pf.v, atol=1e-10)
