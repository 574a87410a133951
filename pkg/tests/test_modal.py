import numpy as np
import pytest
from hypothesis import given, strategies as st

from macrogrid.dynsim import TimeSeriesSet
from macrogrid.modal import (Mode, ModalError, analyze_ringdown, damping_report, match_modes,
                             matrix_pencil, mode_shapes, modes_to_json, preprocess, prony,
                             synthesize, wrap_deg)

DT = 0.1
T = np.arange(200) * DT                      # 20 s at 10 Hz
SINGLE = np.exp(-0.05 * T) * np.cos(2 * np.pi * 0.25 * T)
ZETA_SINGLE = 0.05 / np.hypot(0.05, 2 * np.pi * 0.25)

# sigma = zeta w / sqrt(1 - zeta^2) with zeta = 0.034 at 0.84 Hz
SIGMA_084 = 0.034 * 2 * np.pi * 0.84 / np.sqrt(1 - 0.034 ** 2)
T2 = np.arange(300) * DT


def two_mode(t=T2):
    return (np.exp(-SIGMA_084 * t) * np.cos(2 * np.pi * 0.84 * t)
            + 0.5 * np.exp(-0.3 * t) * np.cos(2 * np.pi * 0.30 * t))


def test_zeta_consistency_fixture():
    m = Mode.from_pole(complex(-0.266, 4.69))
    assert m.damping_ratio == pytest.approx(0.05662541607236088, rel=1e-12)
    assert m.freq_hz == pytest.approx(0.7464366831009892, rel=1e-12)


@given(f=st.floats(0.0, 5.0), s=st.floats(-2.0, 5.0))
def test_zeta_identity(f, s):
    m = Mode(f, s)
    assert m.damping_ratio * np.hypot(s, 2 * np.pi * f) == pytest.approx(s, abs=1e-12)


@pytest.mark.parametrize("est", [prony, matrix_pencil])
def test_single_mode_exact(est):
    m = est(SINGLE, dt=DT).dominant()
    assert m.freq_hz == pytest.approx(0.25, rel=1e-6)
    assert m.sigma == pytest.approx(0.05, rel=1e-6)
    assert m.damping_ratio == pytest.approx(ZETA_SINGLE, rel=1e-6)
    assert round(m.damping_ratio, 4) == 0.0318


@pytest.mark.parametrize("est", [prony, matrix_pencil])
def test_two_modes(est):
    ms = est(two_mode(), dt=DT)
    a, b = ms.nearest(0.84), ms.nearest(0.30)
    assert a.freq_hz == pytest.approx(0.84, rel=1e-6)
    assert a.damping_ratio == pytest.approx(0.034, rel=1e-6)
    assert b.freq_hz == pytest.approx(0.30, rel=1e-6)
    assert b.sigma == pytest.approx(0.3, rel=1e-6)
    assert ms.dominant() is a


def test_cross_method_agreement():
    p = prony(two_mode(), dt=DT)
    q = matrix_pencil(two_mode(), dt=DT)
    for f in (0.84, 0.30):
        assert p.nearest(f).freq_hz == pytest.approx(q.nearest(f).freq_hz, abs=1e-4)
        assert p.nearest(f).sigma == pytest.approx(q.nearest(f).sigma, abs=1e-4)


@pytest.mark.parametrize("est,kw", [(prony, {"rank": 4}), (matrix_pencil, {"order": 4})],
                         ids=["prony", "mp"])
def test_noisy_40db(est, kw):
    y0 = two_mode()
    noise_std = np.sqrt(np.mean(y0 ** 2) / 10 ** 4)
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = est(y0 + noise_std * rng.standard_normal(len(y0)), dt=DT, **kw).nearest(0.84)
        assert m.freq_hz == pytest.approx(0.84, rel=0.005)
        assert m.damping_ratio == pytest.approx(0.034, rel=0.10)


@given(freqs=st.lists(st.floats(0.1, 2.0), min_size=1, max_size=4, unique=True),
       sigmas=st.lists(st.floats(0.01, 0.5), min_size=4, max_size=4),
       phases=st.lists(st.floats(-np.pi, np.pi), min_size=4, max_size=4))
def test_exact_recovery_and_reconstruction(freqs, sigmas, phases):
    freqs = sorted(freqs)
    # keep modes resolvable on a 30 s window
    if len(freqs) > 1 and np.min(np.diff(freqs)) < 0.05:
        return
    t = np.arange(400) * 0.05
    y = sum(np.exp(-s * t) * np.cos(2 * np.pi * f * t + p)
            for f, s, p in zip(freqs, sigmas, phases))
    for est in (prony(y, dt=0.05, expected_modes=len(freqs)), matrix_pencil(y, dt=0.05)):
        assert len(est) == len(freqs)
        for f, s in zip(freqs, sigmas):
            m = est.nearest(f)
            assert m.freq_hz == pytest.approx(f, rel=1e-6)
            assert m.sigma == pytest.approx(s, rel=1e-6)
        rec = synthesize(est, len(y), 0.05)
        assert np.sqrt(np.mean((rec - y) ** 2) / np.mean(y ** 2)) < 1e-6
        assert est.rel_error < 1e-6


def test_growing_mode_kept_and_flagged():
    y = np.exp(0.05 * T) * np.cos(2 * np.pi * 0.4 * T)
    m = matrix_pencil(y, dt=DT).dominant()
    assert m.sigma == pytest.approx(-0.05, rel=1e-6)
    assert "growing" in m.flags
    assert damping_report([m])[0].unstable


def test_errors():
    with pytest.raises(ModalError, match="no modes"):
        matrix_pencil(np.zeros(100), dt=DT)
    with pytest.raises(ModalError, match="3x"):
        prony(SINGLE[:20], dt=DT, order=8)
    with pytest.raises(ModalError, match="pencil"):
        matrix_pencil(SINGLE, dt=DT, pencil_param=150)
    ts = TimeSeriesSet(0.0, DT, {"y": SINGLE})
    with pytest.raises(ModalError, match="Nyquist"):
        preprocess(ts, (0.1, 6.0))
    with pytest.raises(ModalError):
        preprocess(ts, (1.0, 0.5))


def test_preprocess_constant_and_passband():
    dt = 0.01
    t = np.arange(6000) * dt
    ts = TimeSeriesSet(0.0, dt, {"c": np.full_like(t, 3.0), "tone": np.cos(2 * np.pi * 0.84 * t)})
    out = preprocess(ts, (0.1, 2.0))
    assert len(out) == len(ts)
    assert np.max(np.abs(out["c"])) < 1e-12
    # away from the filtfilt edge transients
    mid = slice(2500, 3500)
    amp = np.max(np.abs(out["tone"][mid]))
    assert amp == pytest.approx(1.0, rel=0.02)


def test_preprocess_rejects_drift():
    dt = 0.01
    t = np.arange(20000) * dt
    drift = np.sin(2 * np.pi * 0.01 * t)
    ts = TimeSeriesSet(0.0, dt, {"y": drift})
    out = preprocess(ts, (0.1, 2.0))["y"]
    mid = slice(5000, 15000)
    # detrending alone would not do it; the band-pass supplies the rejection
    assert 20 * np.log10(np.max(np.abs(out[mid])) / 1.0) <= -40.0


def test_mode_shapes_antiphase_and_scaling():
    y = np.exp(-0.1 * T) * np.cos(2 * np.pi * 0.5 * T + 0.3)
    ts = TimeSeriesSet(0.0, DT, {"a": y, "b": -y, "c": 0.5 * y})
    modes = matrix_pencil(y, dt=DT)
    sh = mode_shapes(ts, modes)[0]
    np.testing.assert_allclose(sh.amplitude, [1.0, 1.0, 0.5], atol=1e-9)
    assert abs(sh.phase_deg[1]) == pytest.approx(180.0, abs=1e-6)
    assert sh.phase_deg[2] == pytest.approx(0.0, abs=1e-6)
    assert np.all((sh.phase_deg > -180) & (sh.phase_deg <= 180))
    assert not sh.warnings


def test_mode_shape_three_groups():
    # NE, NW and S coherent groups of a 0.24 Hz inter-area mode
    rng = np.random.default_rng(3)
    t = np.arange(400) * 0.1
    groups = {"ne": 0.0, "nw": 150.0, "s": -110.0}
    chans = {}
    for g, ph in groups.items():
        for k in range(4):
            a = rng.uniform(0.4, 1.0)
            jitter = rng.uniform(-8, 8)
            chans[f"{g}{k}"] = a * np.exp(-0.06 * t) * np.cos(2 * np.pi * 0.24 * t + np.radians(ph + jitter)) \
                + 0.3 * a * np.exp(-0.2 * t) * np.cos(2 * np.pi * 0.6 * t + k)
    ts = TimeSeriesSet(0.0, 0.1, chans)
    modes = matrix_pencil(chans["ne0"], dt=0.1)
    shape = mode_shapes(ts, [modes.nearest(0.24), modes.nearest(0.6)])[0]
    ph = dict(zip(shape.channels, shape.phase_deg))
    for g in groups:
        members = np.array([ph[f"{g}{k}"] for k in range(4)])
        centre = np.degrees(np.angle(np.mean(np.exp(1j * np.radians(members)))))
        assert np.all(np.abs(wrap_deg(members - centre)) <= 20.0)
    centres = [np.degrees(np.angle(np.mean(np.exp(1j * np.radians([ph[f"{g}{k}"] for k in range(4)])))))
               for g in groups]
    assert abs(wrap_deg(centres[1] - centres[0])) > 100
    assert abs(wrap_deg(centres[2] - centres[0])) > 100


def test_mode_shape_residual_warning():
    y = np.exp(-0.1 * T) * np.cos(2 * np.pi * 0.5 * T)
    other = np.cos(2 * np.pi * 1.7 * T)
    ts = TimeSeriesSet(0.0, DT, {"a": y, "b": other})
    sh = mode_shapes(ts, matrix_pencil(y, dt=DT), residual_warn=0.1)[0]
    assert any("channel b" in w for w in sh.warnings)


def test_damping_report():
    low = Mode.from_pole(complex(-0.034 * 2 * np.pi * 0.84 / np.sqrt(1 - 0.034 ** 2), 2 * np.pi * 0.84))
    high = Mode(0.5, 0.12 * 2 * np.pi * 0.5 / np.sqrt(1 - 0.12 ** 2))
    rep = damping_report([low, high])
    assert rep[0].critical and not rep[1].critical
    assert damping_report([]) == []


def test_match_modes_across_events():
    a = [Mode(0.24, 0.1), Mode(0.84, 0.18)]
    b = [Mode(0.26, 0.1), Mode(0.83, 0.2), Mode(1.3, 0.3)]
    groups = match_modes([a, b])
    assert [len(g) for g in groups] == [2, 2, 1]


def test_json_export(tmp_path):
    ms = matrix_pencil(SINGLE, dt=DT)
    modes_to_json(ms, tmp_path / "m.json", channel="y")
    import json
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["channel"] == "y"
    assert d["modes"][0]["freq_hz"] == pytest.approx(0.25)


def test_analyze_ringdown_resamples():
    dt = 0.01
    t = np.arange(2000) * dt
    y = np.exp(-0.2 * t) * np.cos(2 * np.pi * 0.75 * t) + 0.002 * t
    ts = TimeSeriesSet(5.5, dt, {"y": y})
    for method in ("mp", "prony"):
        m = analyze_ringdown(ts, "y", method=method).nearest(0.75)
        assert m.freq_hz == pytest.approx(0.75, rel=0.01)
        assert m.damping_ratio == pytest.approx(0.2 / np.hypot(0.2, 2 * np.pi * 0.75), rel=0.1)
