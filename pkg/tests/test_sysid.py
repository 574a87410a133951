import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from macrogrid.sysid import (FrequencyResponse, IdentificationError, ProbeSignal,
                             TransferFunctionModel, dominant_poles, estimate_frf, fit_tf,
                             gen_multisine, probe_lti)

GRID = np.round(np.arange(0.05, 3.0 + 1e-9, 0.01), 10)
PAIR = (complex(-0.266, 4.69), complex(-0.266, -4.69))


def test_probe_count_and_band():
    p = gen_multisine((0.05, 3.0), 0.01, seed=0)
    assert len(p.freqs) == 296
    assert p.freqs[0] == pytest.approx(0.05) and p.freqs[-1] == pytest.approx(3.0)
    assert p.period == pytest.approx(100.0)


def test_probe_deterministic_and_clamped():
    a = gen_multisine(seed=11, clamp=30.0)
    b = gen_multisine(seed=11, clamp=30.0)
    np.testing.assert_array_equal(a.amplitudes, b.amplitudes)
    np.testing.assert_array_equal(a.phases, b.phases)
    assert a.peak() <= 30.0 * (1 + 1e-9)
    assert not np.array_equal(gen_multisine(seed=12).phases, a.phases)


def test_probe_errors():
    with pytest.raises(ValueError):
        gen_multisine((0.05, 3.0), 0.0)
    with pytest.raises(ValueError):
        gen_multisine((3.0, 0.05))
    with pytest.raises(ValueError):
        gen_multisine((0.05, 6.0), fs=10.0)


def test_probe_spectrum_no_leakage():
    p = gen_multisine(seed=3)
    fs = 20.0
    t = np.arange(int(p.period * fs)) / fs
    spec = np.abs(np.fft.rfft(p(t)))
    f = np.fft.rfftfreq(len(t), 1 / fs)
    on = np.isin(np.round(f, 6), np.round(p.freqs, 6))
    assert on.sum() == len(p.freqs)
    assert 20 * np.log10(spec[~on].max() / spec[on].min()) < -60.0


def test_frf_static_gain():
    p = gen_multisine(seed=0)
    dt = 0.05
    u = p(np.arange(int(p.period / dt)) * dt)
    frf = estimate_frf(u, 2 * u, p.freqs, dt=dt)
    np.testing.assert_allclose(frf.values, 2.0 + 0j, atol=1e-10)


def test_frf_first_order_at_one_rad():
    tf = TransferFunctionModel([1.0], [1.0, 1.0])
    # grid with spacing 1/(2 pi) so that omega = 1 rad/s is a probed bin
    f = np.arange(1, 20) / (2 * np.pi)
    rng = np.random.default_rng(0)
    p = ProbeSignal(f, rng.uniform(0.5, 1.0, len(f)), rng.uniform(0, 2 * np.pi, len(f)))
    dt = 2 * np.pi / 6000
    u, y = probe_lti(tf, p, dt=dt, preroll_periods=3)
    frf = estimate_frf(u, y, f, dt=dt, period=2 * np.pi)
    h1 = frf.values[0]
    assert abs(h1) == pytest.approx(1 / np.sqrt(2), rel=0.01)
    assert np.degrees(np.angle(h1)) == pytest.approx(-45.0, abs=1.0)


def test_frf_peak_near_0746():
    tf = TransferFunctionModel.from_poles(PAIR, gain=22.066)
    p = gen_multisine(seed=5)
    u, y = probe_lti(tf, p, dt=0.01, preroll_periods=1)
    frf = estimate_frf(u, y, p.freqs, dt=0.01)
    f_peak = frf.freqs[np.argmax(np.abs(frf.values))]
    assert abs(f_peak - 0.746) <= 0.01


def test_frf_errors():
    with pytest.raises(ValueError, match="integer number"):
        estimate_frf(np.zeros(150), np.zeros(150), GRID, dt=0.5)
    with pytest.raises(ValueError, match="time base"):
        estimate_frf(np.zeros(10), np.zeros(11), GRID, dt=0.1)


def test_frf_drops_dead_bins():
    dt = 0.05
    t = np.arange(2000) * dt
    f = np.array([0.1, 0.2, 0.3])
    u = np.cos(2 * np.pi * 0.1 * t) + np.cos(2 * np.pi * 0.3 * t)
    frf = estimate_frf(u, u, f, dt=dt, period=10.0)
    np.testing.assert_allclose(frf.freqs, [0.1, 0.3])


def exact_frf(tf, freqs=GRID):
    return FrequencyResponse(freqs, tf(2j * np.pi * freqs))


def test_fit_first_order():
    tf = fit_tf(exact_frf(TransferFunctionModel([1.0], [1.0, 1.0])), (0, 1))
    assert tf.poles[0].real == pytest.approx(-1.0, abs=1e-3)
    assert tf.quality["ok"]


def test_fit_second_order_damping():
    true = TransferFunctionModel.from_poles(PAIR, zeros=[-2.0], gain=5.0)
    tf = fit_tf(exact_frf(true), (1, 2))
    m = dominant_poles(tf)[0]
    assert m.damping_ratio == pytest.approx(0.05662541607236088, rel=0.02)
    assert m.freq_hz == pytest.approx(0.7464366831009892, rel=1e-3)


def two_resonance():
    w1, z1 = 2 * np.pi * 0.30, 0.25
    w2, z2 = 2 * np.pi * 0.84, 0.034
    p1 = complex(-z1 * w1, w1 * np.sqrt(1 - z1 ** 2))
    p2 = complex(-z2 * w2, w2 * np.sqrt(1 - z2 ** 2))
    return TransferFunctionModel.from_poles([p1, p1.conjugate(), p2, p2.conjugate()],
                                            zeros=[-0.5, -1.0, -3.0], gain=2.0), p1, p2


def test_fit_two_resonances():
    true, p1, p2 = two_resonance()
    tf = fit_tf(exact_frf(true), (3, 4))
    poles = tf.poles
    for p in (p1, p2):
        assert np.min(np.abs(poles - p)) / abs(p) < 1e-3
    modes = dominant_poles(tf)
    assert modes[0].pole == pytest.approx(p2, rel=1e-3)


def test_fit_overfit_error():
    frf = exact_frf(TransferFunctionModel([1.0], [1.0, 1.0]), GRID[:30])
    with pytest.raises(IdentificationError, match="overfitting|too few"):
        fit_tf(frf, (8, 9))
    with pytest.raises(IdentificationError, match="overfitting"):
        fit_tf(exact_frf(TransferFunctionModel([1.0], [1.0, 1.0])), (7, 8))


def test_fit_quality_flag_on_underfit():
    true, _, _ = two_resonance()
    tf = fit_tf(exact_frf(true), (0, 2))
    assert not tf.quality["ok"]


def test_dominant_poles_examples():
    real = dominant_poles(TransferFunctionModel([1.0], np.poly([-1.0, -2.0])))
    assert len(real) == 2 and all("real" in m.flags and m.freq_hz == 0 for m in real)
    m = dominant_poles(TransferFunctionModel([1.0], [1.0, 0.532, 22.066]))[0]
    assert m.freq_hz == pytest.approx(0.7464, abs=1e-4)
    assert m.damping_ratio == pytest.approx(0.0566, abs=1e-4)
    _, p1, p2 = two_resonance()
    modes = dominant_poles(TransferFunctionModel.from_poles([p1, p1.conjugate(), p2, p2.conjugate()]))
    # damped frequency of the 0.84 Hz natural-frequency pair
    assert modes[0].freq_hz == pytest.approx(0.84 * np.sqrt(1 - 0.034 ** 2), rel=1e-9)
    assert modes[0].damping_ratio == pytest.approx(0.034, rel=1e-9)


def test_tf_json_round_trip(tmp_path):
    tf = TransferFunctionModel([2.0, 1.0], [1.0, 0.532, 22.066])
    tf.to_json(tmp_path / "tf.json", converter="SEA")
    back = TransferFunctionModel.from_json(tmp_path / "tf.json")
    np.testing.assert_array_equal(back.num, tf.num)
    np.testing.assert_array_equal(back.den, tf.den)
    assert json.loads((tmp_path / "tf.json").read_text())["converter"] == "SEA"


def test_tf_invariants():
    tf = TransferFunctionModel([4.0, 2.0], [2.0, 1.0, 3.0])
    assert tf.den[0] == 1.0
    with pytest.raises(ValueError, match="proper"):
        TransferFunctionModel([1.0, 0.0, 0.0], [1.0, 1.0])


def stable_pairs(draw_f, draw_z):
    w = 2 * np.pi * draw_f
    return complex(-draw_z * w, w * np.sqrt(1 - draw_z ** 2))


@settings(max_examples=25)
@given(f1=st.floats(0.1, 0.6), f2=st.floats(0.9, 2.5), z1=st.floats(0.03, 0.4),
       z2=st.floats(0.03, 0.4), zero=st.floats(0.2, 5.0), gain=st.floats(0.1, 10.0))
def test_round_trip_property(f1, f2, z1, z2, zero, gain):
    p1, p2 = stable_pairs(f1, z1), stable_pairs(f2, z2)
    true = TransferFunctionModel.from_poles([p1, p1.conjugate(), p2, p2.conjugate()],
                                            zeros=[-zero], gain=gain)
    tf = fit_tf(exact_frf(true), (1, 4))
    for p in true.poles:
        assert np.min(np.abs(tf.poles - p)) / abs(p) < 1e-3
    assert np.min(np.abs(tf.zeros + zero)) / zero < 1e-3


def test_probe_linearity_lti():
    true = TransferFunctionModel.from_poles(PAIR, gain=22.066)
    p = gen_multisine(seed=2)
    frfs = []
    for scale in (1.0, 2.0):
        u, y = probe_lti(true, p.scaled(scale), dt=0.01)
        frfs.append(estimate_frf(u, y, p.freqs, dt=0.01).values)
    assert np.max(np.abs(frfs[1] / frfs[0] - 1)) < 0.01


@pytest.mark.slow
def test_probe_linearity_macrogrid(reference_config, reference_acdc):
    # short 10 s grid keeps the run cheap; the reference converter and output
    from macrogrid.dynsim import SimulationModel
    from macrogrid.sysid import frequency_scan
    c = reference_config
    model = SimulationModel(c.ei, c.wi, c.mtdc, acdc=reference_acdc)
    p = gen_multisine((0.3, 1.2), 0.1, seed=0, clamp=30.0)
    out = []
    for scale in (1.0, 2.0):
        frf, _ = frequency_scan(model, "SEA", "bus:BC:freq", p.scaled(scale), dt=2e-3, preroll=20.0)
        out.append(frf.values)
    assert np.max(np.abs(out[1] / out[0] - 1)) < 0.01


@pytest.mark.slow
def test_scan_poles_match_ringdown(reference_pipeline):
    out = reference_pipeline["out"]
    from macrogrid.pipeline import target_pole
    lead = json.loads((out / "modes.json").read_text())["modes"][0]
    scan = target_pole(TransferFunctionModel.from_json(out / "tf.json"), lead["freq_hz"])
    assert abs(scan.freq_hz - lead["freq_hz"]) <= 0.02
    assert scan.damping_ratio == pytest.approx(lead["damping_ratio"], rel=0.2)
