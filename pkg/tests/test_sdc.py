import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal
from scipy.integrate import solve_ivp

from macrogrid.modal import matrix_pencil
from macrogrid.mtdc import sdc_block
from macrogrid.sdc import (DesignError, DesignTarget, SdcParams, alpha_from_phase,
                           closed_loop_poles, design_sdc, dominant_mode, eval_sdc, lead_lag,
                           nearest_mode, placement_residual, required_sigma, tune_gain, washout)
from macrogrid.sysid import TransferFunctionModel

PAIR = complex(-0.266, 4.69)
EI_PAIR = complex(-0.18, 5.27)


def plant(pole, zeros=(), gain=None):
    g = abs(pole) ** 2 if gain is None else gain
    return TransferFunctionModel.from_poles([pole, pole.conjugate()], zeros=zeros, gain=g)


def test_required_sigma_examples():
    assert required_sigma(4.69, 0.0) == 0.0
    assert required_sigma(4.69, 0.15) == pytest.approx(0.7115504845558123, abs=1e-12)
    assert round(required_sigma(4.69, 0.15), 4) == 0.7116
    assert 0.8 > required_sigma(4.69, 0.15)
    assert required_sigma(2 * math.pi * 0.84, 0.12) == pytest.approx(0.6379550109767738, abs=1e-12)
    with pytest.raises(ValueError):
        required_sigma(4.69, 1.0)


def test_alpha_arithmetic():
    assert alpha_from_phase(30.0) == pytest.approx(1 / 3, rel=1e-12)
    a = alpha_from_phase(30.0)
    w = 2 * math.pi * 0.84
    t1 = 1 / (w * math.sqrt(a))
    assert math.degrees(cmath.phase(lead_lag(1j * w, t1, a * t1))) == pytest.approx(30.0, abs=1e-9)


def test_eval_sdc_examples():
    p = SdcParams(K=3.0, T1=0.2, T2=0.2, Tw=10.0, m=2)
    assert eval_sdc(p, 0.0) == 0
    h = eval_sdc(p, 1j / 10.0)
    assert abs(h) == pytest.approx(3.0 / math.sqrt(2), rel=1e-12)
    assert math.degrees(cmath.phase(h)) == pytest.approx(45.0, abs=1e-9)


def test_published_ei_time_constants_identity():
    # published EI lead-lag constants against T1 T2 w^2 = 1, within 0.5%
    assert 0.1483 * 0.2409 == pytest.approx(1 / (2 * math.pi * 0.84) ** 2, rel=0.005)
    assert 1 / (2 * math.pi * 0.84) ** 2 == pytest.approx(0.035898945451508575, rel=1e-12)


def test_zero_phase_design():
    # G(s) = -1/(s + a) with a chosen so that -1/G(lambda_cl) has exactly the
    # washout's phase, leaving nothing for the lead-lag blocks
    target = DesignTarget(PAIR, 0.15)
    lam = target.lambda_cl
    w = washout(lam, 10.0)
    a = lam.imag / math.tan(cmath.phase(w)) - lam.real
    g = TransferFunctionModel([-1.0], [1.0, a])
    p, info = design_sdc(g, target, return_info=True)
    assert abs(info.phase_required_deg) < 1e-9
    assert p.alpha == pytest.approx(1.0, abs=1e-12)
    assert p.T1 == pytest.approx(p.T2, rel=1e-12)
    assert p.K == pytest.approx(abs(1 / g(lam)) / abs(w), rel=1e-12)
    assert placement_residual(g, p, lam) < 1e-9


def test_m1_identity():
    # a plant needing modest lead gives m = 1
    g = plant(PAIR, zeros=[-1.0])
    target = DesignTarget(PAIR, 0.15)
    p, info = design_sdc(g, target, return_info=True)
    if p.m != 1:
        pytest.skip("plant needs more than one block")
    w = target.lambda_cl.imag
    assert p.T1 * p.T2 * w * w == pytest.approx(1.0, abs=1e-9)


def test_ei_plant_reaches_target():
    g = plant(EI_PAIR)
    p = design_sdc(g, DesignTarget(EI_PAIR, 0.12))
    m = nearest_mode(closed_loop_poles(g, p), EI_PAIR.imag / (2 * math.pi))
    assert m.damping_ratio >= 0.12 * 0.9


def test_wi_plant_dominant_pole_near_target():
    g = plant(PAIR)
    target = DesignTarget(PAIR, 0.15, sigma_margin=0.8 / required_sigma(4.69, 0.15))
    assert target.lambda_cl == pytest.approx(complex(-0.8, 4.69), abs=1e-12)
    p = design_sdc(g, target)
    m = nearest_mode(closed_loop_poles(g, p), 4.69 / (2 * math.pi))
    assert abs(m.pole - complex(-0.8, 4.69)) <= 0.1 * abs(complex(-0.8, 4.69))


def test_closed_loop_examples():
    g = TransferFunctionModel([1.0], [1.0, 1.0])
    # static H = 3 realized with m = 1, T1 = T2 and a washout far below the pole
    h = SdcParams(K=3.0, T1=0.1, T2=0.1, Tw=1e9)
    poles = [m.pole for m in closed_loop_poles(g, h)]
    assert min(abs(pp - (-4.0)) for pp in poles) < 1e-6
    g2 = plant(PAIR)
    off = closed_loop_poles(g2, SdcParams(0.0, 0.3, 0.1))
    assert dominant_mode(off).pole == pytest.approx(PAIR, abs=1e-12)


def test_unstable_closed_loop_flagged():
    g = plant(PAIR)
    p = SdcParams(K=-50.0, T1=0.3, T2=0.1)
    modes = closed_loop_poles(g, p)
    assert any("unstable" in m.flags for m in modes)


def test_design_errors():
    g = plant(PAIR)
    with pytest.raises(DesignError, match="m_max"):
        design_sdc(TransferFunctionModel([1.0, -1.0, 0.0], np.poly([PAIR, PAIR.conjugate()]).real),
                   DesignTarget(PAIR, 0.15), m_max=1, max_phase_per_block=20.0)
    with pytest.raises(ValueError):
        DesignTarget(PAIR, 1.2)
    with pytest.raises(ValueError):
        DesignTarget(PAIR.conjugate(), 0.15)

    class Rhp(DesignTarget):
        @property
        def lambda_cl(self):
            return complex(0.3, 4.69)

    with pytest.raises(DesignError, match="left half plane"):
        design_sdc(g, Rhp(PAIR, 0.15))


def random_plant(f, z, zero, sign):
    w = 2 * math.pi * f
    pole = complex(-z * w, w * math.sqrt(1 - z * z))
    return plant(pole, zeros=[zero], gain=sign * abs(pole) ** 2), pole


@settings(max_examples=60)
@given(f=st.floats(0.2, 2.0), z=st.floats(0.01, 0.08), zero=st.floats(-10.0, 10.0),
       sign=st.sampled_from([1.0, -1.0]), zt=st.floats(0.1, 0.3))
def test_design_invariants(f, z, zero, sign, zt):
    g, pole = random_plant(f, z, zero, sign)
    target = DesignTarget(pole, zt)
    try:
        p, info = design_sdc(g, target, return_info=True)
    except DesignError:
        return
    w = target.lambda_cl.imag
    assert p.T1 * p.T2 * w * w == pytest.approx(1.0, abs=1e-9)
    assert p.T2 / p.T1 == pytest.approx(info.alpha, abs=1e-9 * max(1.0, info.alpha))
    assert abs(info.phi_deg) <= 55.0 + 1e-9
    if p.m > 1:
        assert abs(info.phase_required_deg) / (p.m - 1) > 55.0
    assert info.residual <= 1e-6
    assert placement_residual(g, p, target.lambda_cl) <= 1e-6


def simulate_block(p, y_of_t, t_end, dt=1e-3):
    z = np.zeros(p.m + 1)
    out = 0.0
    for k in range(int(round(t_end / dt))):
        t = k * dt
        # RK4 on the block states with the input held per stage
        def f(zz, tt):
            return sdc_block(p, zz, y_of_t(tt))[0]
        k1 = f(z, t)
        k2 = f(z + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = f(z + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = f(z + dt * k3, t + dt)
        z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    _, out = sdc_block(p, z, y_of_t(t_end))
    return out


def test_washout_rejects_constant_input():
    p = SdcParams(K=900.0, T1=0.4, T2=0.1, Tw=10.0, m=3)
    # start from the block's steady state for the constant, then hold for 60 s
    z = np.full(p.m + 1, 0.0)
    z[0] = 0.05
    out = None
    dt = 1e-2
    for _ in range(6000):
        def f(zz):
            return sdc_block(p, zz, 0.05)[0]
        k1 = f(z)
        k2 = f(z + 0.5 * dt * k1)
        k3 = f(z + 0.5 * dt * k2)
        k4 = f(z + dt * k3)
        z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    out = sdc_block(p, z, 0.05)[1]
    assert abs(out) < 1e-9
    # from rest the transient decays with Tw
    out_rest = simulate_block(SdcParams(K=1.0, T1=0.4, T2=0.1, Tw=1.0, m=1), lambda t: 0.05, 60.0, dt=1e-2)
    assert abs(out_rest) < 1e-9


def test_block_matches_transfer_function():
    p = SdcParams(K=2.0, T1=0.4, T2=0.1, Tw=10.0, m=2)
    w = 2 * math.pi * 0.7
    t_end = 80.0
    y = lambda t: math.sin(w * t)
    # steady-state sinusoid amplitude and phase against eval_sdc
    dt = 1e-3
    z = np.zeros(p.m + 1)
    ts = np.arange(int(round(t_end / dt))) * dt
    outs = np.empty(len(ts))
    for k, t in enumerate(ts):
        dz, outs[k] = sdc_block(p, z, y(t))
        def f(zz, tt):
            return sdc_block(p, zz, y(tt))[0]
        k1 = dz
        k2 = f(z + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = f(z + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = f(z + dt * k3, t + dt)
        z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    tail = ts > 60.0
    c = np.exp(-1j * w * ts[tail])
    ph = 2 * np.mean(outs[tail] * c) / (2 * np.mean(np.sin(w * ts[tail]) * c))
    h = -eval_sdc(p, 1j * w)
    assert abs(ph) == pytest.approx(abs(h), rel=1e-3)
    assert cmath.phase(ph / h) == pytest.approx(0.0, abs=1e-3)


def test_limit_clips():
    p = SdcParams(K=1000.0, T1=0.4, T2=0.1, m=1, limit=50.0)
    z = np.zeros(2)
    _, out = sdc_block(p, z, 1.0)
    assert out == -50.0


def test_runtime_loop_matches_closed_loop_poles():
    g = plant(PAIR, zeros=[-1.0])
    p = design_sdc(g, DesignTarget(PAIR, 0.15))
    a, b, c, d = signal.tf2ss(g.num, g.den)
    n = a.shape[0]

    def rhs(t, x):
        xp, z = x[:n], x[n:]
        y = float((c @ xp)[0])
        dz, u = sdc_block(p, z, y)
        return np.concatenate([a @ xp + b[:, 0] * u, dz])

    x0 = np.zeros(n + p.m + 1)
    x0[:n] = np.linalg.lstsq(c, [1.0], rcond=None)[0]
    dt = 0.05
    t = np.arange(0, 30, dt)
    sol = solve_ivp(rhs, (0, t[-1]), x0, t_eval=t, rtol=1e-11, atol=1e-13, method="DOP853")
    y = (c @ sol.y[:n])[0]
    est = matrix_pencil(y, dt=dt)
    expect = nearest_mode(closed_loop_poles(g, p), PAIR.imag / (2 * math.pi))
    got = est.nearest(expect.freq_hz)
    assert got.freq_hz == pytest.approx(expect.freq_hz, rel=1e-4)
    assert got.sigma == pytest.approx(expect.sigma, rel=1e-4)
    # the loop achieves the designed decay rate
    assert got.sigma == pytest.approx(-DesignTarget(PAIR, 0.15).lambda_cl.real, rel=1e-4)


def test_tune_gain_does_not_reduce_damping():
    g = plant(EI_PAIR)
    p = design_sdc(g, DesignTarget(EI_PAIR, 0.12))
    f = EI_PAIR.imag / (2 * math.pi)
    before = nearest_mode(closed_loop_poles(g, p), f).damping_ratio
    after = nearest_mode(closed_loop_poles(g, tune_gain(g, p, f)), f).damping_ratio
    assert after >= before - 1e-6


def test_params_json_round_trip(tmp_path):
    p = SdcParams(K=993.27, T1=0.4269, T2=0.1069, Tw=10.0, m=4, limit=300.0)
    p.to_json(tmp_path / "p.json", note="x")
    assert SdcParams.from_json(tmp_path / "p.json") == p
    with pytest.raises(ValueError):
        SdcParams(1.0, -0.1, 0.1)
    with pytest.raises(ValueError):
        SdcParams(1.0, 0.1, 0.1, m=0)
