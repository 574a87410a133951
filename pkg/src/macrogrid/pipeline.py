"""End-to-end damping-control workflow on a scenario: plant identification
by frequency scan, SDC design on the fitted model and time-domain
validation with the controller engaged."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynsim import (GenTrip, SimulationModel, TimeSeriesSet, electromechanical_modes, linearize,
                     ringdown_window, simulate)
from .grid import Topology
from .modal import Mode, ModalError, analyze_ringdown
from .mtdc import MtdcSystem, SdcAttachment
from .sdc import DesignError, DesignTarget, SdcParams, design_sdc, tune_gain
from .sysid import (FrequencyResponse, IdentificationError, TransferFunctionModel, dominant_poles,
                    fit_tf, frequency_scan, gen_multisine)

log = logging.getLogger(__name__)


def converter_rating(sys: MtdcSystem, converter: str) -> float:
    for c in sys.converters:
        if c.id == converter:
            return c.rating_mva
    raise ValueError(f"unknown converter {converter!r}")


def attach_sdc(sys: MtdcSystem, converter: str, params: SdcParams | None,
               feedback: str | None = None) -> MtdcSystem:
    """Copy of ``sys`` with an SDC on ``converter`` (``params=None``
    detaches every SDC)."""
    convs = []
    found = False
    for c in sys.converters:
        if params is None:
            convs.append(replace(c, sdc=None))
        elif c.id == converter:
            if feedback is None:
                raise ValueError("a feedback channel is required to attach an SDC")
            convs.append(replace(c, sdc=SdcAttachment(params, feedback)))
            found = True
        else:
            convs.append(c)
    if params is not None and not found:
        raise ValueError(f"unknown converter {converter!r}")
    return replace(sys, converters=convs)


# -- identification ------------------------------------------------------------

@dataclass
class ScanResult:
    frf: FrequencyResponse
    tf: TransferFunctionModel
    fit_band: tuple[float, float]
    timeseries: TimeSeriesSet
    probe: object


def auto_fit_band(frf: FrequencyResponse, search=(0.1, 2.0), spread: float = 0.6) -> tuple[float, float]:
    """Band around the FRF magnitude peak inside ``search``:
    ``[(1 - spread) f_pk, (1 + spread) f_pk]``."""
    sel = (frf.freqs >= search[0]) & (frf.freqs <= search[1])
    if not np.any(sel):
        raise IdentificationError(f"no FRF points inside {search} Hz")
    f_pk = frf.freqs[sel][np.argmax(np.abs(frf.values[sel]))]
    return (max(frf.freqs[0], (1 - spread) * f_pk), min(frf.freqs[-1], (1 + spread) * f_pk))


def fit_plant(frf: FrequencyResponse, order=None, fit_band=None, search=(0.1, 2.0),
              max_order: int = 8) -> tuple[TransferFunctionModel, tuple[float, float]]:
    """Fit the scanned FRF. With ``order=None`` the orders ``(n, n + 1)``
    are tried from n = 1 until one passes the quality gate."""
    band = tuple(fit_band) if fit_band is not None else auto_fit_band(frf, search)
    sub = frf.band(*band)
    if order is not None:
        return fit_tf(sub, tuple(order)), band
    best = None
    for n in range(1, max_order):
        tf = fit_tf(sub, (n, n + 1))
        if tf.quality["ok"]:
            return tf, band
        if best is None or tf.quality["max_mag_err"] < best.quality["max_mag_err"]:
            best = tf
    log.warning("no fit order up to %d passed the quality gate; using the closest", max_order)
    return best, band


def identify_plant(model: SimulationModel, converter: str, output: str, seed: int = 0,
                   band=(0.05, 3.0), step: float = 0.01, amp_range=(0.5, 1.0),
                   clamp_frac: float = 0.01, dt: float = 2e-3, preroll: float = 40.0,
                   periods: int = 1, order=None, fit_band=None, search=(0.1, 2.0)) -> ScanResult:
    """Multisine scan of ``converter``'s power reference to ``output`` and a
    rational fit. The probe peak is ``clamp_frac`` of the converter rating."""
    clamp = clamp_frac * converter_rating(model.sys, converter)
    probe = gen_multisine(tuple(band), step, tuple(amp_range), seed=seed, clamp=clamp, fs=1.0 / dt)
    frf, ts = frequency_scan(model, converter, output, probe, dt=dt, preroll=preroll, periods=periods)
    tf, fb = fit_plant(frf, order, fit_band, search)
    return ScanResult(frf, tf, fb, ts, probe)


def target_pole(tf: TransferFunctionModel, freq_hz: float | None = None, band=(0.1, 2.0)) -> Mode:
    """Open-loop mode to move: the nearest to ``freq_hz`` when given,
    otherwise the least-damped oscillatory pole inside ``band``."""
    cands = [m for m in dominant_poles(tf) if m.is_oscillatory and band[0] <= m.freq_hz <= band[1]]
    if not cands:
        raise DesignError(f"fitted model has no oscillatory pole inside {band} Hz")
    if freq_hz is not None:
        return min(cands, key=lambda m: abs(m.freq_hz - freq_hz))
    return min(cands, key=lambda m: m.damping_ratio)


def design_for_plant(tf: TransferFunctionModel, zeta_target: float = 0.15,
                     target_freq_hz: float | None = None, max_phase_per_block: float = 55.0,
                     m_max: int = 4, Tw: float = 10.0, limit: float | None = None,
                     sigma_margin: float = 1.1, tune: bool = False, band=(0.1, 2.0)):
    """Pick the open-loop pole and run the pole-placement design.
    Returns ``(params, info, target)``."""
    mode = target_pole(tf, target_freq_hz, band)
    target = DesignTarget(mode.pole, zeta_target, sigma_margin=sigma_margin)
    p, info = design_sdc(tf, target, max_phase_per_block, m_max, Tw, limit, return_info=True)
    if tune:
        p = tune_gain(tf, p, mode.freq_hz)
        info.notes.append("gain tuned by 1-D search on the fitted model")
    return p, info, target


# -- validation ---------------------------------------------------------------

@dataclass
class RunEstimate:
    """Targeted-mode estimate from one ringdown."""

    label: str
    freq_hz: float
    damping_ratio: float
    settling_time: float
    sdc_peak_mw: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ValidationReport:
    converter: str
    feedback: str
    params: dict
    target_freq_hz: float
    zeta_target: float
    off: RunEstimate
    on: RunEstimate
    other_modes: list[dict]
    max_degradation: float
    contingency: RunEstimate | None = None
    contingency_off: RunEstimate | None = None
    zeta_contingency: float = 0.10
    notes: list[str] = field(default_factory=list)

    @property
    def improvement(self) -> float:
        return self.on.damping_ratio - self.off.damping_ratio

    @property
    def target_met(self) -> bool:
        return self.on.damping_ratio >= self.zeta_target

    @property
    def others_ok(self) -> bool:
        return all(m["ok"] for m in self.other_modes)

    @property
    def contingency_met(self) -> bool | None:
        if self.contingency is None:
            return None
        return self.contingency.damping_ratio >= self.zeta_contingency

    @property
    def passed(self) -> bool:
        return self.target_met and self.others_ok and self.contingency_met is not False

    def to_dict(self) -> dict:
        return {
            "converter": self.converter, "feedback": self.feedback, "params": self.params,
            "target_freq_hz": self.target_freq_hz, "zeta_target": self.zeta_target,
            "off": self.off.to_dict(), "on": self.on.to_dict(), "improvement": self.improvement,
            "target_met": self.target_met, "other_modes": self.other_modes,
            "max_degradation": self.max_degradation, "others_ok": self.others_ok,
            "contingency": self.contingency.to_dict() if self.contingency else None,
            "contingency_off": self.contingency_off.to_dict() if self.contingency_off else None,
            "zeta_contingency": self.zeta_contingency, "contingency_met": self.contingency_met,
            "passed": self.passed, "notes": self.notes,
        }


def settling_time(y: np.ndarray, dt: float, frac: float = 0.05) -> float:
    """Time after which ``|y|`` stays below ``frac`` of its peak."""
    a = np.abs(np.asarray(y, float))
    if a.max() == 0:
        return 0.0
    above = np.nonzero(a > frac * a.max())[0]
    return float((above[-1] + 1) * dt)


def estimate_targeted(ts: TimeSeriesSet, event, channel: str, freq_hz: float, window: float,
                      analysis: dict, label: str, tol_hz: float = 0.1) -> RunEstimate:
    """Ringdown estimate of the mode nearest ``freq_hz`` in ``channel``."""
    w = ringdown_window(ts, event, window)
    band = tuple(analysis.get("band", (0.1, 2.0)))
    modes = analyze_ringdown(w, channel, band=band, method=analysis.get("method", "mp"),
                             order=analysis.get("order", 12), fs=analysis.get("fs", 10.0),
                             min_energy=analysis.get("min_energy", 1e-3))
    near = [m for m in modes if abs(m.freq_hz - freq_hz) <= tol_hz]
    if not near:
        raise ModalError(f"targeted {freq_hz:.3f} Hz mode is not observable in {channel} "
                         f"({label} run); select a feedback signal with higher observability")
    m = min(near, key=lambda m: abs(m.freq_hz - freq_hz))
    from .modal import preprocess
    y = preprocess(w.select([channel]), band)[channel]
    sdc_peak = 0.0
    for name in w.names:
        if name.endswith(":sdc"):
            sdc_peak = max(sdc_peak, float(np.max(np.abs(ts[name]))))
    return RunEstimate(label, m.freq_hz, m.damping_ratio, settling_time(y, w.dt), sdc_peak)


def compare_modes(jac_off: np.ndarray, jac_on: np.ndarray, target_hz: float, band=(0.1, 2.0),
                  zeta_min: float = 0.05, max_degradation: float = 0.2, tol_hz: float = 0.05):
    """Pair each well-damped open-loop electromechanical mode (other than
    the targeted one) with the nearest closed-loop eigenvalue and report the
    relative change in damping ratio."""
    off = electromechanical_modes(jac_off, band)
    on = electromechanical_modes(jac_on, band)
    on_eigs = [e for _, _, e in on]
    out = []
    for f, z, lam in off:
        if abs(f - target_hz) <= tol_hz or z < zeta_min:
            continue
        j = int(np.argmin([abs(e - lam) for e in on_eigs]))
        e = on_eigs[j]
        z_on = -e.real / abs(e)
        change = (z_on - z) / z
        out.append({"freq_hz": f, "zeta_off": z, "zeta_on": z_on, "rel_change": change,
                    "ok": change >= -max_degradation})
    return out


def validate_design(ei, wi, sys: MtdcSystem, converter: str, params: SdcParams, feedback: str,
                    event, target_freq_hz: float, window: float = 20.0, dt: float = 2e-3,
                    zeta_target: float = 0.12, contingency=None, zeta_contingency: float = 0.10,
                    max_degradation: float = 0.2, analysis: dict | None = None,
                    channels: Sequence[str] | None = None, trajectories: dict | None = None,
                    acdc=None) -> ValidationReport:
    """Simulate ``event`` with the SDC off and on and compare the targeted
    mode's damping estimated from the feedback channel.

    Damping of the remaining electromechanical modes is compared on the
    linearized models with and without the controller, since ringdown
    estimates of well-damped modes are too noisy to resolve a 20 % change.
    ``contingency`` (a GenTrip or BranchTrip) reruns the event on the
    post-contingency topology with the SDC on. Trajectories are stored in
    ``trajectories`` when a dict is given.
    """
    analysis = analysis or {}
    base = attach_sdc(sys, converter, None)
    closed = attach_sdc(sys, converter, params, feedback)
    m_off = SimulationModel(ei, wi, base, acdc)
    m_on = SimulationModel(ei, wi, closed, m_off.acdc)
    chans = list(channels or [feedback])
    if feedback not in chans:
        chans.insert(0, feedback)
    sdc_chan = f"conv:{converter}:sdc"
    dur = event.end + window + 1.0
    ts_off = simulate(None, model=m_off, events=[event], duration=dur, dt=dt, channels=chans)
    ts_on = simulate(None, model=m_on, events=[event], duration=dur, dt=dt,
                     channels=chans + [sdc_chan])
    est_off = estimate_targeted(ts_off, event, feedback, target_freq_hz, window, analysis, "off")
    est_on = estimate_targeted(ts_on, event, feedback, target_freq_hz, window, analysis, "on")
    if trajectories is not None:
        trajectories["off"], trajectories["on"] = ts_off, ts_on
    band = tuple(analysis.get("band", (0.1, 2.0)))
    others = compare_modes(linearize(m_off), linearize(m_on), target_freq_hz, band,
                           analysis.get("zeta_min", 0.05), max_degradation)
    rep = ValidationReport(converter, feedback, params.to_dict(), target_freq_hz, zeta_target,
                           est_off, est_on, others, max_degradation,
                           zeta_contingency=zeta_contingency)
    if contingency is not None:
        ev_c = replace(event, t_on=contingency_shift(contingency, event)) \
            if hasattr(event, "t_on") else event
        for label, mdl in (("contingency_off", m_off), ("contingency", m_on)):
            ts_c = simulate(None, model=mdl, events=[contingency, ev_c], duration=ev_c.end + window + 1.0,
                            dt=dt, channels=chans + ([sdc_chan] if mdl is m_on else []))
            est = estimate_targeted(ts_c, ev_c, feedback, target_freq_hz, window, analysis, label,
                                    tol_hz=0.15)
            setattr(rep, label, est)
            if trajectories is not None:
                trajectories[label] = ts_c
    if est_on.sdc_peak_mw >= (params.limit or np.inf) * (1 - 1e-9):
        rep.notes.append("SDC output reached its limit during the on run")
    return rep


def contingency_shift(contingency, event, settle: float = 5.0) -> float:
    """Start of the disturbance in a contingency run: after the outage,
    with ``settle`` seconds for the trip transient to pass."""
    t_c = contingency.t if isinstance(contingency, GenTrip) else getattr(contingency, "t", 0.0)
    return max(event.t_on, t_c + settle)
