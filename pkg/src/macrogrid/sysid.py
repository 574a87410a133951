"""Frequency-scanning identification: multisine probes, empirical frequency
response and continuous-time rational fitting."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .dynsim import Probe, SimulationModel, TimeSeriesSet, simulate
from .modal import Mode
from .sdc import poles_to_modes

log = logging.getLogger(__name__)


class IdentificationError(ValueError):
    pass


@dataclass
class ProbeSignal:
    """Sum of cosines ``sum a_k cos(2 pi f_k t + phi_k)`` in MW."""

    freqs: np.ndarray
    amplitudes: np.ndarray
    phases: np.ndarray
    seed: int | None = None
    clamp: float | None = None

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, float)
        self.amplitudes = np.asarray(self.amplitudes, float)
        self.phases = np.asarray(self.phases, float)
        if len({len(self.freqs), len(self.amplitudes), len(self.phases)}) != 1:
            raise ValueError("freqs, amplitudes and phases must have equal length")
        if len(np.unique(self.freqs)) != len(self.freqs):
            raise ValueError("probe frequencies must be distinct")
        self._w = 2 * np.pi * self.freqs

    def __call__(self, t):
        t = np.asarray(t, float)
        if t.ndim == 0:
            return float(self.amplitudes @ np.cos(self._w * t + self.phases))
        return np.cos(np.outer(t, self._w) + self.phases) @ self.amplitudes

    @property
    def period(self) -> float:
        """Common period, the reciprocal of the frequency grid spacing."""
        step = np.min(np.diff(np.sort(self.freqs))) if len(self.freqs) > 1 else self.freqs[0]
        return float(round(1.0 / step, 9))

    def peak(self, fs: float | None = None) -> float:
        fs = fs or 20.0 * self.freqs.max()
        t = np.arange(int(np.ceil(self.period * fs))) / fs
        return float(np.max(np.abs(self(t))))

    def scaled(self, factor: float) -> "ProbeSignal":
        return ProbeSignal(self.freqs, self.amplitudes * factor, self.phases, self.seed, self.clamp)

    def to_dict(self) -> dict:
        return {"freqs": self.freqs.tolist(), "amplitudes": self.amplitudes.tolist(),
                "phases": self.phases.tolist(), "seed": self.seed, "clamp": self.clamp}


def gen_multisine(band: tuple[float, float] = (0.05, 3.0), step: float = 0.01,
                  amp_range: tuple[float, float] = (0.5, 1.0), seed: int = 0,
                  clamp: float | None = None, fs: float | None = None) -> ProbeSignal:
    """Multisine on the grid ``band[0], band[0] + step, ..., band[1]``.

    Amplitudes (MW) are uniform on ``amp_range`` and phases uniform on
    ``[0, 2 pi)``, both drawn from ``numpy.random.default_rng(seed)``. If the
    waveform peak exceeds ``clamp`` all amplitudes are scaled down together.
    ``fs`` (Hz), when given, is the sampling rate whose Nyquist limit the
    band must respect.
    """
    lo, hi = band
    if not step > 0:
        raise ValueError("step must be > 0")
    if not (0 < lo <= hi) or (fs is not None and hi >= fs / 2):
        raise ValueError(f"band {band} must lie in (0, Nyquist)")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    freqs = np.round(lo + step * np.arange(n), 10)
    if n < 1:
        raise ValueError("empty band")
    rng = np.random.default_rng(seed)
    amps = rng.uniform(amp_range[0], amp_range[1], n)
    phases = rng.uniform(0.0, 2 * np.pi, n)
    sig = ProbeSignal(freqs, amps, phases, seed, clamp)
    if clamp is not None:
        pk = sig.peak()
        if pk > clamp:
            sig = sig.scaled(clamp / pk)
    return sig


@dataclass
class FrequencyResponse:
    freqs: np.ndarray
    values: np.ndarray
    coherence: np.ndarray | None = None

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, float)
        self.values = np.asarray(self.values, complex)
        if np.any(np.diff(self.freqs) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("frequency response values must be finite")

    @property
    def magnitude_db(self):
        return 20 * np.log10(np.abs(self.values))

    @property
    def phase_deg(self):
        return np.degrees(np.angle(self.values))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        coh = self.coherence if self.coherence is not None else np.ones(len(self.freqs))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["f_hz", "re", "im", "mag_db", "phase_deg", "coherence"])
            for row in zip(self.freqs, self.values.real, self.values.imag, self.magnitude_db,
                           self.phase_deg, coh):
                w.writerow([repr(float(v)) for v in row])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "FrequencyResponse":
        d = np.genfromtxt(path, delimiter=",", names=True)
        return cls(d["f_hz"], d["re"] + 1j * d["im"], d["coherence"])

    @classmethod
    def from_tf(cls, tf: "TransferFunctionModel", freqs) -> "FrequencyResponse":
        freqs = np.asarray(freqs, float)
        return cls(freqs, tf(2j * np.pi * freqs))

    def band(self, f_lo: float, f_hi: float) -> "FrequencyResponse":
        k = (self.freqs >= f_lo - 1e-12) & (self.freqs <= f_hi + 1e-12)
        coh = self.coherence[k] if self.coherence is not None else None
        return FrequencyResponse(self.freqs[k], self.values[k], coh)


def estimate_frf(u, y, freqs, dt: float | None = None, period: float | None = None,
                 u_floor: float = 1e-8) -> FrequencyResponse:
    """Y(f)/U(f) at the probed frequencies from rectangular-window DFTs over
    an integer number of probe periods.

    ``u`` and ``y`` are arrays sampled at ``dt`` or single-channel
    TimeSeriesSets. Coherence is computed across periods (1 when the record
    holds a single period). Bins where ``|U|`` falls below ``u_floor`` times
    its maximum are dropped with a warning.
    """
    if isinstance(u, TimeSeriesSet):
        dt = u.dt
        u = u[u.names[0]]
    if isinstance(y, TimeSeriesSet):
        y = y[y.names[0]]
    u = np.asarray(u, float)
    y = np.asarray(y, float)
    if u.shape != y.shape:
        raise ValueError("u and y must share a time base")
    if dt is None:
        raise ValueError("dt is required")
    freqs = np.asarray(freqs, float)
    n = len(u)
    t_rec = n * dt
    if period is None:
        d = np.diff(freqs)
        period = 1.0 / np.min(d) if len(d) else t_rec
    n_per = t_rec / period
    if abs(n_per - round(n_per)) > 1e-6 or round(n_per) < 1:
        raise ValueError(f"record of {t_rec} s is not an integer number of {period} s periods")
    n_per = int(round(n_per))
    bins = freqs * t_rec
    if np.max(np.abs(bins - np.round(bins))) > 1e-6:
        raise ValueError("probe frequencies are not on the record's DFT grid")
    k = np.round(bins).astype(int)
    uf = np.fft.rfft(u)[k]
    yf = np.fft.rfft(y)[k]
    ok = np.abs(uf) > u_floor * np.max(np.abs(uf))
    if not ok.all():
        log.warning("dropping %d bins with negligible input energy", int((~ok).sum()))
    m = n // n_per
    coh = np.ones(len(freqs))
    if n_per > 1:
        kp = np.round(freqs * period).astype(int)
        up = np.fft.rfft(u[: m * n_per].reshape(n_per, m), axis=1)[:, kp]
        yp = np.fft.rfft(y[: m * n_per].reshape(n_per, m), axis=1)[:, kp]
        num = np.abs(np.sum(np.conj(up) * yp, axis=0)) ** 2
        den = np.sum(np.abs(up) ** 2, axis=0) * np.sum(np.abs(yp) ** 2, axis=0)
        coh = np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)
    return FrequencyResponse(freqs[ok], yf[ok] / uf[ok], coh[ok])


@dataclass
class TransferFunctionModel:
    """Continuous-time rational model ``num(s)/den(s)``, highest power first,
    with a monic denominator."""

    num: np.ndarray
    den: np.ndarray
    quality: dict = field(default_factory=dict)

    def __post_init__(self):
        num = np.trim_zeros(np.atleast_1d(np.asarray(self.num, float)), "f")
        den = np.trim_zeros(np.atleast_1d(np.asarray(self.den, float)), "f")
        if len(den) == 0:
            raise ValueError("denominator is zero")
        if len(num) == 0:
            num = np.zeros(1)
        if len(num) > len(den):
            raise ValueError("model must be proper (deg num <= deg den)")
        self.num = num / den[0]
        self.den = den / den[0]

    def __call__(self, s):
        return np.polyval(self.num, s) / np.polyval(self.den, s)

    @property
    def poles(self) -> np.ndarray:
        return np.roots(self.den)

    @property
    def zeros(self) -> np.ndarray:
        return np.roots(self.num)

    @property
    def order(self) -> tuple[int, int]:
        return len(self.num) - 1, len(self.den) - 1

    def to_dict(self) -> dict:
        return {"num": self.num.tolist(), "den": self.den.tolist(), "quality": self.quality}

    def to_json(self, path: str | Path | None = None, **extra) -> str:
        blob = json.dumps({**self.to_dict(), **extra}, indent=2, default=float)
        if path is not None:
            Path(path).write_text(blob)
        return blob

    @classmethod
    def from_json(cls, path: str | Path) -> "TransferFunctionModel":
        d = json.loads(Path(path).read_text())
        return cls(d["num"], d["den"], d.get("quality", {}))

    @classmethod
    def from_poles(cls, poles, zeros=(), gain=1.0) -> "TransferFunctionModel":
        return cls(gain * np.real(np.poly(zeros)) if len(zeros) else [gain],
                   np.real(np.poly(poles)))


def fit_quality(tf: TransferFunctionModel, frf: FrequencyResponse, mag_tol=0.02,
                phase_tol_deg=2.0) -> dict:
    h = tf(2j * np.pi * frf.freqs)
    mag_err = np.abs(np.abs(h) / np.abs(frf.values) - 1.0)
    ph_err = np.abs(np.degrees(np.angle(h / frf.values)))
    q = {"max_mag_err": float(mag_err.max()), "max_phase_err_deg": float(ph_err.max()),
         "mag_tol": mag_tol, "phase_tol_deg": phase_tol_deg}
    q["ok"] = bool(q["max_mag_err"] <= mag_tol and q["max_phase_err_deg"] <= phase_tol_deg)
    return q


def fit_tf(frf: FrequencyResponse, order: tuple[int, int], n_iter: int = 50,
           tol: float = 1e-12, prune_tol: float = 1e-4, weights=None,
           cond_limit: float = 1e13) -> TransferFunctionModel:
    """Rational least-squares fit by Sanathanan-Koerner iteration.

    Each pass solves the linearized problem ``N(s) - H D(s) = 0`` weighted
    by ``1/|D_prev(s)|`` on a frequency-scaled variable. Pole-zero pairs
    closer than ``prune_tol`` (relative) are cancelled. The returned
    model's ``quality`` holds the maximum magnitude and phase errors and
    an ``ok`` flag for the 2 % / 2 degree gate.
    """
    nz, npol = order
    if npol < 1 or nz < 0 or nz > npol:
        raise ValueError("order must satisfy 0 <= nz <= np and np >= 1")
    n_par = nz + 1 + npol
    if len(frf.freqs) < 3 * n_par:
        raise IdentificationError(f"{len(frf.freqs)} bins are too few for order {order}")
    w = 2 * np.pi * frf.freqs
    scale = w.max()
    s = 1j * w / scale
    h = frf.values
    wt = np.ones(len(w)) if weights is None else np.asarray(weights, float)
    sn = np.vander(s, nz + 1)                 # s^nz ... 1
    sd = np.vander(s, npol + 1)[:, 1:]        # s^(np-1) ... 1
    sdn = s ** npol
    d_prev = np.ones(len(s), complex)
    coef_prev = None
    for it in range(n_iter):
        wk = wt / np.abs(d_prev)
        a = np.hstack([sn, -h[:, None] * sd]) * wk[:, None]
        b = h * sdn * wk
        ar = np.vstack([a.real, a.imag])
        br = np.concatenate([b.real, b.imag])
        cs = np.linalg.norm(ar, axis=0)
        cs[cs == 0] = 1.0
        arn = ar / cs
        if np.linalg.cond(arn) > cond_limit:
            raise IdentificationError(
                f"order {order} is too high for the data (near-singular normal equations); "
                "reduce the order to avoid overfitting")
        x, *_ = np.linalg.lstsq(arn, br, rcond=None)
        x = x / cs
        den_s = np.concatenate([[1.0], x[nz + 1:]])
        d_prev = np.polyval(den_s, s)
        if coef_prev is not None and np.linalg.norm(x - coef_prev) <= tol * np.linalg.norm(x):
            break
        coef_prev = x
    num_s = x[:nz + 1]
    # undo scaling: s_scaled = s / scale
    num = num_s / scale ** np.arange(nz, -1, -1)
    den = den_s / scale ** np.arange(npol, -1, -1)
    tf = TransferFunctionModel(num, den)
    tf = prune_cancellations(tf, prune_tol)
    tf.quality = fit_quality(tf, frf)
    tf.quality["iterations"] = it + 1
    tf.quality["order"] = list(tf.order)
    if not tf.quality["ok"]:
        log.warning("fit of order %s misses the quality gate: %.2f%% magnitude, %.2f deg phase",
                    order, 100 * tf.quality["max_mag_err"], tf.quality["max_phase_err_deg"])
    return tf


def prune_cancellations(tf: TransferFunctionModel, rel_tol: float) -> TransferFunctionModel:
    """Remove pole-zero pairs that nearly cancel."""
    if len(tf.num) < 2:
        return tf
    p = list(tf.poles)
    z = list(tf.zeros)
    k = tf.num[0]
    changed = True
    while changed and z:
        changed = False
        for i, zi in enumerate(z):
            dist = [abs(zi - pj) / max(abs(pj), 1e-12) for pj in p]
            j = int(np.argmin(dist))
            if dist[j] < rel_tol:
                z.pop(i)
                p.pop(j)
                changed = True
                break
    if len(p) == len(tf.poles):
        return tf
    return TransferFunctionModel(k * np.real(np.poly(z)) if z else [k], np.real(np.poly(p)))


def dominant_poles(tf: TransferFunctionModel) -> list[Mode]:
    """Denominator roots as Modes, oscillatory ones first by ascending
    damping ratio; real poles carry the ``real`` flag."""
    modes = poles_to_modes(tf.poles)
    for m in modes:
        m.flags = tuple(f for f in m.flags if f != "dominant")
    return modes


def probe_lti(tf: TransferFunctionModel, probe: ProbeSignal, dt: float = 1e-3,
              periods: int = 1, preroll_periods: int = 1):
    """Drive an LTI plant with a probe; return ``(u, y)`` over the
    requested whole periods after a settling pre-roll."""
    n_per = int(round(probe.period / dt))
    n_pre = preroll_periods * n_per
    t = np.arange(n_pre + periods * n_per) * dt
    u = probe(t)
    # first-order-hold discretization matches lsim's linear input
    # interpolation and runs as a single IIR filter pass
    numd, dend, _ = signal.cont2discrete((tf.num, tf.den), dt, method="foh")
    y = signal.lfilter(np.ravel(numd), dend, u)
    return u[n_pre:], y[n_pre:]


def frequency_scan(model: SimulationModel, converter: str, output_channel: str,
                   probe: ProbeSignal, dt: float = 1e-3, preroll: float = 40.0,
                   periods: int = 1, output_rate: float = 100.0) -> tuple[FrequencyResponse, TimeSeriesSet]:
    """Probe a converter's power reference in the time-domain model and
    estimate the FRF from the reference modulation to ``output_channel``.

    SDCs must be disengaged (no SDC attached to the model's system).
    """
    if model.dc is not None and model.dc.sdcs:
        raise IdentificationError("frequency scan requires every SDC disengaged")
    dur = preroll + periods * probe.period
    ts = simulate(None, model=model, events=[Probe(converter, probe, 0.0)], duration=dur, dt=dt,
                  channels=[f"conv:{converter}:dpref", output_channel], output_rate=output_rate)
    rec = ts.slice(preroll, dur - ts.dt)
    y = rec[output_channel]
    if output_channel.endswith(":freq"):
        y = y - model.f0
    frf = estimate_frf(rec[f"conv:{converter}:dpref"], y, probe.freqs, dt=rec.dt,
                       period=probe.period)
    return frf, ts
