"""Ringdown modal estimation: Prony, Matrix Pencil and mode shapes."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .dynsim import TimeSeriesSet

log = logging.getLogger(__name__)


class ModalError(ValueError):
    pass


@dataclass
class Mode:
    """One eigenvalue ``-sigma +/- j 2 pi freq_hz``.

    ``sigma`` is positive for a decaying mode. ``residue`` is the complex
    amplitude of the positive-frequency exponential at the start of the
    analysed window (zero when not estimated from data).
    """

    freq_hz: float
    sigma: float
    energy: float = 1.0
    residue: complex = 0j
    flags: tuple = ()

    @property
    def omega(self) -> float:
        return 2 * np.pi * self.freq_hz

    @property
    def damping_ratio(self) -> float:
        mag = np.hypot(self.sigma, self.omega)
        return float(self.sigma / mag) if mag > 0 else 0.0

    @property
    def pole(self) -> complex:
        return complex(-self.sigma, self.omega)

    @property
    def is_oscillatory(self) -> bool:
        return self.freq_hz > 0

    @classmethod
    def from_pole(cls, lam: complex, **kw) -> "Mode":
        flags = list(kw.pop("flags", ()))
        if abs(lam.imag) == 0.0:
            flags.append("real")
        if lam.real > 1e-6:
            flags.append("growing")
        return cls(freq_hz=abs(lam.imag) / (2 * np.pi), sigma=-lam.real, flags=tuple(flags), **kw)

    def to_dict(self) -> dict:
        return {"freq_hz": self.freq_hz, "sigma": self.sigma, "damping_ratio": self.damping_ratio,
                "energy": self.energy, "residue": [self.residue.real, self.residue.imag],
                "flags": list(self.flags)}


class ModeSet(list):
    """List of modes sorted by energy, with the fit's relative RMS
    reconstruction error attached."""

    def __init__(self, modes=(), rel_error: float = float("nan"), poles=None, residues=None):
        super().__init__(modes)
        self.rel_error = rel_error
        self.poles = poles          # all continuous-time poles kept in the fit
        self.residues = residues

    def dominant(self) -> Mode:
        if not self:
            raise ModalError("no modes found")
        return self[0]

    def nearest(self, freq_hz: float) -> Mode:
        if not self:
            raise ModalError("no modes found")
        return min(self, key=lambda m: abs(m.freq_hz - freq_hz))


@dataclass
class ModeShape:
    mode: Mode
    channels: list[str]
    residues: np.ndarray           # complex, per channel
    amplitude: np.ndarray          # normalized, largest = 1
    phase_deg: np.ndarray          # relative to the largest channel, (-180, 180]
    warnings: list[str] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "amplitude", "phase_deg"])
            for c, a, p in zip(self.channels, self.amplitude, self.phase_deg):
                w.writerow([c, repr(float(a)), repr(float(p))])
        return path

    def to_dict(self) -> dict:
        return {"mode": self.mode.to_dict(), "channels": self.channels,
                "amplitude": self.amplitude.tolist(), "phase_deg": self.phase_deg.tolist(),
                "warnings": self.warnings}


def wrap_deg(ph):
    """Wrap degrees into (-180, 180]."""
    w = np.mod(np.asarray(ph, dtype=float) + 180.0, 360.0) - 180.0
    return np.where(w <= -180.0, 180.0, w)


def _single_channel(ts, dt=None, channel=None):
    if isinstance(ts, TimeSeriesSet):
        name = channel if channel is not None else ts.names[0]
        if channel is None and len(ts.names) > 1:
            raise ModalError("multi-channel input: name the channel to analyse")
        return np.asarray(ts[name], float), ts.dt
    if dt is None or not dt > 0:
        raise ModalError("a positive dt is required for array input")
    return np.asarray(ts, float).ravel(), float(dt)


def preprocess(ts: TimeSeriesSet, band: tuple[float, float] = (0.1, 2.0),
               order: int = 4) -> TimeSeriesSet:
    """Remove mean and linear trend, then apply a zero-phase Butterworth
    band-pass (``sosfiltfilt``) to every channel. Length is preserved."""
    lo, hi = band
    nyq = 0.5 / ts.dt
    if not (0 < lo < hi < nyq):
        raise ModalError(f"band {band} Hz must satisfy 0 < f_lo < f_hi < Nyquist ({nyq} Hz)")
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=1.0 / ts.dt, output="sos")
    out = {}
    for name, y in ts.channels.items():
        y = signal.detrend(y, type="linear")
        out[name] = signal.sosfiltfilt(sos, y) if len(y) > 3 * (2 * order + 1) else y
    meta = dict(ts.meta)
    meta["preprocess"] = {"band": list(band), "order": order}
    return TimeSeriesSet(ts.t0, ts.dt, out, dict(ts.units), meta)


def _fit_residues(y: np.ndarray, z: np.ndarray):
    """Least-squares complex amplitudes for discrete poles ``z``."""
    k = np.arange(len(y))[:, None]
    vand = np.exp(k * np.log(z.astype(complex))[None, :])
    # unit-norm columns keep spurious growing poles from swamping the rest
    norm = np.linalg.norm(vand, axis=0)
    norm[norm == 0] = 1.0
    b, *_ = np.linalg.lstsq(vand / norm, y.astype(complex), rcond=None)
    return b / norm, vand


def _modes_from_fit(y, z, dt, energy_tol, include_real):
    keep = np.abs(z) > 1e-10
    z = z[keep]
    b, vand = _fit_residues(y, z)
    fit = (vand @ b).real
    scale = np.sqrt(np.mean(y ** 2))
    rel = float(np.sqrt(np.mean((fit - y) ** 2)) / scale) if scale > 0 else 0.0
    s = np.log(z) / dt
    energy = np.sum(np.abs(vand * b[None, :]) ** 2, axis=0)
    modes = []
    emax = energy.max() if len(energy) else 0.0
    for si, bi, ei in zip(s, b, energy):
        # one entry per conjugate pair, counting both halves of its energy
        if si.imag < 0:
            continue
        if ei < energy_tol * emax:
            continue
        is_real = abs(si.imag) < 1e-9 / dt
        if is_real and not include_real:
            continue
        e = ei if is_real else 2 * ei
        modes.append(Mode.from_pole(complex(si.real, 0.0 if is_real else si.imag),
                                    energy=float(e), residue=complex(bi)))
    modes.sort(key=lambda m: -m.energy)
    top = modes[0].energy if modes else 1.0
    for m in modes:
        m.energy = m.energy / top
    return ModeSet(modes, rel, s, b)


def prony(ts, order: int | None = None, dt: float | None = None, channel: str | None = None,
          rank: int | None = None, sv_tol: float = 1e-10, energy_tol: float = 1e-10,
          expected_modes: int = 2, include_real: bool = False) -> ModeSet:
    """Prony analysis of one channel.

    Parameters
    ----------
    ts : TimeSeriesSet (single channel or ``channel`` given) or 1-D array
    order : linear-prediction order, default ``2 * expected_modes + 4``
    rank : truncate the prediction matrix to this rank (total least-squares
        style noise suppression). By default singular values below
        ``sv_tol * s_max`` are discarded.
    energy_tol : components whose energy is below this fraction of the
        strongest are dropped (spurious roots of an over-ordered predictor).

    Returns
    -------
    ModeSet
        Oscillatory modes sorted by energy; ``rel_error`` is the relative
        RMS reconstruction error of the fit.
    """
    y, dt = _single_channel(ts, dt, channel)
    n = order if order is not None else 2 * expected_modes + 4
    if n < 1:
        raise ModalError("model order must be >= 1")
    if len(y) < 3 * n:
        raise ModalError(f"{len(y)} samples is fewer than 3x the model order {n}; "
                         "lower the order or lengthen the window")
    if not np.all(np.isfinite(y)):
        raise ModalError("signal contains non-finite samples")
    # forward prediction y[k] = sum_i c_i y[k-i]
    a = np.column_stack([y[n - i - 1:len(y) - i - 1] for i in range(n)])
    rhs = y[n:]
    u, sv, vh = np.linalg.svd(a, full_matrices=False)
    if sv[0] == 0:
        raise ModalError("linear prediction matrix is zero; signal has no content")
    r = rank if rank is not None else int(np.sum(sv > sv_tol * sv[0]))
    r = min(r, len(sv))
    if r < 1 or (rank is None and r < 2 and not include_real):
        raise ModalError("linear prediction is ill-conditioned (effective rank "
                         f"{r}); change the model order or the analysis window")
    c = vh[:r].T @ ((u[:, :r].T @ rhs) / sv[:r])
    z = np.roots(np.concatenate([[1.0], -c]))
    return _modes_from_fit(y, z, dt, energy_tol, include_real)


def matrix_pencil(ts, pencil_param: int | None = None, dt: float | None = None,
                  channel: str | None = None, order: int | None = None, sv_tol: float = 1e-8,
                  energy_tol: float = 1e-10, include_real: bool = False) -> ModeSet:
    """Matrix Pencil estimate of one channel.

    ``pencil_param`` L defaults to ``N // 3`` and must lie in
    ``[N/3, N/2]``. The model order is ``order`` when given, otherwise the
    number of singular values above ``sv_tol * s_max``.
    """
    y, dt = _single_channel(ts, dt, channel)
    n_s = len(y)
    lp = pencil_param if pencil_param is not None else n_s // 3
    if not (n_s // 3 <= lp <= n_s // 2 + 1) or lp < 2:
        raise ModalError(f"pencil parameter {lp} outside [N/3, N/2] for N = {n_s}")
    hank = np.lib.stride_tricks.sliding_window_view(y, lp + 1)
    _, sv, vh = np.linalg.svd(hank, full_matrices=False)
    if sv[0] == 0:
        raise ModalError("no modes found: signal is identically zero")
    m = order if order is not None else int(np.sum(sv > sv_tol * sv[0]))
    if m < 1:
        raise ModalError("no modes found: all singular values below threshold")
    v = vh[:m].T.conj()                 # (L+1) x m principal right singular vectors
    v1 = v[:-1].conj()
    v2 = v[1:].conj()
    z = np.linalg.eigvals(np.linalg.pinv(v1) @ v2)
    return _modes_from_fit(y, z, dt, energy_tol, include_real)


def synthesize(modes: Sequence[Mode], n: int, dt: float) -> np.ndarray:
    """Real signal from modes with their residues."""
    t = np.arange(n) * dt
    out = np.zeros(n)
    for m in modes:
        term = m.residue * np.exp(m.pole * t)
        out += term.real if "real" in m.flags else 2 * term.real
    return out


def mode_shapes(ts: TimeSeriesSet, modes: Sequence[Mode], channels: Sequence[str] | None = None,
                residual_warn: float = 0.1, fit_offset: bool = True) -> list[ModeShape]:
    """Per-channel complex residues of fixed modes by linear least squares.

    Amplitudes are normalized so the largest channel is 1; phases are
    relative to that channel. A channel whose fit residual exceeds
    ``residual_warn`` of its energy is noted in each shape's warnings.
    """
    names = list(channels) if channels is not None else ts.names
    if not modes:
        return []
    t = np.arange(len(ts)) * ts.dt
    cols = []
    for m in modes:
        e = np.exp(m.pole * t)
        cols += [e, e.conj()] if m.is_oscillatory else [e]
    if fit_offset:
        cols.append(np.ones_like(t))
    basis = np.column_stack(cols)
    ydata = np.column_stack([ts[c] for c in names]).astype(complex)
    coef, *_ = np.linalg.lstsq(basis, ydata, rcond=None)
    resid = ydata - basis @ coef
    warnings = []
    for j, c in enumerate(names):
        en = np.sum(np.abs(ydata[:, j] - ydata[:, j].mean()) ** 2)
        frac = float(np.sum(np.abs(resid[:, j]) ** 2) / en) if en > 0 else 0.0
        if frac > residual_warn:
            warnings.append(f"channel {c}: residual is {frac:.1%} of signal energy")
    for w in warnings:
        log.warning(w)
    shapes = []
    row = 0
    for m in modes:
        r = coef[row]
        row += 2 if m.is_oscillatory else 1
        amp = np.abs(r)
        ref = int(np.argmax(amp))
        top = amp[ref]
        norm = amp / top if top > 0 else amp
        ph = wrap_deg(np.degrees(np.angle(r) - np.angle(r[ref])))
        shapes.append(ModeShape(m, names, r, norm, ph, list(warnings)))
    return shapes


@dataclass
class DampingFlag:
    mode: Mode
    critical: bool
    unstable: bool


def damping_report(modes: Sequence[Mode], zeta_min: float = 0.05) -> list[DampingFlag]:
    """Flag modes with damping ratio below ``zeta_min`` as critical."""
    return [DampingFlag(m, m.damping_ratio < zeta_min, m.sigma < -1e-6) for m in modes]


def match_modes(estimates: Sequence[Sequence[Mode]], tol_hz: float = 0.05) -> list[list[Mode]]:
    """Group modes from several events whose frequencies lie within
    ``tol_hz`` of the group's first member."""
    groups: list[list[Mode]] = []
    for est in estimates:
        for m in est:
            for g in groups:
                if abs(g[0].freq_hz - m.freq_hz) <= tol_hz:
                    g.append(m)
                    break
            else:
                groups.append([m])
    return groups


def modes_to_json(modes: Sequence[Mode], path: str | Path | None = None, **extra) -> str:
    blob = json.dumps({"modes": [m.to_dict() for m in modes], **extra}, indent=2)
    if path is not None:
        Path(path).write_text(blob)
    return blob


def analyze_ringdown(ts: TimeSeriesSet, channel: str, band=(0.1, 2.0), method: str = "mp",
                     order: int | None = 12, fs: float = 10.0, min_energy: float = 1e-3) -> ModeSet:
    """Preprocess a ringdown window, resample it to ``fs`` and estimate the
    modes of one channel that fall inside ``band``.

    The band-pass doubles as the anti-alias filter, so plain subsampling is
    used when the recorded rate is an integer multiple of ``fs``.
    """
    pre = preprocess(ts.select([channel]), band)
    y = pre[channel]
    step = max(1, int(round(1.0 / (fs * ts.dt))))
    if band[1] >= 0.5 / (step * ts.dt):
        raise ModalError(f"band upper edge {band[1]} Hz is above the resampled Nyquist rate")
    y = y[::step]
    dt = ts.dt * step
    if method == "prony":
        est = prony(y, dt=dt, order=3 * (order or 12), rank=order)
    elif method == "mp":
        est = matrix_pencil(y, dt=dt, order=order, sv_tol=1e-3)
    else:
        raise ValueError(f"unknown method {method!r}")
    lo, hi = band
    kept = [m for m in est if lo <= m.freq_hz <= hi and m.energy >= min_energy]
    return ModeSet(kept, est.rel_error, est.poles, est.residues)
