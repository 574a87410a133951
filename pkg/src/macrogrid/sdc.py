"""Supplementary damping controller: parameters, transfer function,
pole-placement design and closed-loop checks."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .modal import Mode

if TYPE_CHECKING:
    from .sysid import TransferFunctionModel

log = logging.getLogger(__name__)


class DesignError(ValueError):
    pass


@dataclass
class SdcParams:
    """H(s) = K ((1 + s T1)/(1 + s T2))^m  s Tw/(1 + s Tw).

    ``K`` is in MW per Hz of feedback deviation; ``limit`` clips the output
    (MW, symmetric). ``limit=None`` disables the clip.
    """

    K: float
    T1: float
    T2: float
    Tw: float = 10.0
    m: int = 1
    limit: float | None = None

    def __post_init__(self):
        if not (self.T1 > 0 and self.T2 > 0 and self.Tw > 0):
            raise ValueError("T1, T2 and Tw must be positive")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("m must be an integer >= 1")
        self.m = int(self.m)

    @property
    def alpha(self) -> float:
        return self.T2 / self.T1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path | None = None, **extra) -> str:
        blob = json.dumps({**self.to_dict(), **extra}, indent=2)
        if path is not None:
            Path(path).write_text(blob)
        return blob

    @classmethod
    def from_dict(cls, d: dict) -> "SdcParams":
        return cls(**{k: d[k] for k in ("K", "T1", "T2", "Tw", "m", "limit") if k in d})

    @classmethod
    def from_json(cls, path: str | Path) -> "SdcParams":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def polynomials(self) -> tuple[np.ndarray, np.ndarray]:
        """Numerator and denominator of H(s), highest power first."""
        num = self.K * np.polymul([self.Tw, 0.0], _poly_pow([self.T1, 1.0], self.m))
        den = np.polymul([self.Tw, 1.0], _poly_pow([self.T2, 1.0], self.m))
        return np.atleast_1d(num), np.atleast_1d(den)


def _poly_pow(p, m):
    out = np.array([1.0])
    for _ in range(m):
        out = np.polymul(out, p)
    return out


@dataclass
class DesignTarget:
    """Open-loop dominant pole and desired damping ratio.

    With ``preserve_frequency`` the closed-loop pole keeps the open-loop
    imaginary part; ``sigma_margin`` scales the minimum decay rate.
    """

    lambda_ol: complex
    zeta_target: float
    preserve_frequency: bool = True
    sigma_margin: float = 1.1

    def __post_init__(self):
        self.lambda_ol = complex(self.lambda_ol)
        if not 0 < self.zeta_target < 1:
            raise ValueError("zeta_target must lie in (0, 1)")
        if not self.lambda_ol.imag > 0:
            raise ValueError("open-loop pole must have positive frequency")
        if not self.sigma_margin > 1:
            raise ValueError("sigma_margin must exceed 1 (strictly larger decay)")

    @property
    def lambda_cl(self) -> complex:
        w = self.lambda_ol.imag
        if not self.preserve_frequency:
            # keep |lambda| and move along the circle to the target ratio
            r = abs(self.lambda_ol)
            z = self.zeta_target * self.sigma_margin
            if z >= 1:
                raise DesignError("sigma_margin pushes the target damping above 1")
            return complex(-z * r, r * math.sqrt(1 - z * z))
        return complex(-self.sigma_margin * required_sigma(w, self.zeta_target), w)


def required_sigma(omega_ol: float, zeta: float) -> float:
    """Minimum closed-loop decay rate for damping ratio ``zeta`` at ``omega_ol``."""
    if zeta >= 1:
        raise DesignError("damping ratio must be < 1")
    if zeta < 0:
        raise DesignError("damping ratio must be >= 0")
    return omega_ol * zeta / math.sqrt(1 - zeta * zeta)


def washout(s, Tw):
    return s * Tw / (1 + s * Tw)


def lead_lag(s, T1, T2):
    return (1 + s * T1) / (1 + s * T2)


def eval_sdc(p: SdcParams, s: complex) -> complex:
    """Exact value of H(s)."""
    return complex(p.K * lead_lag(s, p.T1, p.T2) ** p.m * washout(s, p.Tw))


def alpha_from_phase(phi_deg: float) -> float:
    """Lead-lag ratio T2/T1 giving ``phi_deg`` of phase per block at the
    geometric-mean frequency."""
    s = math.sin(math.radians(phi_deg))
    return (1 - s) / (1 + s)


def time_constants(alpha: float, omega: float) -> tuple[float, float]:
    t1 = 1.0 / (omega * math.sqrt(alpha))
    return t1, alpha * t1


@dataclass
class DesignInfo:
    lambda_cl: complex
    h_required: complex
    phase_required_deg: float      # lead-lag share of the required phase, total
    phi_deg: float                 # per block
    alpha_nominal: float           # from the phase formula at s = j omega
    alpha: float                   # after exact placement at lambda_cl
    residual: float
    notes: list[str] = field(default_factory=list)


def design_sdc(g_ol: "TransferFunctionModel", target: DesignTarget,
               max_phase_per_block: float = 55.0, m_max: int = 4, Tw: float = 10.0,
               limit: float | None = None, exact: bool = True,
               return_info: bool = False):
    """Lead-lag pole placement.

    The closed-loop pole ``lambda_cl`` is placed by requiring
    ``H(lambda_cl) = -1 / G_ol(lambda_cl)``. The number of blocks ``m`` is
    the smallest integer keeping the per-block phase within
    ``max_phase_per_block``. The washout's own phase at ``lambda_cl`` is
    subtracted first. The ratio alpha starts from the sinusoidal-frequency
    formula ``(1 - sin phi)/(1 + sin phi)``; with ``exact`` it is then
    refined so the blocks deliver the phase at the complex ``lambda_cl``
    itself, which makes the placement residual vanish. Either way
    ``T1 = 1/(omega_cl sqrt(alpha))`` and ``T2 = alpha T1``, and ``K``
    supplies the remaining magnitude.
    """
    lam = target.lambda_cl
    if lam.real >= 0:
        raise DesignError(f"closed-loop target {lam} is not in the left half plane")
    g = complex(g_ol(lam))
    if g == 0 or not np.isfinite(g):
        raise DesignError(f"G_ol({lam}) = {g}; cannot invert")
    h_req = -1.0 / g
    w_lam = washout(lam, Tw)
    psi = float(np.angle(h_req / w_lam, deg=True))       # lead-lag share, (-180, 180]
    m = max(1, math.ceil(abs(psi) / max_phase_per_block - 1e-12))
    if m > m_max:
        raise DesignError(f"required phase {psi:.1f} deg needs {m} blocks, more than "
                          f"m_max = {m_max} at {max_phase_per_block} deg per block")
    phi = psi / m
    omega = lam.imag
    alpha0 = alpha_from_phase(phi)
    alpha = alpha0
    notes = []
    if exact and abs(phi) > 1e-12:
        def f(a):
            t1, t2 = time_constants(a, omega)
            return math.degrees(np.angle(lead_lag(lam, t1, t2))) - phi
        lo, hi = 1e-6, 1e6
        if f(lo) * f(hi) < 0:
            alpha = brentq(f, lo, hi, xtol=1e-15, rtol=1e-14, maxiter=200)
        else:
            notes.append("exact placement not bracketed; used the nominal alpha")
    elif abs(phi) <= 1e-12:
        alpha = 1.0
    t1, t2 = time_constants(alpha, omega)
    shape = lead_lag(lam, t1, t2) ** m * w_lam
    K = abs(h_req) / abs(shape)
    p = SdcParams(K=K, T1=t1, T2=t2, Tw=Tw, m=m, limit=limit)
    residual = abs(1 + g * eval_sdc(p, lam))
    if not return_info:
        return p
    return p, DesignInfo(lam, h_req, psi, phi, alpha0, alpha, residual, notes)


def placement_residual(g_ol, p: SdcParams, lam: complex) -> float:
    return abs(1 + complex(g_ol(lam)) * eval_sdc(p, lam))


def closed_loop_poles(g_ol: "TransferFunctionModel", p: SdcParams) -> list[Mode]:
    """Roots of the characteristic polynomial of G/(1 + G H) as Modes, one
    per conjugate pair, sorted by damping ratio. The lowest-damped
    oscillatory mode carries the ``dominant`` flag; right-half-plane poles
    carry ``unstable``."""
    ng, dg = np.asarray(g_ol.num, float), np.asarray(g_ol.den, float)
    if p.K == 0:
        char = dg
    else:
        nh, dh = p.polynomials()
        char = np.polyadd(np.polymul(dg, dh), np.polymul(ng, nh))
    roots = np.roots(char)
    return poles_to_modes(roots)


def poles_to_modes(roots) -> list[Mode]:
    modes = []
    for r in roots:
        if r.imag < -1e-12 * max(1.0, abs(r)):
            continue
        lam = complex(r.real, r.imag if abs(r.imag) > 1e-12 * max(1.0, abs(r)) else 0.0)
        flags = ("unstable",) if lam.real > 0 else ()
        modes.append(Mode.from_pole(lam, flags=flags))
    modes.sort(key=lambda m: (m.damping_ratio if m.is_oscillatory else np.inf, m.sigma))
    for m in modes:
        if m.is_oscillatory:
            m.flags = tuple(m.flags) + ("dominant",)
            break
    return modes


def dominant_mode(modes: list[Mode]) -> Mode:
    for m in modes:
        if "dominant" in m.flags:
            return m
    raise DesignError("no oscillatory closed-loop mode")


def nearest_mode(modes: list[Mode], freq_hz: float) -> Mode:
    osc = [m for m in modes if m.is_oscillatory]
    if not osc:
        raise DesignError("no oscillatory mode")
    return min(osc, key=lambda m: abs(m.freq_hz - freq_hz))


def tune_gain(g_ol, p: SdcParams, freq_hz: float, bounds=(0.25, 4.0)) -> SdcParams:
    """Bounded 1-D search on K maximizing the damping of the closed-loop mode
    nearest ``freq_hz``, other parameters fixed."""
    def cost(scale):
        q = SdcParams(p.K * scale, p.T1, p.T2, p.Tw, p.m, p.limit)
        return -nearest_mode(closed_loop_poles(g_ol, q), freq_hz).damping_ratio
    res = minimize_scalar(cost, bounds=bounds, method="bounded", options={"xatol": 1e-4})
    return SdcParams(p.K * res.x, p.T1, p.T2, p.Tw, p.m, p.limit)
