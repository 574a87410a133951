"""Fixed-step RK4 simulation of AC interconnections coupled through an MTDC
network, with a disturbance scheduler and a decimating channel recorder."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .grid import NetworkDynamics, PowerNetwork, Topology, ac_powerflow
from .mtdc import AcDcSolution, MtdcDynamics, MtdcSystem, sequential_acdc_powerflow

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


# -- events -----------------------------------------------------------------

@dataclass
class BrakeInsertion:
    """Temporary resistive shunt sized to draw ``mw`` at the pre-event voltage."""

    bus: str
    mw: float
    t_on: float
    duration: float = 0.5
    kind = "brake_insertion"

    @property
    def start(self):
        return self.t_on

    @property
    def end(self):
        return self.t_on + self.duration


@dataclass
class GenTrip:
    unit: str
    t: float
    kind = "gen_trip"

    @property
    def start(self):
        return self.t

    end = start


@dataclass
class BranchTrip:
    branch: str
    t: float
    kind = "branch_trip"

    @property
    def start(self):
        return self.t

    end = start


@dataclass
class Pulse:
    converter: str
    dp_mw: float
    t_on: float
    duration: float
    kind = "pulse"

    @property
    def start(self):
        return self.t_on

    @property
    def end(self):
        return self.t_on + self.duration


@dataclass
class Probe:
    """Multisine added to a converter's power reference from ``t_on``."""

    converter: str
    signal: object          # sysid.ProbeSignal, anything callable t -> MW
    t_on: float = 0.0
    kind = "probe"

    @property
    def start(self):
        return self.t_on

    end = start


Event = BrakeInsertion | GenTrip | BranchTrip | Pulse | Probe


def _check_event(ev):
    if ev.start < 0:
        raise ValueError(f"{ev.kind}: start time must be >= 0")
    dur = getattr(ev, "duration", None)
    if dur is not None and not dur > 0:
        raise ValueError(f"{ev.kind}: duration must be > 0")


def event_to_dict(ev) -> dict:
    d = {"kind": ev.kind}
    for k, v in ev.__dict__.items():
        d[k] = v.to_dict() if hasattr(v, "to_dict") else v
    return d


# -- time series --------------------------------------------------------------

@dataclass
class TimeSeriesSet:
    t0: float
    dt: float
    channels: dict[str, np.ndarray]
    units: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise ValueError("all channels must have equal length")
        self.channels = {k: np.asarray(v, dtype=float) for k, v in self.channels.items()}

    def __len__(self):
        return len(next(iter(self.channels.values()))) if self.channels else 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.channels[name]

    @property
    def names(self) -> list[str]:
        return list(self.channels)

    @property
    def time(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (len(self) - 1)

    def select(self, names: Sequence[str]) -> "TimeSeriesSet":
        return TimeSeriesSet(self.t0, self.dt, {n: self.channels[n] for n in names},
                             {n: self.units.get(n, "") for n in names}, dict(self.meta))

    def slice(self, t_start: float, t_stop: float) -> "TimeSeriesSet":
        """Samples with ``t_start <= t <= t_stop`` (to half a sample)."""
        i0 = int(round((t_start - self.t0) / self.dt))
        i1 = int(round((t_stop - self.t0) / self.dt))
        if i0 < 0 or i1 >= len(self) or i1 < i0:
            raise ValueError(f"window [{t_start}, {t_stop}] s outside data "
                             f"[{self.t0}, {self.t_end}] s")
        return TimeSeriesSet(self.t0 + i0 * self.dt, self.dt,
                             {k: v[i0:i1 + 1].copy() for k, v in self.channels.items()},
                             dict(self.units), dict(self.meta))

    def to_csv(self, path: str | Path) -> Path:
        """Write the CSV plus a ``.json`` manifest next to it."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *self.channels])
            cols = list(self.channels.values())
            for i, t in enumerate(self.time):
                w.writerow([repr(float(t)), *(repr(float(c[i])) for c in cols)])
        manifest = {"t0": self.t0, "dt": self.dt, "units": self.units, **self.meta}
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                        default=_json_default))
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "TimeSeriesSet":
        path = Path(path)
        data = np.genfromtxt(path, delimiter=",", names=True, deletechars="", ndmin=1)
        names = list(data.dtype.names)
        t = np.atleast_1d(data[names[0]])
        man = path.with_suffix(".json")
        meta = json.loads(man.read_text()) if man.exists() else {}
        dt = meta.pop("dt", float(t[1] - t[0]) if len(t) > 1 else 1.0)
        t0 = meta.pop("t0", float(t[0]))
        if len(t) > 2 and np.max(np.abs(np.diff(t) - dt)) > 1e-6 * max(dt, 1.0):
            raise ValueError(f"{path}: time column is not uniformly sampled")
        units = meta.pop("units", {})
        return cls(t0, dt, {n: np.atleast_1d(data[n]) for n in names[1:]}, units, meta)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(type(o))


# -- model ------------------------------------------------------------------

_UNITS = {"freq": "Hz", "vm": "pu", "va": "rad", "speed": "pu", "angle": "rad", "pm": "pu",
          "p": "MW", "q": "Mvar", "pdc": "MW", "dpref": "MW", "sdc": "MW", "v": "pu"}


class SimulationModel:
    """EI + WI + MTDC dynamic model initialized from the sequential AC-DC
    powerflow. Either AC network or the MTDC system may be omitted."""

    def __init__(self, ei: PowerNetwork | None, wi: PowerNetwork | None = None,
                 sys: MtdcSystem | None = None, acdc: AcDcSolution | None = None,
                 freq_filter_time_const: float = 0.02):
        nets = [n for n in (ei, wi) if n is not None]
        if not nets:
            raise ValueError("at least one AC network is required")
        if sys is not None:
            acdc = acdc or sequential_acdc_powerflow(ei, wi, sys)
            pfs = [acdc.ac[n.name] for n in nets]
        else:
            pfs = [ac_powerflow(n, tol=1e-10) for n in nets]
        self.nets = nets
        self.sys = sys
        self.acdc = acdc
        self.pfs = pfs
        self.grid = NetworkDynamics(nets, pfs, freq_filter_time_const)
        g = self.grid
        self.f0 = g.f_nominal
        self.base_mva = g.base_mva
        self.dc = MtdcDynamics(sys, g.bus_idx, g.v0, acdc, g.f_nominal) if sys is not None else None
        self.sl_grid = slice(0, g.n_states)
        n_dc = self.dc.n_states if self.dc else 0
        self.sl_dc = slice(g.n_states, g.n_states + n_dc)
        self.n_states = g.n_states + n_dc
        self.x0 = np.concatenate([g.x0, self.dc.x0 if self.dc else np.zeros(0)])
        if self.dc:
            self.conv_map = np.zeros((g.nb, self.dc.nc))
            self.conv_map[self.dc.conv_bus, np.arange(self.dc.nc)] = 1.0
            self.sdc_feedback = [self._feedback_ref(att.feedback) for _, att, _ in self.dc.sdcs]
        else:
            self.sdc_feedback = []
        self.conv_index = {c: k for k, c in enumerate(self.dc.conv_ids)} if self.dc else {}

    def _feedback_ref(self, name: str):
        parts = name.split(":")
        if len(parts) == 3 and parts[0] == "bus" and parts[2] == "freq" and parts[1] in self.grid.bus_idx:
            return ("bus", self.grid.bus_idx[parts[1]])
        if len(parts) == 3 and parts[0] == "gen" and parts[2] == "speed" and parts[1] in self.grid.machine_ids:
            return ("gen", self.grid.machine_ids.index(parts[1]))
        raise ValueError(f"unknown SDC feedback channel {name!r}")

    def rhs(self, x: np.ndarray, topo: Topology, dp: np.ndarray | None):
        """Full state derivative. ``dp`` is the external converter power
        reference modulation in pu. Returns ``(dx, aux)``."""
        g = self.grid
        xg = x[self.sl_grid]
        if self.dc is None:
            v, i_gfm = g.solve_network(xg, None, topo)
            return g.rhs(xg, v, i_gfm, topo), (v, i_gfm, None, None, None)
        xd = x[self.sl_dc]
        i_conv = self.dc.injections(xd)
        v, i_gfm = g.solve_network(xg, self.conv_map @ i_conv, topo)
        ys = []
        for kind, k in self.sdc_feedback:
            if kind == "bus":
                slip = np.angle(v[k] * np.exp(-1j * xg[g.sl_meas][k])) / (g.t_meas * g.omega_b)
                ys.append(self.f0 * slip)
            else:
                ys.append(self.f0 * (xg[g.sl_omega][k] - 1.0))
        dxd, s_ac, p_dc, sdc_out = self.dc.rhs(xd, v[self.dc.conv_bus],
                                               dp if dp is not None else np.zeros(self.dc.nc), ys)
        dx = np.empty_like(x)
        dx[self.sl_grid] = g.rhs(xg, v, i_gfm, topo)
        dx[self.sl_dc] = dxd
        return dx, (v, i_gfm, s_ac, p_dc, sdc_out)

    # channels

    def available_channels(self) -> list[str]:
        g = self.grid
        names = [f"bus:{b}:freq" for b in g.bus_ids]
        names += [f"bus:{b}:vm" for b in g.bus_ids] + [f"bus:{b}:va" for b in g.bus_ids]
        names += [f"gen:{m}:speed" for m in g.machine_ids] + [f"gen:{m}:angle" for m in g.machine_ids]
        names += [f"gen:{m}:pm" for m in g.machine_ids]
        names += [f"gfm:{u}:p" for u in g.gfm_ids]
        if self.dc:
            for c in self.dc.conv_ids:
                names += [f"conv:{c}:p", f"conv:{c}:q", f"conv:{c}:pdc", f"conv:{c}:dpref"]
            names += [f"conv:{self.dc.conv_ids[k]}:sdc" for k, _, _ in self.dc.sdcs]
            names += [f"dc:{n.id}:v" for n in self.sys.nodes]
        return names

    def default_channels(self) -> list[str]:
        g = self.grid
        names = [f"bus:{b}:freq" for b in g.bus_ids] + [f"gen:{m}:speed" for m in g.machine_ids]
        if self.dc:
            names += [f"conv:{c}:p" for c in self.dc.conv_ids]
        return names

    def _channel_plan(self, names: Sequence[str]):
        g = self.grid
        lookup = {}
        for grp, ids in (("bus", g.bus_ids), ("gen", g.machine_ids), ("gfm", g.gfm_ids)):
            for k, i in enumerate(ids):
                lookup[(grp, i)] = k
        if self.dc:
            for k, c in enumerate(self.dc.conv_ids):
                lookup[("conv", c)] = k
            for k, n in enumerate(self.sys.nodes):
                lookup[("dc", n.id)] = k
            sdc_pos = {k: j for j, (k, _, _) in enumerate(self.dc.sdcs)}
        plan = []
        for name in names:
            parts = name.split(":")
            if len(parts) != 3 or (parts[0], parts[1]) not in lookup:
                raise ValueError(f"unknown channel {name!r}")
            grp, ident, qty = parts
            k = lookup[(grp, ident)]
            key = f"{grp}:{qty}"
            if key not in _GROUPS:
                raise ValueError(f"unknown channel quantity {name!r}")
            if key == "conv:sdc":
                if k not in sdc_pos:
                    raise ValueError(f"converter {ident} has no SDC attached")
                k = sdc_pos[k]
            plan.append((key, k))
        return plan


def _grp_bus_freq(m, x, aux, dp):
    return m.grid.bus_frequency(x[m.sl_grid], aux[0])


_GROUPS: dict[str, Callable] = {
    "bus:freq": _grp_bus_freq,
    "bus:vm": lambda m, x, aux, dp: np.abs(aux[0]),
    "bus:va": lambda m, x, aux, dp: np.angle(aux[0]),
    "gen:speed": lambda m, x, aux, dp: x[m.sl_grid][m.grid.sl_omega],
    "gen:angle": lambda m, x, aux, dp: x[m.sl_grid][m.grid.sl_delta],
    "gen:pm": lambda m, x, aux, dp: x[m.sl_grid][m.grid.sl_pm],
    "gfm:p": lambda m, x, aux, dp: (aux[0][m.grid.g_bus] * np.conj(aux[1])).real * m.base_mva,
    "conv:p": lambda m, x, aux, dp: aux[2].real * m.base_mva,
    "conv:q": lambda m, x, aux, dp: aux[2].imag * m.base_mva,
    "conv:pdc": lambda m, x, aux, dp: aux[3] * m.base_mva,
    "conv:dpref": lambda m, x, aux, dp: _total_dp(m, dp, aux),
    "conv:sdc": lambda m, x, aux, dp: aux[4],
    "dc:v": lambda m, x, aux, dp: x[m.sl_dc][m.dc.sl_vdc],
}


def _total_dp(m, dp, aux):
    out = (dp if dp is not None else np.zeros(m.dc.nc)) * m.base_mva
    out = out.copy()
    for j, (k, _, _) in enumerate(m.dc.sdcs):
        out[k] += aux[4][j]
    return out


# -- scheduler ----------------------------------------------------------------

def _sorted_events(events: Sequence) -> list:
    """Sort by start time; ties keep declaration order."""
    for ev in events:
        _check_event(ev)
    return [ev for _, _, ev in sorted((ev.start, i, ev) for i, ev in enumerate(events))]


def simulate(ei: PowerNetwork | None, wi: PowerNetwork | None = None, sys: MtdcSystem | None = None,
             events: Sequence = (), duration: float = 20.0, dt: float = 1e-3,
             channels: Sequence[str] | None = None, output_rate: float | None = 100.0,
             seed: int | None = None, model: SimulationModel | None = None,
             acdc: AcDcSolution | None = None) -> TimeSeriesSet:
    """Run a disturbance simulation.

    Parameters
    ----------
    ei, wi, sys : networks and MTDC system (``wi``/``sys`` optional)
    events : sequence of BrakeInsertion, GenTrip, BranchTrip, Pulse, Probe
    duration, dt : seconds. Event times are rounded to the nearest step.
    channels : channel names, ``<group>:<id>:<quantity>``; defaults to all
        bus frequencies, machine speeds and converter powers.
    output_rate : Hz. Samples are trapezoidal block averages over
        ``1/output_rate``, labelled with the block start time; ``None``
        records every step.
    seed : recorded in the manifest; the integration itself is
        deterministic.
    model : prebuilt SimulationModel (skips powerflow and initialization).
    """
    if model is None:
        model = SimulationModel(ei, wi, sys, acdc)
    m = model
    if not dt > 0 or not duration > 0:
        raise ValueError("dt and duration must be > 0")
    n_steps = int(round(duration / dt))
    if output_rate is None:
        dec = 1
    else:
        dec = int(round(1.0 / (output_rate * dt)))
        if dec < 1 or abs(dec * dt * output_rate - 1.0) > 1e-9:
            raise ValueError("1/output_rate must be an integer multiple of dt")
    names = list(channels) if channels is not None else m.default_channels()
    plan = m._channel_plan(names)
    groups = sorted({k for k, _ in plan})
    gpos = {k: i for i, k in enumerate(groups)}

    evs = _sorted_events(events)
    g = m.grid
    change_steps: dict[int, list] = {}
    probes = []
    pulses = []
    for ev in evs:
        k_on = int(round(ev.start / dt))
        if ev.kind in ("brake_insertion",):
            if ev.bus not in g.bus_idx:
                raise ValueError(f"brake bus {ev.bus} not in model")
            change_steps.setdefault(k_on, []).append(("on", ev))
            change_steps.setdefault(int(round(ev.end / dt)), []).append(("off", ev))
        elif ev.kind == "gen_trip":
            if ev.unit not in g.unit_index:
                raise ValueError(f"unit {ev.unit} not in model")
            change_steps.setdefault(k_on, []).append(("on", ev))
        elif ev.kind == "branch_trip":
            if ev.branch not in g.branch_index:
                raise ValueError(f"branch {ev.branch} not in model")
            change_steps.setdefault(k_on, []).append(("on", ev))
        elif ev.kind == "pulse":
            if ev.converter not in m.conv_index:
                raise ValueError(f"converter {ev.converter} not in model")
            pulses.append((k_on, int(round(ev.end / dt)), m.conv_index[ev.converter], ev.dp_mw / m.base_mva))
            change_steps.setdefault(k_on, [])
            change_steps.setdefault(int(round(ev.end / dt)), [])
        elif ev.kind == "probe":
            if ev.converter not in m.conv_index:
                raise ValueError(f"converter {ev.converter} not in model")
            probes.append((k_on, m.conv_index[ev.converter], ev.signal))
        else:
            raise ValueError(f"unknown event kind {ev.kind}")

    nc = m.dc.nc if m.dc else 0
    shunts: dict[int, tuple] = {}
    tripped_units: set = set()
    tripped_branches: set = set()
    topo = Topology()
    dp_const = np.zeros(nc)
    event_log = []

    def dp_at(t, k):
        if not probes:
            return dp_const
        out = dp_const.copy()
        for k_on, ci, sig in probes:
            if k >= k_on:
                out[ci] += sig(t - k_on * dt) / m.base_mva
        return out

    n_out = n_steps // dec
    rec = np.zeros((n_out, len(plan)))
    acc = np.zeros(len(plan))
    idx_groups = [gpos[k] for k, _ in plan]
    idx_elem = [k for _, k in plan]
    probe_starts = {k_on for k_on, _, _ in probes}

    def sample(x, topo, dp):
        dx, aux = m.rhs(x, topo, dp)
        vals = [_GROUPS[gname](m, x, aux, dp) for gname in groups]
        return dx, aux, np.array([vals[gi][ei] for gi, ei in zip(idx_groups, idx_elem)])

    x = m.x0.copy()
    last_v = g.v0
    omega_sl = np.arange(g.nm) + g.sl_omega.start
    half = 0.5 * dt
    for k in range(n_steps):
        t = k * dt
        # trapezoidal block average; at a switching instant the interval
        # ending there uses the pre-switching value
        v_minus = None
        if dec > 1 and k > 0 and (k in change_steps or k in probe_starts):
            v_minus = sample(x, topo, dp_at(t, k - 1))[2]
        if k in change_steps:
            for action, ev in change_steps[k]:
                if ev.kind == "brake_insertion":
                    b = g.bus_idx[ev.bus]
                    if action == "on":
                        y_sh = (ev.mw / m.base_mva) / abs(last_v[b]) ** 2
                        shunts[id(ev)] = (b, complex(y_sh, 0.0))
                    else:
                        shunts.pop(id(ev), None)
                elif ev.kind == "gen_trip":
                    tripped_units.add(ev.unit)
                elif ev.kind == "branch_trip":
                    tripped_branches.add(ev.branch)
                event_log.append({"t": t, "action": action, **event_to_dict(ev)})
            topo = Topology(tuple(sorted(shunts.values(), key=lambda s: (s[0], s[1].real))),
                            frozenset(tripped_units), frozenset(tripped_branches))
            dp_const = np.zeros(nc)
            for k_on, k_off, ci, val in pulses:
                if k_on <= k < k_off:
                    dp_const[ci] += val
        dp0 = dp_at(t, k)
        k1, aux, v_plus = sample(x, topo, dp0)
        last_v = aux[0]
        if dec == 1:
            rec[k] = v_plus
        else:
            if k > 0:
                acc += 0.5 * (v_plus if v_minus is None else v_minus)
                if k % dec == 0:
                    rec[k // dec - 1] = acc / dec
                    acc[:] = 0.0
            acc += 0.5 * v_plus
        dpm = dp_at(t + half, k)
        k2, _ = m.rhs(x + half * k1, topo, dpm)
        k3, _ = m.rhs(x + half * k2, topo, dpm)
        k4, _ = m.rhs(x + dt * k3, topo, dp_at(t + dt, k))
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)) or (g.nm and np.max(np.abs(x[omega_sl] - 1.0)) > 0.5) \
                or np.max(np.abs(last_v)) > 10.0:
            raise SimulationError(f"numerical divergence at t = {t + dt:.4f} s", time=t + dt)
    if dec > 1 and n_steps % dec == 0:
        acc += 0.5 * sample(x, topo, dp_at(n_steps * dt, n_steps))[2]
        rec[n_out - 1] = acc / dec

    out_dt = dt * dec
    units = {n: _UNITS.get(n.split(":")[2], "") for n in names}
    meta = {"events": event_log, "seed": seed, "integrator": "rk4", "step": dt,
            "duration": duration, "output_rate": 1.0 / out_dt}
    return TimeSeriesSet(0.0, out_dt, {n: rec[:, i] for i, n in enumerate(names)}, units, meta)


def ringdown_window(ts: TimeSeriesSet, event, length: float = 20.0) -> TimeSeriesSet:
    """Slice starting where the disturbance ends (brake removal or pulse end)
    or at the event instant (trips), ``length`` seconds long."""
    start = event.end
    if start + length > ts.t_end + 0.5 * ts.dt:
        raise ValueError(f"ringdown window [{start}, {start + length}] s extends past the data "
                         f"(ends at {ts.t_end} s)")
    return ts.slice(start, start + length)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def linearize(model: SimulationModel, topo: Topology = Topology(), x: np.ndarray | None = None,
              eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the full model at ``x`` (default the
    initial equilibrium)."""
    from .grid import numerical_jacobian
    x = model.x0 if x is None else x
    return numerical_jacobian(lambda z: model.rhs(z, topo, None)[0], x, eps)


def electromechanical_modes(jac: np.ndarray, f_band=(0.05, 3.0)) -> list:
    """Oscillatory eigenvalues of ``jac`` within ``f_band`` (Hz), as
    ``(freq_hz, damping_ratio, eigenvalue)`` sorted by damping ratio."""
    ev = np.linalg.eigvals(jac)
    out = []
    for lam in ev:
        f = lam.imag / (2 * np.pi)
        if f_band[0] <= f <= f_band[1]:
            out.append((float(f), float(-lam.real / abs(lam)), complex(lam)))
    return sorted(out, key=lambda r: r[1])
