"""AC interconnection model: network data, Newton-Raphson powerflow and
electromechanical dynamics (classical machines and droop grid-forming units).

All quantities are per unit on the network MVA base unless a name says
otherwise. Angles are radians, time is seconds.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

BUS_KINDS = ("slack", "PV", "PQ")


class NetworkError(ValueError):
    """Invalid network description."""


class PowerflowError(RuntimeError):
    """Powerflow did not converge or the Jacobian is singular."""

    def __init__(self, message, bus=None, mismatch=None, iterations=None):
        super().__init__(message)
        self.bus = bus
        self.mismatch = mismatch
        self.iterations = iterations


class InitializationError(RuntimeError):
    """A unit cannot be placed at the powerflow operating point."""

    def __init__(self, message, unit=None):
        super().__init__(message)
        self.unit = unit


@dataclass
class Bus:
    id: str
    kind: str = "PQ"
    voltage_mag: float = 1.0
    voltage_ang: float = 0.0
    p_inj: float = 0.0
    q_inj: float = 0.0


@dataclass
class Branch:
    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    b_shunt: float = 0.0
    in_service: bool = True


@dataclass
class Governor:
    droop: float = 0.05
    time_const: float = 5.0


@dataclass
class Exciter:
    gain: float = 0.0
    time_const: float = 1.0


@dataclass
class SyncGen:
    """Classical machine (constant EMF behind transient reactance) with a
    first-order governor and a first-order EMF regulator."""

    id: str
    bus: str
    inertia_H: float
    damping_D: float
    xd_prime: float
    governor: Governor | None = field(default_factory=Governor)
    exciter: Exciter = field(default_factory=Exciter)


@dataclass
class GfmInverter:
    """P-f / Q-V droop grid-forming inverter behind a coupling reactance."""

    id: str
    bus: str
    p_droop: float
    q_droop: float
    filter_time_const: float = 0.05
    current_limit: float = 1.2
    x_coupling: float = 0.1


@dataclass
class Load:
    """Constant-impedance load; ``p`` and ``q`` are consumed at 1 pu voltage."""

    bus: str
    p: float
    q: float = 0.0


@dataclass
class PowerNetwork:
    name: str
    buses: list[Bus]
    branches: list[Branch] = field(default_factory=list)
    machines: list[SyncGen] = field(default_factory=list)
    gfm_units: list[GfmInverter] = field(default_factory=list)
    loads: list[Load] = field(default_factory=list)
    base_mva: float = 1000.0
    f_nominal: float = 60.0

    def __post_init__(self):
        self.validate()

    @property
    def bus_ids(self) -> list[str]:
        return [b.id for b in self.buses]

    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def validate(self):
        idx = self.bus_index()
        if len(idx) != len(self.buses):
            raise NetworkError(f"{self.name}: duplicate bus ids")
        for b in self.buses:
            if b.kind not in BUS_KINDS:
                raise NetworkError(f"{self.name}: bus {b.id} has unknown kind {b.kind!r}")
            if not b.voltage_mag > 0:
                raise NetworkError(f"{self.name}: bus {b.id} voltage_mag must be > 0")
        n_slack = sum(b.kind == "slack" for b in self.buses)
        if n_slack != 1:
            raise NetworkError(f"{self.name}: expected exactly one slack bus, found {n_slack}")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in idx:
                    raise NetworkError(f"{self.name}: branch {br.id} references unknown bus {end}")
            if br.x == 0:
                raise NetworkError(f"{self.name}: branch {br.id} has x == 0")
        source_bus = {}
        for unit in [*self.machines, *self.gfm_units]:
            if unit.bus not in idx:
                raise NetworkError(f"{self.name}: unit {unit.id} references unknown bus {unit.bus}")
            if unit.bus in source_bus:
                raise NetworkError(
                    f"{self.name}: units {source_bus[unit.bus]} and {unit.id} share bus {unit.bus}")
            source_bus[unit.bus] = unit.id
        for m in self.machines:
            if not m.inertia_H > 0:
                raise NetworkError(f"machine {m.id}: inertia_H must be > 0")
            if not m.xd_prime > 0:
                raise NetworkError(f"machine {m.id}: xd_prime must be > 0")
        for g in self.gfm_units:
            if not g.p_droop > 0:
                raise NetworkError(f"GFM {g.id}: p_droop must be > 0")
            if not g.x_coupling > 0 or not g.current_limit > 0:
                raise NetworkError(f"GFM {g.id}: x_coupling and current_limit must be > 0")
        for ld in self.loads:
            if ld.bus not in idx:
                raise NetworkError(f"{self.name}: load references unknown bus {ld.bus}")
        slack = next(b for b in self.buses if b.kind == "slack")
        if slack.id not in source_bus:
            raise NetworkError(f"{self.name}: slack bus {slack.id} hosts no machine or GFM")
        self._check_connected(set())

    def _check_connected(self, out_branches: set[str]):
        idx = self.bus_index()
        adj: dict[int, list[int]] = {i: [] for i in range(len(self.buses))}
        for br in self.branches:
            if br.in_service and br.id not in out_branches:
                i, j = idx[br.from_bus], idx[br.to_bus]
                adj[i].append(j)
                adj[j].append(i)
        seen = {0}
        stack = [0]
        while stack:
            for j in adj[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        if len(seen) != len(self.buses):
            lost = [self.buses[i].id for i in range(len(self.buses)) if i not in seen]
            raise NetworkError(f"{self.name}: network is not connected (islanded: {lost})")

    def unit(self, unit_id: str):
        for u in [*self.machines, *self.gfm_units]:
            if u.id == unit_id:
                return u
        raise KeyError(unit_id)

    def ybus(self, out_branches: Iterable[str] = (), include_loads: bool = True) -> np.ndarray:
        """Dense bus admittance matrix over in-service branches."""
        out = set(out_branches)
        idx = self.bus_index()
        n = len(self.buses)
        y = np.zeros((n, n), dtype=complex)
        for br in self.branches:
            if not br.in_service or br.id in out:
                continue
            i, j = idx[br.from_bus], idx[br.to_bus]
            ys = 1.0 / complex(br.r, br.x)
            ysh = 0.5j * br.b_shunt
            y[i, i] += ys + ysh
            y[j, j] += ys + ysh
            y[i, j] -= ys
            y[j, i] -= ys
        if include_loads:
            for ld in self.loads:
                y[idx[ld.bus], idx[ld.bus]] += complex(ld.p, -ld.q)
        return y


@dataclass
class PowerflowSolution:
    network: str
    bus_ids: list[str]
    vm: np.ndarray
    va: np.ndarray
    p: np.ndarray           # net device injection into the network (excludes loads)
    q: np.ndarray
    load_p: np.ndarray      # constant-impedance consumption at solved voltage
    load_q: np.ndarray
    branch_ids: list[str]
    p_from: np.ndarray
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray
    mismatch: float
    iterations: int
    extra_p: np.ndarray = None
    extra_q: np.ndarray = None

    @property
    def v(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    @property
    def branch_loss(self) -> np.ndarray:
        return self.p_from + self.p_to

    def conservation_error(self) -> float:
        return float(abs(self.p.sum() - self.branch_loss.sum() - self.load_p.sum()))

    def bus(self, bus_id: str) -> complex:
        return complex(self.v[self.bus_ids.index(bus_id)])

    def to_csv(self, prefix: str | Path) -> tuple[Path, Path]:
        """Write ``<prefix>_bus.csv`` and ``<prefix>_branch.csv``."""
        prefix = Path(prefix)
        bus_path = prefix.with_name(prefix.name + "_bus.csv")
        br_path = prefix.with_name(prefix.name + "_branch.csv")
        with open(bus_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bus", "vm_pu", "va_deg", "p_pu", "q_pu", "load_p_pu", "load_q_pu"])
            for i, b in enumerate(self.bus_ids):
                w.writerow([b, _f(self.vm[i]), _f(np.degrees(self.va[i])), _f(self.p[i]),
                            _f(self.q[i]), _f(self.load_p[i]), _f(self.load_q[i])])
        with open(br_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["branch", "p_from_pu", "q_from_pu", "p_to_pu", "q_to_pu", "loss_pu"])
            for i, b in enumerate(self.branch_ids):
                w.writerow([b, _f(self.p_from[i]), _f(self.q_from[i]), _f(self.p_to[i]),
                            _f(self.q_to[i]), _f(self.branch_loss[i])])
        return bus_path, br_path


def _f(v: float) -> str:
    return format(float(v), ".12g")


def _injection_arrays(net: PowerNetwork, injections: Mapping[str, complex | tuple] | None):
    idx = net.bus_index()
    n = len(net.buses)
    extra = np.zeros(n, dtype=complex)
    for bus_id, val in (injections or {}).items():
        if bus_id not in idx:
            raise NetworkError(f"injection at unknown bus {bus_id}")
        extra[idx[bus_id]] += complex(*val) if isinstance(val, tuple) else complex(val)
    return extra


def ac_powerflow(net: PowerNetwork, injections: Mapping[str, complex | tuple] | None = None,
                 tol: float = 1e-6, max_iter: int = 30,
                 warm_start: PowerflowSolution | None = None) -> PowerflowSolution:
    """Newton-Raphson powerflow in polar coordinates.

    Parameters
    ----------
    net : PowerNetwork
    injections : mapping of bus id -> complex (or (p, q) tuple)
        Extra injections added to the scheduled bus values, e.g. converter
        AC-side power. At PV and slack buses only the active part matters
        for the solve; reactive parts are still reported in ``extra_q``.
    tol : float
        Convergence tolerance on the largest P/Q mismatch (pu).
    warm_start : PowerflowSolution, optional
        Initial voltages; flat start otherwise.

    Returns
    -------
    PowerflowSolution
    """
    idx = net.bus_index()
    n = len(net.buses)
    y = net.ybus()
    extra = _injection_arrays(net, injections)
    kinds = np.array([b.kind for b in net.buses])
    p_spec = np.array([b.p_inj for b in net.buses]) + extra.real
    q_spec = np.array([b.q_inj for b in net.buses]) + extra.imag
    vm = np.array([b.voltage_mag if b.kind != "PQ" else 1.0 for b in net.buses])
    va = np.zeros(n)
    if warm_start is not None:
        vm = np.where(kinds == "PQ", warm_start.vm, vm)
        va = warm_start.va.copy()
    slack = int(np.flatnonzero(kinds == "slack")[0])
    va[slack] = net.buses[slack].voltage_ang
    if warm_start is None:
        va[:] = net.buses[slack].voltage_ang
    pv = np.flatnonzero(kinds == "PV")
    pq = np.flatnonzero(kinds == "PQ")
    pvpq = np.r_[pv, pq]
    it = 0
    while True:
        v = vm * np.exp(1j * va)
        s = v * np.conj(y @ v)
        dp = s.real - p_spec
        dq = s.imag - q_spec
        f = np.r_[dp[pvpq], dq[pq]]
        worst = float(np.max(np.abs(f))) if f.size else 0.0
        if worst <= tol:
            break
        if it >= max_iter:
            k = int(np.argmax(np.abs(f)))
            bus = net.buses[pvpq[k] if k < len(pvpq) else pq[k - len(pvpq)]].id
            raise PowerflowError(
                f"{net.name}: powerflow did not converge in {max_iter} iterations "
                f"(worst mismatch {worst:.3e} pu at bus {bus})",
                bus=bus, mismatch=worst, iterations=it)
        ds_dva, ds_dvm = _ds_dv(y, v)
        jac = np.block([
            [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
            [ds_dva.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise PowerflowError(f"{net.name}: singular powerflow Jacobian", iterations=it) from exc
        if not np.all(np.isfinite(dx)) or np.linalg.cond(jac) > 1e14:
            raise PowerflowError(f"{net.name}: singular powerflow Jacobian", iterations=it)
        va[pvpq] += dx[:len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        it += 1
    return _solution(net, y, vm, va, worst, it, extra)


def _ds_dv(y: np.ndarray, v: np.ndarray):
    i = y @ v
    vn = v / np.abs(v)
    ds_dvm = np.diag(v) @ np.conj(y @ np.diag(vn)) + np.diag(np.conj(i)) @ np.diag(vn)
    ds_dva = 1j * np.diag(v) @ np.conj(np.diag(i) - y @ np.diag(v))
    return ds_dva, ds_dvm


def _solution(net, y, vm, va, mismatch, it, extra) -> PowerflowSolution:
    idx = net.bus_index()
    v = vm * np.exp(1j * va)
    s = v * np.conj(y @ v)
    y_load = np.zeros(len(v), dtype=complex)
    for ld in net.loads:
        y_load[idx[ld.bus]] += complex(ld.p, -ld.q)
    s_load = v * np.conj(y_load * v)
    # s already nets out load admittance; device injection = network + load
    s_dev = s
    ids, pf, qf, pt, qt = [], [], [], [], []
    for br in net.branches:
        if not br.in_service:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        i_ij = (v[i] - v[j]) * ys + v[i] * ysh
        i_ji = (v[j] - v[i]) * ys + v[j] * ysh
        s_ij = v[i] * np.conj(i_ij)
        s_ji = v[j] * np.conj(i_ji)
        ids.append(br.id)
        pf.append(s_ij.real)
        qf.append(s_ij.imag)
        pt.append(s_ji.real)
        qt.append(s_ji.imag)
    return PowerflowSolution(
        network=net.name, bus_ids=net.bus_ids, vm=vm.copy(), va=va.copy(),
        p=s_dev.real.copy(), q=s_dev.imag.copy(), load_p=s_load.real, load_q=s_load.imag,
        branch_ids=ids, p_from=np.array(pf), q_from=np.array(qf), p_to=np.array(pt),
        q_to=np.array(qt), mismatch=mismatch, iterations=it,
        extra_p=extra.real.copy(), extra_q=extra.imag.copy())


# --------------------------------------------------------------------------
# Dynamics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Topology:
    """Event-driven modifications of the base network."""

    shunts: tuple = ()                   # ((global bus index, admittance), ...)
    tripped_units: frozenset = frozenset()
    tripped_branches: frozenset = frozenset()


def wrap_angle(a):
    return np.angle(np.exp(1j * a))


class NetworkDynamics:
    """Electromechanical model of one or more asynchronous AC networks.

    Networks are stacked block-diagonally so that several interconnections
    share one state vector. Loads (constant-impedance ones and the converted
    constant-power injections of source-less buses) are folded into the
    augmented admittance matrix; machines and grid-forming units enter as
    Norton equivalents. External current injections (HVDC converters) are
    supplied per call.

    State layout: machine angle, speed, mechanical power, internal EMF;
    GFM angle, filtered P, filtered Q; one angle-tracking filter per bus used
    to measure bus frequency.
    """

    def __init__(self, nets: Sequence[PowerNetwork], pfs: Sequence[PowerflowSolution],
                 freq_filter_time_const: float = 0.02):
        if len(nets) != len(pfs):
            raise ValueError("one powerflow solution per network required")
        self.nets = list(nets)
        f0 = {n.f_nominal for n in nets}
        base = {n.base_mva for n in nets}
        if len(f0) != 1 or len(base) != 1:
            raise NetworkError("networks must share nominal frequency and MVA base")
        self.f_nominal = f0.pop()
        self.base_mva = base.pop()
        self.omega_b = 2 * np.pi * self.f_nominal
        self.t_meas = freq_filter_time_const

        self.bus_ids: list[str] = []
        self.bus_area: list[str] = []
        offsets = []
        for net in nets:
            offsets.append(len(self.bus_ids))
            self.bus_ids += net.bus_ids
            self.bus_area += [net.name] * len(net.buses)
        if len(set(self.bus_ids)) != len(self.bus_ids):
            raise NetworkError("bus ids must be unique across networks")
        self.bus_idx = {b: i for i, b in enumerate(self.bus_ids)}
        nb = len(self.bus_ids)
        self.nb = nb

        v0 = np.concatenate([pf.v for pf in pfs])
        s_net = np.concatenate([pf.p + 1j * pf.q for pf in pfs])
        s_extra = np.concatenate([
            (pf.extra_p if pf.extra_p is not None else np.zeros(len(pf.vm)))
            + 1j * (pf.extra_q if pf.extra_q is not None else np.zeros(len(pf.vm)))
            for pf in pfs])
        s_own = s_net - s_extra
        self.v0 = v0

        # base admittance (branches + constant-impedance loads)
        y = np.zeros((nb, nb), dtype=complex)
        self.branches = []   # (id, i, j, series y, shunt y)
        source_bus = set()
        for off, net in zip(offsets, nets):
            y[off:off + len(net.buses), off:off + len(net.buses)] = net.ybus()
            idx = net.bus_index()
            for br in net.branches:
                if br.in_service:
                    self.branches.append((br.id, off + idx[br.from_bus], off + idx[br.to_bus],
                                          1.0 / complex(br.r, br.x), 0.5j * br.b_shunt))
            source_bus |= {off + idx[u.bus] for u in [*net.machines, *net.gfm_units]}
        # constant-power injections at source-less buses become impedances
        y_conv = np.zeros(nb, dtype=complex)
        for k in range(nb):
            if k not in source_bus and s_own[k] != 0:
                y_conv[k] = -np.conj(s_own[k]) / abs(v0[k]) ** 2
        self.y_net = y + np.diag(y_conv)

        machines = [(off, net, m) for off, net in zip(offsets, nets) for m in net.machines]
        gfms = [(off, net, g) for off, net in zip(offsets, nets) for g in net.gfm_units]
        self.machine_ids = [m.id for _, _, m in machines]
        self.gfm_ids = [g.id for _, _, g in gfms]
        nm, ng = len(machines), len(gfms)
        self.nm, self.ng = nm, ng
        self.m_bus = np.array([off + net.bus_index()[m.bus] for off, net, m in machines], dtype=int)
        self.m_H = np.array([m.inertia_H for *_, m in machines], dtype=float)
        self.m_D = np.array([m.damping_D for *_, m in machines], dtype=float)
        self.m_y = np.array([1.0 / (1j * m.xd_prime) for *_, m in machines], dtype=complex)
        self.m_inv_R = np.array([1.0 / m.governor.droop if m.governor and m.governor.droop > 0 else 0.0
                                 for *_, m in machines], dtype=float)
        self.m_Tg = np.array([m.governor.time_const if m.governor else 1.0 for *_, m in machines], dtype=float)
        self.m_gov = np.array([m.governor is not None for *_, m in machines], dtype=bool)
        self.m_Ka = np.array([m.exciter.gain for *_, m in machines], dtype=float)
        self.m_Te = np.array([m.exciter.time_const for *_, m in machines], dtype=float)
        self.g_bus = np.array([off + net.bus_index()[g.bus] for off, net, g in gfms], dtype=int)
        self.g_mp = np.array([g.p_droop for *_, g in gfms], dtype=float)
        self.g_mq = np.array([g.q_droop for *_, g in gfms], dtype=float)
        self.g_Tf = np.array([g.filter_time_const for *_, g in gfms], dtype=float)
        self.g_ilim = np.array([g.current_limit for *_, g in gfms], dtype=float)
        self.g_y = np.array([1.0 / (1j * g.x_coupling) for *_, g in gfms], dtype=complex)

        # layout
        self.sl_delta = slice(0, nm)
        self.sl_omega = slice(nm, 2 * nm)
        self.sl_pm = slice(2 * nm, 3 * nm)
        self.sl_e = slice(3 * nm, 4 * nm)
        o = 4 * nm
        self.sl_gth = slice(o, o + ng)
        self.sl_gp = slice(o + ng, o + 2 * ng)
        self.sl_gq = slice(o + 2 * ng, o + 3 * ng)
        o += 3 * ng
        self.sl_meas = slice(o, o + nb)
        self.n_states = o + nb

        # operating point
        x0 = np.zeros(self.n_states)
        self.m_pref = np.zeros(nm)
        self.m_vref = np.zeros(nm)
        self.m_efd0 = np.zeros(nm)
        for k, (_, _, m) in enumerate(machines):
            b = self.m_bus[k]
            i_g = np.conj(s_own[b] / v0[b])
            e = v0[b] + 1j * m.xd_prime * i_g
            if not (0.3 < abs(e) < 3.0) or not np.isfinite(e):
                raise InitializationError(
                    f"machine {m.id}: internal EMF {abs(e):.3f} pu is not physical", unit=m.id)
            x0[self.sl_delta][k] = np.angle(e)
            x0[self.sl_omega][k] = 1.0
            pm = (e * np.conj(i_g)).real
            x0[self.sl_pm][k] = pm
            x0[self.sl_e][k] = abs(e)
            self.m_pref[k] = pm
            self.m_vref[k] = abs(v0[b])
            self.m_efd0[k] = abs(e)
        self.g_pset = np.zeros(ng)
        self.g_qset = np.zeros(ng)
        self.g_eset = np.zeros(ng)
        for k, (_, _, g) in enumerate(gfms):
            b = self.g_bus[k]
            i_g = np.conj(s_own[b] / v0[b])
            if abs(i_g) > g.current_limit:
                raise InitializationError(
                    f"GFM {g.id}: dispatch needs {abs(i_g):.3f} pu current, limit {g.current_limit}",
                    unit=g.id)
            e = v0[b] + 1j * g.x_coupling * i_g
            x0[self.sl_gth][k] = np.angle(e)
            x0[self.sl_gp][k] = s_own[b].real
            x0[self.sl_gq][k] = s_own[b].imag
            self.g_pset[k] = s_own[b].real
            self.g_qset[k] = s_own[b].imag
            self.g_eset[k] = abs(e)
        x0[self.sl_meas] = np.angle(v0)
        self.x0 = x0
        self.m_map = np.zeros((nb, nm))
        self.m_map[self.m_bus, np.arange(nm)] = 1.0
        self.g_map = np.zeros((nb, ng))
        self.g_map[self.g_bus, np.arange(ng)] = 1.0
        self.m_gov_f = self.m_gov.astype(float)
        self._z_cache: dict = {}
        self._topo_cache: dict = {}
        self.unit_index = {u: ("machine", k) for k, u in enumerate(self.machine_ids)}
        self.unit_index.update({u: ("gfm", k) for k, u in enumerate(self.gfm_ids)})
        self.branch_index = {b[0]: k for k, b in enumerate(self.branches)}

    # -- algebraic network -------------------------------------------------

    def _masks(self, topo: Topology):
        m_on = np.ones(self.nm, dtype=bool)
        g_on = np.ones(self.ng, dtype=bool)
        for u in topo.tripped_units:
            kind, k = self.unit_index[u]
            (m_on if kind == "machine" else g_on)[k] = False
        return m_on, g_on

    def _y_aug(self, topo: Topology, clamped: frozenset) -> np.ndarray:
        y = self.y_net.copy()
        for bid in topo.tripped_branches:
            _, i, j, ys, ysh = self.branches[self.branch_index[bid]]
            y[i, i] -= ys + ysh
            y[j, j] -= ys + ysh
            y[i, j] += ys
            y[j, i] += ys
        for b, ysh in topo.shunts:
            y[b, b] += ysh
        m_on, g_on = self._masks(topo)
        np.add.at(y, (self.m_bus[m_on], self.m_bus[m_on]), self.m_y[m_on])
        g_v = g_on.copy()
        for k in clamped:
            g_v[k] = False
        np.add.at(y, (self.g_bus[g_v], self.g_bus[g_v]), self.g_y[g_v])
        return y

    def impedance(self, topo: Topology, clamped: frozenset = frozenset()) -> np.ndarray:
        key = (topo, clamped)
        z = self._z_cache.get(key)
        if z is None:
            y = self._y_aug(topo, clamped)
            if np.linalg.cond(y) > 1e14:
                raise NetworkError("network admittance became singular")
            z = np.linalg.inv(y)
            self._z_cache[key] = z
        return z

    def _tdata(self, topo: Topology):
        td = self._topo_cache.get(topo)
        if td is None:
            m_on, g_on = self._masks(topo)
            td = (self.impedance(topo), m_on.astype(float), g_on.astype(float), m_on, g_on)
            self._topo_cache[topo] = td
        return td

    def gfm_emf(self, x: np.ndarray) -> np.ndarray:
        mag = self.g_eset - self.g_mq * (x[self.sl_gq] - self.g_qset)
        return mag * np.exp(1j * x[self.sl_gth])

    def solve_network(self, x: np.ndarray, i_ext: np.ndarray | None = None,
                      topo: Topology = Topology()):
        """Bus voltages and GFM currents for state ``x``.

        Returns ``(v, i_gfm)``. A GFM whose current would exceed its limit is
        replaced by a current source of limit magnitude at the unclamped
        current angle.
        """
        z, m_onf, g_onf, _, g_on = self._tdata(topo)
        e_m = x[self.sl_e] * np.exp(1j * x[self.sl_delta])
        i_src = self.m_map @ (e_m * self.m_y * m_onf)
        if i_ext is not None:
            i_src = i_src + i_ext
        if not self.ng:
            return z @ i_src, np.zeros(0, dtype=complex)
        e_g = self.gfm_emf(x)
        i_g_src = e_g * self.g_y
        v = z @ (i_src + self.g_map @ (i_g_src * g_onf))
        i_gfm = (e_g - v[self.g_bus]) * self.g_y * g_onf
        over = np.abs(i_gfm) > self.g_ilim
        if over.any():
            clamped = frozenset(np.flatnonzero(over).tolist())
            i_clamp = i_gfm[over] / np.abs(i_gfm[over]) * self.g_ilim[over]
            free = g_onf * ~over
            inj = i_g_src * free
            inj[over] = i_clamp
            v = self.impedance(topo, clamped) @ (i_src + self.g_map @ inj)
            i_gfm = (e_g - v[self.g_bus]) * self.g_y * g_onf
            i_gfm[over] = i_clamp
        return v, i_gfm

    # -- differential equations -------------------------------------------

    def rhs(self, x: np.ndarray, v: np.ndarray, i_gfm: np.ndarray,
            topo: Topology = Topology()) -> np.ndarray:
        dx = np.empty_like(x)
        _, m_onf, g_onf, _, _ = self._tdata(topo)
        delta, omega = x[self.sl_delta], x[self.sl_omega]
        pm, e = x[self.sl_pm], x[self.sl_e]
        e_c = e * np.exp(1j * delta)
        vb = v[self.m_bus]
        pe = (e_c * np.conj((e_c - vb) * self.m_y)).real
        dw = omega - 1.0
        dx[self.sl_delta] = self.omega_b * dw * m_onf
        dx[self.sl_omega] = (pm - pe - self.m_D * dw) / (2.0 * self.m_H) * m_onf
        dx[self.sl_pm] = (self.m_pref - dw * self.m_inv_R - pm) / self.m_Tg * self.m_gov_f * m_onf
        dx[self.sl_e] = (self.m_efd0 + self.m_Ka * (self.m_vref - np.abs(vb)) - e) / self.m_Te * m_onf
        if self.ng:
            s_g = v[self.g_bus] * np.conj(i_gfm)
            dx[self.sl_gth] = -self.omega_b * self.g_mp * (x[self.sl_gp] - self.g_pset) * g_onf
            dx[self.sl_gp] = (s_g.real - x[self.sl_gp]) / self.g_Tf * g_onf
            dx[self.sl_gq] = (s_g.imag - x[self.sl_gq]) / self.g_Tf * g_onf
        dx[self.sl_meas] = np.angle(v * np.exp(-1j * x[self.sl_meas])) / self.t_meas
        return dx

    def bus_frequency(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Measured bus frequency in Hz."""
        slip = np.angle(v * np.exp(-1j * x[self.sl_meas])) / (self.t_meas * self.omega_b)
        return self.f_nominal * (1.0 + slip)


def init_dynamics(net: PowerNetwork | Sequence[PowerNetwork],
                  pf: PowerflowSolution | Sequence[PowerflowSolution],
                  freq_filter_time_const: float = 0.02) -> NetworkDynamics:
    """Build the dynamic model at the powerflow operating point.

    The returned model's ``x0`` is an equilibrium of :func:`dynamic_rhs`
    (with the powerflow's extra injections held as constant currents).
    """
    nets = [net] if isinstance(net, PowerNetwork) else list(net)
    pfs = [pf] if isinstance(pf, PowerflowSolution) else list(pf)
    return NetworkDynamics(nets, pfs, freq_filter_time_const)


def extra_currents(model: NetworkDynamics, pfs: Sequence[PowerflowSolution]) -> np.ndarray:
    """Constant current injections reproducing the powerflow extra injections."""
    s = np.concatenate([(pf.extra_p if pf.extra_p is not None else 0 * pf.vm)
                        + 1j * (pf.extra_q if pf.extra_q is not None else 0 * pf.vm) for pf in pfs])
    return np.conj(s / model.v0)


def dynamic_rhs(model: NetworkDynamics, x: np.ndarray, i_ext: np.ndarray | None = None,
                topo: Topology = Topology()) -> np.ndarray:
    """State derivative with the network algebraics solved internally."""
    if x.shape != (model.n_states,):
        raise ValueError(f"state has shape {x.shape}, model expects ({model.n_states},)")
    v, i_gfm = model.solve_network(x, i_ext, topo)
    if not np.all(np.isfinite(v)):
        bad = model.bus_ids[int(np.flatnonzero(~np.isfinite(v))[0])]
        raise NetworkError(f"network solve failed at bus {bad}")
    return model.rhs(x, v, i_gfm, topo)


def numerical_jacobian(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``."""
    n = x.size
    f0 = f(x)
    jac = np.empty((f0.size, n))
    for k in range(n):
        h = eps * max(1.0, abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        jac[:, k] = (f(xp) - f(xm)) / (2 * h)
    return jac
