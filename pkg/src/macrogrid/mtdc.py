"""Multiterminal VSC-HVDC network.

DC quantities are per unit on the system MVA base and the DC voltage base
``MtdcSystem.base_kv``. Converter powers in the data model are MW/Mvar
injected into the AC grid (negative = rectifier drawing from AC).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .grid import PowerNetwork, PowerflowSolution, ac_powerflow

if TYPE_CHECKING:
    from .sdc import SdcParams

log = logging.getLogger(__name__)

OHM_PER_MILE_TO_KM = 1.0 / 1.609344


class DcNetworkError(ValueError):
    pass


class DcPowerflowError(RuntimeError):
    def __init__(self, message, node=None, trace=None):
        super().__init__(message)
        self.node = node
        self.trace = trace


@dataclass
class DcNode:
    id: str
    capacitance: float          # F, lumped terminal capacitance
    v_nominal_kv: float = 640.0
    lat: float | None = None    # degrees, documents the line-length table
    lon: float | None = None


def great_circle_km(lat1, lon1, lat2, lon2, radius_km: float = 6371.0) -> float:
    """Haversine distance between two points given in degrees."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2 - lon1)
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return float(2 * radius_km * np.arcsin(np.sqrt(a)))


@dataclass
class DcLine:
    id: str
    from_node: str
    to_node: str
    length_km: float
    r_per_km: float = 0.0575 * OHM_PER_MILE_TO_KM
    l_per_km: float = 2.9e-3
    c_per_km: float = 7.67e-9
    in_service: bool = True

    @property
    def resistance(self) -> float:
        return self.r_per_km * self.length_km

    @property
    def inductance(self) -> float:
        return self.l_per_km * self.length_km

    @property
    def capacitance(self) -> float:
        return self.c_per_km * self.length_km


@dataclass
class SdcAttachment:
    """Supplementary damping controller bound to a converter.

    ``feedback`` names the measured channel, ``bus:<id>:freq`` or
    ``gen:<id>:speed``; the controller acts on its deviation from nominal
    frequency in Hz.
    """

    params: "SdcParams"
    feedback: str


@dataclass
class VscConverter:
    id: str
    dc_node: str
    ac_bus: str
    mode: str = "pq"                 # "slack" or "pq"
    p_ref: float = 0.0               # MW into AC
    q_ref: float = 0.0               # Mvar into AC
    tau: float = 0.05                # inner current loop, s
    kp_p: float = 0.0
    ki_p: float = 0.5
    kp_vdc: float = 4.0
    ki_vdc: float = 10.0
    k_vac: float = 5.0
    v_dc_ref: float = 1.0
    rating_mva: float = 3000.0
    loss_r: float = 0.0              # pu (system base) equivalent series loss resistance
    pll_kp: float = 0.12
    pll_ki: float = 2.6
    sdc: SdcAttachment | None = None


@dataclass
class MtdcSystem:
    nodes: list[DcNode]
    lines: list[DcLine]
    converters: list[VscConverter]
    base_mva: float = 1000.0
    base_kv: float = 1280.0
    name: str = "mtdc"

    def __post_init__(self):
        self.validate()

    @property
    def z_base(self) -> float:
        return self.base_kv ** 2 / self.base_mva

    def node_index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @property
    def slack(self) -> VscConverter:
        return next(c for c in self.converters if c.mode == "slack")

    def converter(self, conv_id: str) -> VscConverter:
        for c in self.converters:
            if c.id == conv_id:
                return c
        raise KeyError(conv_id)

    def validate(self):
        idx = self.node_index()
        if len(idx) != len(self.nodes):
            raise DcNetworkError("duplicate DC node ids")
        for n in self.nodes:
            if not n.capacitance > 0:
                raise DcNetworkError(f"DC node {n.id}: capacitance must be > 0")
        for ln in self.lines:
            if ln.from_node not in idx or ln.to_node not in idx:
                raise DcNetworkError(f"DC line {ln.id} references an unknown node")
            if not (ln.r_per_km > 0 and ln.l_per_km > 0 and ln.length_km > 0):
                raise DcNetworkError(f"DC line {ln.id}: r, l and length must be > 0")
        modes = [c.mode for c in self.converters]
        if any(m not in ("slack", "pq") for m in modes):
            raise DcNetworkError(f"unknown converter mode in {modes}")
        if modes.count("slack") != 1:
            raise DcNetworkError(f"exactly one slack converter required, found {modes.count('slack')}")
        seen = set()
        for c in self.converters:
            if c.dc_node not in idx:
                raise DcNetworkError(f"converter {c.id} references unknown DC node {c.dc_node}")
            if c.dc_node in seen:
                raise DcNetworkError(f"DC node {c.dc_node} hosts more than one converter")
            seen.add(c.dc_node)
            if not c.tau > 0:
                raise DcNetworkError(f"converter {c.id}: tau must be > 0")
            if c.sdc is not None and c.mode == "slack":
                raise DcNetworkError(f"converter {c.id}: SDC cannot be attached to the slack")
        # connectivity
        adj = {i: set() for i in range(len(self.nodes))}
        for ln in self.lines:
            if ln.in_service:
                a, b = idx[ln.from_node], idx[ln.to_node]
                adj[a].add(b)
                adj[b].add(a)
        seen_n, stack = {0}, [0]
        while stack:
            for j in adj[stack.pop()] - seen_n:
                seen_n.add(j)
                stack.append(j)
        if len(seen_n) != len(self.nodes):
            raise DcNetworkError("DC network is not connected")

    def conductance(self) -> np.ndarray:
        idx = self.node_index()
        g = np.zeros((len(self.nodes), len(self.nodes)))
        for ln in self.lines:
            if not ln.in_service:
                continue
            a, b = idx[ln.from_node], idx[ln.to_node]
            gl = self.z_base / ln.resistance
            g[a, a] += gl
            g[b, b] += gl
            g[a, b] -= gl
            g[b, a] -= gl
        return g

    def with_setpoints(self, p_mw: Mapping[str, float]) -> "MtdcSystem":
        convs = [replace(c, p_ref=p_mw.get(c.id, c.p_ref)) for c in self.converters]
        return replace(self, converters=convs)


def aggregate_capacitance(node_ids: Sequence[str], lines: Sequence[DcLine],
                          converter_capacitance: Mapping[str, float] | None = None) -> dict[str, float]:
    """Terminal capacitance per node: half of every incident line (pi model)
    plus an optional converter DC capacitor (F)."""
    cap = {n: 0.0 for n in node_ids}
    for ln in lines:
        cap[ln.from_node] += 0.5 * ln.capacitance
        cap[ln.to_node] += 0.5 * ln.capacitance
    for n, c in (converter_capacitance or {}).items():
        cap[n] += c
    return cap


def converter_loss(r: float, p: float, q: float, vm: float) -> float:
    return r * (p * p + q * q) / (vm * vm)


@dataclass
class DcSolution:
    node_ids: list[str]
    v: np.ndarray
    line_ids: list[str]
    line_current: np.ndarray        # from -> to, pu
    p_from: np.ndarray              # pu leaving the from-node
    p_to: np.ndarray
    node_injection: np.ndarray      # pu injected into the DC network at each node
    p_ac: dict[str, float]          # pu injected into AC by each converter
    q_ac: dict[str, float]
    converter_losses: dict[str, float]
    iterations: int
    base_mva: float
    slack_p_dc: float = 0.0         # pu the slack converter injects into the DC network

    @property
    def line_loss(self) -> np.ndarray:
        return self.p_from + self.p_to

    @property
    def total_loss(self) -> float:
        return float(self.line_loss.sum())

    def current_balance(self, sys: MtdcSystem) -> float:
        g = sys.conductance()
        i_calc = g @ self.v
        return float(np.max(np.abs(i_calc - self.node_injection / self.v)))

    def to_csv(self, prefix: str | Path) -> tuple[Path, Path]:
        prefix = Path(prefix)
        node_path = prefix.with_name(prefix.name + "_dc_node.csv")
        line_path = prefix.with_name(prefix.name + "_dc_line.csv")
        with open(node_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "v_pu", "p_inj_mw"])
            for k, n in enumerate(self.node_ids):
                w.writerow([n, format(self.v[k], ".12g"),
                            format(self.node_injection[k] * self.base_mva, ".12g")])
        with open(line_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["line", "i_pu", "p_from_mw", "p_to_mw", "loss_mw"])
            for k, ln in enumerate(self.line_ids):
                w.writerow([ln, format(self.line_current[k], ".12g"),
                            format(self.p_from[k] * self.base_mva, ".12g"),
                            format(self.p_to[k] * self.base_mva, ".12g"),
                            format(self.line_loss[k] * self.base_mva, ".12g")])
        return node_path, line_path


def _slack_ac_power(p_into_dc: float, q: float, r: float, vm: float) -> float:
    # solve p_ac + r (p_ac^2 + q^2)/vm^2 = -p_into_dc for p_ac
    c = -p_into_dc
    if r == 0:
        return c
    a = r / vm ** 2
    disc = 1.0 - 4.0 * a * (a * q * q - c)
    if disc < 0:
        raise DcPowerflowError("slack converter loss model has no real solution")
    return (-1.0 + np.sqrt(disc)) / (2.0 * a)


def dc_powerflow(sys: MtdcSystem, p_setpoints: Mapping[str, float] | None = None,
                 vm_ac: Mapping[str, float] | None = None, tol: float = 1e-12,
                 max_iter: int = 50) -> DcSolution:
    """Solve the DC network with the slack converter holding its node voltage.

    Parameters
    ----------
    p_setpoints : mapping converter id -> MW into AC, optional
        Overrides ``VscConverter.p_ref`` of non-slack converters.
    vm_ac : mapping converter id -> AC voltage magnitude (pu), optional
        Used only by the converter loss model; 1.0 when absent.
    """
    p_setpoints = dict(p_setpoints or {})
    vm_ac = dict(vm_ac or {})
    idx = sys.node_index()
    n = len(sys.nodes)
    g = sys.conductance()
    slack = sys.slack
    ks = idx[slack.dc_node]
    p_inj = np.zeros(n)
    p_ac, q_ac, closs = {}, {}, {}
    for c in sys.converters:
        q = c.q_ref / sys.base_mva
        q_ac[c.id] = q
        if c.mode == "slack":
            continue
        p = p_setpoints.get(c.id, c.p_ref) / sys.base_mva
        loss = converter_loss(c.loss_r, p, q, vm_ac.get(c.id, 1.0))
        p_ac[c.id] = p
        closs[c.id] = loss
        p_inj[idx[c.dc_node]] = -(p + loss)
    free = np.array([k for k in range(n) if k != ks], dtype=int)
    v = np.ones(n)
    v[ks] = slack.v_dc_ref
    it = 0
    while True:
        i_calc = g @ v
        mis = v * i_calc - p_inj
        worst = float(np.max(np.abs(mis[free]))) if free.size else 0.0
        if worst <= tol:
            break
        if it >= max_iter or not np.all(np.isfinite(v)):
            k = int(free[np.argmax(np.abs(mis[free]))])
            raise DcPowerflowError(
                f"DC powerflow did not converge (worst mismatch {worst:.3e} at node {sys.nodes[k].id})",
                node=sys.nodes[k].id)
        jac = np.diag(i_calc) + v[:, None] * g
        dv = np.linalg.solve(jac[np.ix_(free, free)], -mis[free])
        v[free] += dv
        it += 1
        if np.any(v <= 0.05):
            k = int(np.argmin(v))
            raise DcPowerflowError(f"DC voltage collapse at node {sys.nodes[k].id}",
                                   node=sys.nodes[k].id)
    inj = v * (g @ v)
    p_sl = float(inj[ks])
    vm_sl = vm_ac.get(slack.id, 1.0)
    p_slack_ac = _slack_ac_power(p_sl, q_ac[slack.id], slack.loss_r, vm_sl)
    p_ac[slack.id] = p_slack_ac
    closs[slack.id] = converter_loss(slack.loss_r, p_slack_ac, q_ac[slack.id], vm_sl)
    inj[ks] = p_sl
    ids, cur, pf_, pt_ = [], [], [], []
    for ln in sys.lines:
        if not ln.in_service:
            continue
        a, b = idx[ln.from_node], idx[ln.to_node]
        i_l = (v[a] - v[b]) * sys.z_base / ln.resistance
        ids.append(ln.id)
        cur.append(i_l)
        pf_.append(v[a] * i_l)
        pt_.append(-v[b] * i_l)
    sol = DcSolution(node_ids=[nd.id for nd in sys.nodes], v=v, line_ids=ids,
                     line_current=np.array(cur), p_from=np.array(pf_), p_to=np.array(pt_),
                     node_injection=inj, p_ac=p_ac, q_ac=q_ac, converter_losses=closs,
                     iterations=it, base_mva=sys.base_mva, slack_p_dc=p_sl)
    return sol


@dataclass
class AcDcSolution:
    ac: dict[str, PowerflowSolution]
    dc: DcSolution
    injections: dict[str, complex]      # converter id -> pu S into AC
    iterations: int
    trace: list[float] = field(default_factory=list)

    def converter_bus_voltage(self, sys: MtdcSystem) -> dict[str, float]:
        out = {}
        for c in sys.converters:
            for pf in self.ac.values():
                if c.ac_bus in pf.bus_ids:
                    out[c.id] = float(abs(pf.bus(c.ac_bus)))
        return out

    def transfer_summary(self) -> dict:
        """Delivered and drawn AC power (MW), total DC-side loss including
        converters, and loss as a fraction of the delivered transfer."""
        base = self.dc.base_mva
        p = np.array([s.real for s in self.injections.values()]) * base
        delivered = float(p[p > 0].sum())
        drawn = float(-p[p < 0].sum())
        loss = drawn - delivered
        return {"delivered_mw": delivered, "drawn_mw": drawn, "loss_mw": loss,
                "line_loss_mw": self.dc.total_loss * base,
                "converter_loss_mw": float(sum(self.dc.converter_losses.values())) * base,
                "loss_fraction": loss / delivered if delivered > 0 else 0.0}


def _net_of_bus(nets: Sequence[PowerNetwork], bus: str) -> PowerNetwork:
    for net in nets:
        if bus in net.bus_index():
            return net
    raise DcNetworkError(f"converter AC bus {bus} not found in any AC network")


def sequential_acdc_powerflow(ei: PowerNetwork | None, wi: PowerNetwork | None, sys: MtdcSystem,
                              tol: float = 1e-6, max_outer: int = 30,
                              ac_tol: float = 1e-10) -> AcDcSolution:
    """Alternate DC and AC powerflows until converter AC injections settle.

    Each outer iteration solves the DC network with converter losses
    evaluated at the latest AC voltages, applies every converter's AC-side
    injection at its bus and re-solves the AC networks.
    """
    nets = [n for n in (ei, wi) if n is not None]
    owner = {c.id: _net_of_bus(nets, c.ac_bus) for c in sys.converters}
    vm = {c.id: 1.0 for c in sys.converters}
    prev_inj = None
    pfs: dict[str, PowerflowSolution] = {}
    trace = []
    for it in range(1, max_outer + 1):
        dc = dc_powerflow(sys, vm_ac=vm)
        inj = {c.id: complex(dc.p_ac[c.id], dc.q_ac[c.id]) for c in sys.converters}
        for net in nets:
            extra = {}
            for c in sys.converters:
                if owner[c.id] is net:
                    extra[c.ac_bus] = extra.get(c.ac_bus, 0) + inj[c.id]
            pfs[net.name] = ac_powerflow(net, extra, tol=ac_tol, warm_start=pfs.get(net.name))
        for c in sys.converters:
            vm[c.id] = float(abs(pfs[owner[c.id].name].bus(c.ac_bus)))
        if prev_inj is not None:
            change = max(abs(inj[k] - prev_inj[k]) for k in inj)
            trace.append(change)
            if change <= tol:
                # final DC solve at the converged AC voltages
                dc = dc_powerflow(sys, vm_ac=vm)
                inj = {c.id: complex(dc.p_ac[c.id], dc.q_ac[c.id]) for c in sys.converters}
                return AcDcSolution(ac=pfs, dc=dc, injections=inj, iterations=it, trace=trace)
        prev_inj = inj
    raise DcPowerflowError(
        f"sequential AC-DC powerflow did not converge in {max_outer} outer iterations", trace=trace)


# --------------------------------------------------------------------------
# Dynamics
# --------------------------------------------------------------------------

N_CONV_STATES = 5   # pll angle, pll integrator, i_d, i_q, outer-loop integrator


@dataclass
class _ConverterArrays:
    slack: np.ndarray
    p0: np.ndarray
    q0: np.ndarray
    tau: np.ndarray
    kp_p: np.ndarray
    ki_p: np.ndarray
    kp_v: np.ndarray
    ki_v: np.ndarray
    k_vac: np.ndarray
    vdc_ref: np.ndarray
    vac_ref: np.ndarray
    imax: np.ndarray
    loss_r: np.ndarray
    pll_kp: np.ndarray
    pll_ki: np.ndarray

    @classmethod
    def build(cls, convs: Sequence[VscConverter], base_mva: float, p0, q0, vac_ref):
        a = lambda f: np.array([f(c) for c in convs], dtype=float)
        return cls(slack=np.array([c.mode == "slack" for c in convs], dtype=bool),
                   p0=np.asarray(p0, float), q0=np.asarray(q0, float), tau=a(lambda c: c.tau),
                   kp_p=a(lambda c: c.kp_p), ki_p=a(lambda c: c.ki_p),
                   kp_v=a(lambda c: c.kp_vdc), ki_v=a(lambda c: c.ki_vdc),
                   k_vac=a(lambda c: c.k_vac), vdc_ref=a(lambda c: c.v_dc_ref),
                   vac_ref=np.asarray(vac_ref, float),
                   imax=a(lambda c: 1.1 * c.rating_mva / base_mva),
                   loss_r=a(lambda c: c.loss_r), pll_kp=a(lambda c: c.pll_kp),
                   pll_ki=a(lambda c: c.pll_ki))


def _converter_derivatives(c: _ConverterArrays, st: np.ndarray, v: np.ndarray, vdc: np.ndarray,
                           dp: np.ndarray, omega_b: float):
    """Vectorized converter equations; ``st`` has shape (5, n)."""
    th, xpll, i_d, i_q, xi = st
    rot = np.exp(1j * th)
    vm = np.abs(v)
    vloc = v * np.conj(rot)
    vq = vloc.imag
    i_ac = (i_d - 1j * i_q) * rot
    s = v * np.conj(i_ac)
    p_meas = s.real
    pstar = np.where(c.slack, c.p0 + c.kp_v * (vdc - c.vdc_ref) + xi, c.p0 + dp)
    err = pstar - p_meas
    id_ref = np.where(c.slack, pstar / vm, pstar / vm + xi + c.kp_p * err)
    dxi = np.where(c.slack, c.ki_v * (vdc - c.vdc_ref), c.ki_p * err)
    qstar = np.where(c.slack, c.q0 + c.k_vac * (c.vac_ref - vm), c.q0)
    iq_ref = qstar / vm
    mag = np.hypot(id_ref, iq_ref)
    scale = np.where(mag > c.imax, c.imax / np.maximum(mag, 1e-12), 1.0)
    clamped = mag > c.imax
    id_ref = id_ref * scale
    iq_ref = iq_ref * scale
    d = np.empty_like(st)
    d[0] = omega_b * (c.pll_kp * vq + xpll)
    d[1] = c.pll_ki * vq
    d[2] = (id_ref - i_d) / c.tau
    d[3] = (iq_ref - i_q) / c.tau
    d[4] = dxi
    p_dc = p_meas + c.loss_r * (i_d * i_d + i_q * i_q)
    return d, i_ac, s, p_dc, clamped


def converter_rhs(conv: VscConverter, state: np.ndarray, v_ac: complex, v_dc: float,
                  sdc_output: float = 0.0, base_mva: float = 1000.0, f_nominal: float = 60.0,
                  v_ac_ref: float = 1.0):
    """Derivatives of one converter's local states.

    ``state`` is (pll angle, pll integrator, i_d, i_q, outer integrator);
    ``sdc_output`` is the power-reference modulation in MW. Returns
    ``(dstate, s_ac_pu, p_dc_pu)``; ``p_dc_pu`` is the power drawn from the
    DC node.
    """
    if conv.mode == "slack" and sdc_output != 0.0:
        raise ValueError("the slack converter has no power reference to modulate")
    c = _ConverterArrays.build([conv], base_mva, [conv.p_ref / base_mva],
                               [conv.q_ref / base_mva], [v_ac_ref])
    d, _, s, p_dc, clamped = _converter_derivatives(
        c, np.asarray(state, float).reshape(N_CONV_STATES, 1), np.array([v_ac], complex),
        np.array([v_dc], float), np.array([sdc_output / base_mva]), 2 * np.pi * f_nominal)
    if clamped[0]:
        log.info("converter %s current reference clamped", conv.id)
    return d[:, 0], complex(s[0]), float(p_dc[0])


def sdc_block(params: "SdcParams", z: np.ndarray, y: float):
    """Washout + m lead-lag blocks + gain, realized as ``m + 1`` first-order
    states. Returns ``(dz, output_mw)``; output is ``-H(s) y`` clipped to the
    params' limit so that the loop closes as G/(1 + G H)."""
    dz = np.empty_like(z)
    dz[0] = (y - z[0]) / params.Tw
    u = y - z[0]
    ratio = params.T1 / params.T2
    for k in range(1, params.m + 1):
        dz[k] = (u - z[k]) / params.T2
        u = z[k] + ratio * (u - z[k])
    out = -params.K * u
    if params.limit is not None:
        out = min(max(out, -params.limit), params.limit)
    return dz, out


class MtdcDynamics:
    """Converter, DC network and SDC states of an MTDC system.

    State layout: converter states grouped by kind (5 x n_conv), DC node
    voltages, DC line currents, then each attached SDC's ``m + 1`` states.
    """

    def __init__(self, sys: MtdcSystem, bus_index: Mapping[str, int], v_bus0: np.ndarray,
                 acdc: AcDcSolution, f_nominal: float = 60.0):
        self.sys = sys
        self.omega_b = 2 * np.pi * f_nominal
        self.f_nominal = f_nominal
        convs = sys.converters
        self.conv_ids = [c.id for c in convs]
        nc = len(convs)
        self.nc = nc
        nidx = sys.node_index()
        self.conv_bus = np.array([bus_index[c.ac_bus] for c in convs], dtype=int)
        self.conv_node = np.array([nidx[c.dc_node] for c in convs], dtype=int)
        lines = [ln for ln in sys.lines if ln.in_service]
        self.line_ids = [ln.id for ln in lines]
        nn, nl = len(sys.nodes), len(lines)
        self.nn, self.nl = nn, nl
        self.inc = np.zeros((nl, nn))
        for k, ln in enumerate(lines):
            self.inc[k, nidx[ln.from_node]] = 1.0
            self.inc[k, nidx[ln.to_node]] = -1.0
        zb = sys.z_base
        self.c_pu = np.array([nd.capacitance * zb for nd in sys.nodes])
        self.l_pu = np.array([ln.inductance / zb for ln in lines])
        self.r_pu = np.array([ln.resistance / zb for ln in lines])
        self.conv_to_node = np.zeros((nn, nc))
        self.conv_to_node[self.conv_node, np.arange(nc)] = 1.0

        v0 = v_bus0[self.conv_bus]
        vm0 = np.abs(v0)
        s0 = np.array([acdc.injections[c.id] for c in convs])
        self.arr = _ConverterArrays.build(convs, sys.base_mva, s0.real, s0.imag, vm0)

        self.sl_conv = slice(0, N_CONV_STATES * nc)
        self.sl_vdc = slice(N_CONV_STATES * nc, N_CONV_STATES * nc + nn)
        self.sl_il = slice(self.sl_vdc.stop, self.sl_vdc.stop + nl)
        o = self.sl_il.stop
        self.sdcs = []   # (conv index, attachment, slice)
        for k, c in enumerate(convs):
            if c.sdc is not None:
                sl = slice(o, o + c.sdc.params.m + 1)
                self.sdcs.append((k, c.sdc, sl))
                o = sl.stop
        self.n_states = o

        x0 = np.zeros(self.n_states)
        st = np.zeros((N_CONV_STATES, nc))
        st[0] = np.angle(v0)
        st[2] = s0.real / vm0
        st[3] = s0.imag / vm0
        x0[self.sl_conv] = st.ravel()
        x0[self.sl_vdc] = acdc.dc.v
        x0[self.sl_il] = acdc.dc.line_current[[acdc.dc.line_ids.index(i) for i in self.line_ids]]
        self.x0 = x0
        self._clamp_logged: set[int] = set()

    def injections(self, x: np.ndarray) -> np.ndarray:
        """Converter AC current injections (pu) from the state."""
        st = x[self.sl_conv].reshape(N_CONV_STATES, self.nc)
        return (st[2] - 1j * st[3]) * np.exp(1j * st[0])

    def rhs(self, x: np.ndarray, v_conv: np.ndarray, dp: np.ndarray, sdc_inputs: Sequence[float]):
        """Derivatives given converter-bus voltages ``v_conv``, external
        power-reference modulation ``dp`` (pu) and SDC feedback deviations
        (Hz). Returns ``(dx, s_ac, p_dc, sdc_out_mw)``."""
        dx = np.empty_like(x)
        dp = dp.copy()
        sdc_out = np.zeros(len(self.sdcs))
        for j, ((k, att, sl), y) in enumerate(zip(self.sdcs, sdc_inputs)):
            dz, out = sdc_block(att.params, x[sl], y)
            dx[sl] = dz
            sdc_out[j] = out
            dp[k] += out / self.sys.base_mva
        st = x[self.sl_conv].reshape(N_CONV_STATES, self.nc)
        vdc = x[self.sl_vdc]
        il = x[self.sl_il]
        d, _, s, p_dc, clamped = _converter_derivatives(
            self.arr, st, v_conv, vdc[self.conv_node], dp, self.omega_b)
        if clamped.any():
            for k in np.flatnonzero(clamped):
                if k not in self._clamp_logged:
                    self._clamp_logged.add(k)
                    log.warning("converter %s current reference clamped", self.conv_ids[k])
        dx[self.sl_conv] = d.ravel()
        i_node = self.conv_to_node @ (p_dc / vdc[self.conv_node])
        dx[self.sl_vdc] = (-i_node - self.inc.T @ il) / self.c_pu
        dx[self.sl_il] = (self.inc @ vdc - self.r_pu * il) / self.l_pu
        return dx, s, p_dc, sdc_out

    def stored_energy(self, x: np.ndarray) -> float:
        vdc = x[self.sl_vdc]
        il = x[self.sl_il]
        return float(0.5 * np.sum(self.c_pu * vdc ** 2) + 0.5 * np.sum(self.l_pu * il ** 2))

    def resistive_loss(self, x: np.ndarray) -> float:
        il = x[self.sl_il]
        return float(np.sum(self.r_pu * il ** 2))
