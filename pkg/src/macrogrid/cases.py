"""Small built-in test systems used by the tests and demos."""
from __future__ import annotations

import numpy as np

from .grid import Branch, Bus, Exciter, GfmInverter, Governor, Load, PowerNetwork, SyncGen
from .mtdc import DcLine, DcNode, MtdcSystem, VscConverter


def two_bus(load_p: float = 0.5, load_q: float = 0.0, x: float = 0.1, r: float = 0.0) -> PowerNetwork:
    """Slack machine feeding a constant-power PQ bus through one line."""
    return PowerNetwork(
        name="two_bus",
        buses=[Bus("1", "slack", 1.0), Bus("2", "PQ", p_inj=-load_p, q_inj=-load_q)],
        branches=[Branch("1-2", "1", "2", r, x)],
        machines=[SyncGen("G1", "1", inertia_H=5.0, damping_D=2.0, xd_prime=0.3)],
    )


def single_machine(load: float = 0.8, damping: float = 2.0) -> PowerNetwork:
    """One machine supplying a constant-impedance load."""
    return PowerNetwork(
        name="smib",
        buses=[Bus("1", "slack", 1.0), Bus("2", "PQ")],
        branches=[Branch("1-2", "1", "2", 0.0, 0.1)],
        machines=[SyncGen("G1", "1", inertia_H=4.0, damping_D=damping, xd_prime=0.25,
                          governor=None)],
        loads=[Load("2", load, 0.2 * load)],
    )


def two_machine(p_transfer: float = 0.5, h1: float = 4.0, h2: float = 6.0, x_line: float = 0.3,
                xd1: float = 0.2, xd2: float = 0.25) -> PowerNetwork:
    """Two classical machines joined by a lossless line, no loads, no
    governors: the textbook two-machine oscillator."""
    return PowerNetwork(
        name="two_machine",
        buses=[Bus("A", "PV", 1.0, p_inj=p_transfer), Bus("B", "slack", 1.0)],
        branches=[Branch("A-B", "A", "B", 0.0, x_line)],
        machines=[SyncGen("GA", "A", h1, 0.0, xd1, governor=None),
                  SyncGen("GB", "B", h2, 0.0, xd2, governor=None)],
    )


def two_machine_frequency(net: PowerNetwork, pf) -> float:
    """Natural frequency (Hz) of the two-machine oscillator at a powerflow
    solution, from the synchronizing coefficient across the total reactance."""
    ga, gb = net.machines
    idx = net.bus_index()
    v = pf.v
    s = pf.p + 1j * pf.q
    ea = v[idx[ga.bus]] + 1j * ga.xd_prime * np.conj(s[idx[ga.bus]] / v[idx[ga.bus]])
    eb = v[idx[gb.bus]] + 1j * gb.xd_prime * np.conj(s[idx[gb.bus]] / v[idx[gb.bus]])
    x_tot = ga.xd_prime + gb.xd_prime + net.branches[0].x
    ks = abs(ea) * abs(eb) * np.cos(np.angle(ea) - np.angle(eb)) / x_tot
    wb = 2 * np.pi * net.f_nominal
    w2 = wb * ks * (1 / (2 * ga.inertia_H) + 1 / (2 * gb.inertia_H))
    return float(np.sqrt(w2) / (2 * np.pi))


def two_area(with_gfm: bool = False, damping: float = 4.0, name: str = "two_area",
             prefix: str = "") -> PowerNetwork:
    """Four-machine, two-area system on a 1000 MVA base with 230 kV-style
    lines (r, x, b per km = 1e-3, 1e-2, 1.75e-4 pu on this base)."""
    p = prefix
    r_km, x_km, b_km = 1e-3, 1e-2, 1.75e-4

    def line(i, a, b, km):
        return Branch(f"{p}L{i}", p + a, p + b, r_km * km, x_km * km, b_km * km)

    buses = [Bus(p + "1", "PV", 1.03, p_inj=0.7), Bus(p + "2", "PV", 1.01, p_inj=0.7),
             Bus(p + "3", "slack", 1.03), Bus(p + "4", "PV", 1.01, p_inj=0.7)]
    buses += [Bus(p + str(k), "PQ") for k in range(5, 12)]
    xt = 0.15 * 1000 / 900
    branches = [Branch(f"{p}T1", p + "1", p + "5", 0, xt), Branch(f"{p}T2", p + "2", p + "6", 0, xt),
                Branch(f"{p}T3", p + "3", p + "11", 0, xt), Branch(f"{p}T4", p + "4", p + "10", 0, xt),
                line(1, "5", "6", 25), line(2, "6", "7", 10), line(3, "7", "8", 110),
                line(4, "7", "8", 110), line(5, "8", "9", 110), line(6, "8", "9", 110),
                line(7, "9", "10", 10), line(8, "10", "11", 25)]
    xd = 0.3 * 1000 / 900
    gov = Governor(droop=0.05, time_const=5.0)
    machines = [SyncGen(p + "G1", p + "1", 6.5 * 0.9, damping, xd, gov, Exciter(0.0, 1.0)),
                SyncGen(p + "G2", p + "2", 6.5 * 0.9, damping, xd, gov, Exciter(0.0, 1.0)),
                SyncGen(p + "G3", p + "3", 6.175 * 0.9, damping, xd, gov, Exciter(0.0, 1.0)),
                SyncGen(p + "G4", p + "4", 6.175 * 0.9, damping, xd, gov, Exciter(0.0, 1.0))]
    gfm = []
    if with_gfm:
        # grid-forming unit replaces G2
        machines.pop(1)
        gfm = [GfmInverter(p + "GFM2", p + "2", p_droop=0.02, q_droop=0.05, filter_time_const=0.05,
                           current_limit=1.2, x_coupling=0.15)]
    loads = [Load(p + "7", 0.967, 0.1 - 0.2), Load(p + "9", 1.767, 0.1 - 0.35)]
    return PowerNetwork(name, buses, branches, machines, gfm, loads)


def three_terminal(p_a: float = 300.0, p_b: float = -200.0, loss_r: float = 0.002,
                   base_kv: float = 500.0):
    """Two 3-bus AC networks joined by a 3-terminal MTDC ring.

    Returns ``(net_1, net_2, mtdc)``. Converter setpoints are MW into AC;
    converter C is the slack on network 2.
    """
    def area(name, p):
        return PowerNetwork(
            name=name,
            buses=[Bus(p + "1", "slack", 1.02), Bus(p + "2", "PV", 1.0, p_inj=0.4),
                   Bus(p + "3", "PQ")],
            branches=[Branch(p + "12", p + "1", p + "2", 0.01, 0.1, 0.02),
                      Branch(p + "23", p + "2", p + "3", 0.01, 0.12, 0.02),
                      Branch(p + "13", p + "1", p + "3", 0.02, 0.15, 0.02)],
            machines=[SyncGen(p + "G1", p + "1", 5.0, 2.0, 0.25),
                      SyncGen(p + "G2", p + "2", 4.0, 2.0, 0.3)],
            loads=[Load(p + "3", 1.0, 0.3)],
        )
    n1, n2 = area("area1", "a"), area("area2", "b")
    nodes = [DcNode("A", 100e-6, base_kv), DcNode("B", 100e-6, base_kv), DcNode("C", 100e-6, base_kv)]
    lines = [DcLine("AB", "A", "B", 200.0), DcLine("BC", "B", "C", 250.0), DcLine("AC", "A", "C", 300.0)]
    convs = [VscConverter("A", "A", "a3", "pq", p_ref=p_a, q_ref=20.0, loss_r=loss_r),
             VscConverter("B", "B", "b2", "pq", p_ref=p_b, loss_r=loss_r),
             VscConverter("C", "C", "b3", "slack", q_ref=0.0, loss_r=loss_r)]
    return n1, n2, MtdcSystem(nodes, lines, convs, base_mva=1000.0, base_kv=base_kv, name="mt3")
