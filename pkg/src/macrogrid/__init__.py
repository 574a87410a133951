"""Desk-scale MTDC macrogrid toolkit: AC/DC powerflow, time-domain
simulation, ringdown modal estimation, frequency-scanning identification
and supplementary damping controller design."""

__version__ = "0.1.0"
