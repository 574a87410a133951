# Time-domain simulation: a resistive brake pulse on the two-area system.

# %%
import numpy as np

from macrogrid import cases
from macrogrid.dynsim import BrakeInsertion, simulate

net = cases.two_area()
brake = BrakeInsertion("7", mw=200.0, t_on=1.0, duration=0.5)
ts = simulate(net, events=[brake], duration=20.0, dt=2e-3,
              channels=["gen:G1:speed", "gen:G3:speed", "bus:7:freq", "bus:9:freq"])
print(ts.names, ts.units)

# %%
# Area 1 and area 2 swing against each other after the brake is removed.
d = ts["gen:G1:speed"] - ts["gen:G3:speed"]
t = ts.t0 + ts.dt * np.arange(len(ts))
peaks = t[1:-1][(d[1:-1] > d[:-2]) & (d[1:-1] > d[2:])]
print("inter-area swing period ~", np.diff(peaks[peaks > 2.0])[:3].round(2), "s")

# %%
# Results carry their own metadata and round-trip through CSV.
path = ts.to_csv("/tmp/brake.csv")
print(path, ts.meta["events"])
