# Polar Newton-Raphson powerflow on the small test networks.

# %%
import numpy as np

from macrogrid import cases
from macrogrid.grid import ac_powerflow

# Two buses joined by a lossless line: a 0.5 pu load behind x = 0.1 pu.
net = cases.two_bus()
pf = ac_powerflow(net, tol=1e-12)
print("V2 =", abs(pf.v[1]), "theta2 =", np.angle(pf.v[1]))
print("iterations:", pf.iterations, "mismatch:", pf.mismatch)

# %%
# Kundur-style two-area system. Generation equals load plus branch losses.
net = cases.two_area()
pf = ac_powerflow(net)
print("buses:", len(pf.v), "|V| range:", np.abs(pf.v).min().round(4), np.abs(pf.v).max().round(4))
print("generation - load - losses =", pf.conservation_error())

# %%
# Voltages and flows can be written out for inspection.
paths = pf.to_csv("/tmp/two_area")
print([str(p) for p in paths])
