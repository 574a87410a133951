# Ringdown modal analysis with Prony and the Matrix Pencil method.

# %%
import numpy as np

from macrogrid import cases
from macrogrid.dynsim import BrakeInsertion, ringdown_window, simulate
from macrogrid.modal import analyze_ringdown, damping_report, matrix_pencil, mode_shapes, preprocess, prony

# A synthetic signal with two planted modes: 0.84 Hz at 3.4 % and 0.3 Hz.
dt = 0.1
t = np.arange(300) * dt
sigma = 0.034 * 2 * np.pi * 0.84 / np.sqrt(1 - 0.034 ** 2)
y = np.exp(-sigma * t) * np.cos(2 * np.pi * 0.84 * t) + 0.5 * np.exp(-0.3 * t) * np.cos(2 * np.pi * 0.3 * t)
for est in (prony, matrix_pencil):
    for m in est(y, dt=dt):
        print(f"{est.__name__:>13s}  {m.freq_hz:.4f} Hz  zeta {m.damping_ratio:.4f}")

# %%
# The same analysis on a simulated brake ringdown.
brake = BrakeInsertion("7", 200.0, 1.0, 0.5)
ts = simulate(cases.two_area(), events=[brake], duration=25.0, dt=2e-3,
              channels=["gen:G1:speed", "gen:G2:speed", "gen:G3:speed", "gen:G4:speed"])
win = ringdown_window(ts, brake, 20.0)
modes = analyze_ringdown(win, "gen:G1:speed")
for m, flag in zip(modes, damping_report(modes)):
    print(f"{m.freq_hz:.3f} Hz  zeta {m.damping_ratio:.3f}  critical={flag.critical}")

# %%
# Mode shape of the inter-area mode near 0.53 Hz: area 1 machines swing
# against area 2. The 1.15 Hz mode is local to one area.
# All modes enter the fit so the others do not leak into the residual.
inter = modes.nearest(0.53)
shapes = mode_shapes(preprocess(win, (0.1, 2.0)), list(modes))
shape = shapes[list(modes).index(inter)]
for ch, a, ph in zip(shape.channels, shape.amplitude, shape.phase_deg):
    print(f"{ch:>14s}  amp {a:.2f}  phase {ph:+7.1f} deg")
