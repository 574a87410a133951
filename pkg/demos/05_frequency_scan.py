# Plant identification: multisine probe, FRF estimate and rational fit.

# %%
import numpy as np

from macrogrid.sysid import (TransferFunctionModel, dominant_poles, estimate_frf, fit_tf,
                             gen_multisine, probe_lti)

# A lightly damped plant standing in for converter-power to bus-frequency.
true = TransferFunctionModel.from_poles([complex(-0.266, 4.69), complex(-0.266, -4.69)],
                                        zeros=[-1.0], gain=22.066)

# 296 tones from 0.05 to 3 Hz, 0.01 Hz apart, random phases.
probe = gen_multisine((0.05, 3.0), 0.01, seed=0)
print(len(probe.freqs), "tones, period", probe.period, "s, peak", round(probe.peak(), 2))

# %%
dt = 0.01
u, y = probe_lti(true, probe, dt=dt, preroll_periods=1)
frf = estimate_frf(u, y, probe.freqs, dt=dt)
print("peak response at", frf.freqs[np.argmax(np.abs(frf.values))], "Hz")

# %%
tf = fit_tf(frf, (1, 2))
print("fit quality:", tf.quality)
for m in dominant_poles(tf):
    print(f"pole {m.pole:.4f}  {m.freq_hz:.4f} Hz  zeta {m.damping_ratio:.4f}")
