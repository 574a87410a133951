# Supplementary damping controller design by pole placement.

# %%
import numpy as np

from macrogrid.sdc import (DesignTarget, closed_loop_poles, design_sdc, nearest_mode,
                           placement_residual, required_sigma)
from macrogrid.sysid import TransferFunctionModel

pole = complex(-0.266, 4.69)
plant = TransferFunctionModel.from_poles([pole, pole.conjugate()], zeros=[-1.0], gain=abs(pole) ** 2)
print("open-loop zeta:", round(-pole.real / abs(pole), 4))
print("decay rate needed for 15 %:", round(required_sigma(pole.imag, 0.15), 4))

# %%
target = DesignTarget(pole, 0.15)
params, info = design_sdc(plant, target, return_info=True)
print(params)
print("lead-lag blocks:", params.m, " phase per block:", round(info.phi_deg, 2), "deg")
print("placement residual:", placement_residual(plant, params, target.lambda_cl))

# %%
m = nearest_mode(closed_loop_poles(plant, params), pole.imag / (2 * np.pi))
print(f"closed loop: {m.freq_hz:.3f} Hz  zeta {m.damping_ratio:.4f}")
params.to_json("/tmp/sdc_params.json")
