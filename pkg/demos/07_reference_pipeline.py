# End-to-end run on the shipped reference scenario through the command line:
# simulate, analyze, freqscan, design, validate. Takes a couple of minutes.

# %%
import json
from pathlib import Path

from macrogrid.cli import main

out = Path("/tmp/macrogrid_demo")
for verb in ("powerflow", "simulate", "analyze", "freqscan", "design", "validate"):
    code = main([verb, "--out-dir", str(out)])
    print(f"{verb:>10s} -> exit {code}")

# %%
lead = json.loads((out / "modes.json").read_text())["modes"][0]
print(f"flagged mode {lead['freq_hz']:.3f} Hz  zeta {lead['damping_ratio']:.4f}")
rep = json.loads((out / "validation.json").read_text())["report"]
print("zeta with SDC:", round(rep["on"]["damping_ratio"], 4))
print("zeta after contingency:", round(rep["contingency"]["damping_ratio"], 4))
for m in rep["other_modes"]:
    print(f"  other mode {m['freq_hz']:.3f} Hz  change {m['rel_change']:+.1%}")
