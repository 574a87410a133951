# DC network powerflow and the sequential AC-DC loop on the reference macrogrid.

# %%
from macrogrid.config import REFERENCE_SCENARIO, load_config
from macrogrid.mtdc import dc_powerflow, sequential_acdc_powerflow

cfg = load_config(REFERENCE_SCENARIO)
mt = cfg.mtdc
print(len(mt.nodes), "DC nodes,", len(mt.lines), "lines, slack converter", mt.slack.id)

# %%
# DC side alone, with converter setpoints as given.
dc = dc_powerflow(mt)
for node, v in zip(dc.node_ids, dc.v):
    print(f"{node:>4s}  {v:.4f} pu")

# %%
# Alternate AC and DC solutions until the slack converter injection settles.
res = sequential_acdc_powerflow(cfg.ei, cfg.wi, mt)
print("outer iterations:", res.iterations)
for k, v in res.transfer_summary().items():
    print(f"{k:>18s}  {v:.4g}")
