"""Five-bus desk system: learning storage against idle storage.

Runs one seed of each variant (about half a minute) and compares price
volatility, what each class pays, how storage cycles against the price
belief, and how much of the evening ramp is left.
"""
import numpy as np

from mfmarket import compare_with_baseline, load_scenario, run_simulation
from mfmarket.analysis import demand_shape_report

seed = 0
full = run_simulation(load_scenario("oahu_desk"), seed=seed)
base = run_simulation(load_scenario("oahu_desk_baseline"), seed=seed)
res = compare_with_baseline([full], [base])

print(f"price volatility, last 3 days: {res['imv']['full'][0]:.2f} with storage, "
      f"{res['imv']['baseline'][0]:.2f} without")
for c in ("prosumer", "consumer"):
    print(f"{c} daily cost, last 5 days: {res['cost'][c]['full']:.0f} vs {res['cost'][c]['baseline']:.0f} $")
cyc = res["cycle"]["per_seed"][0]
print("\nhour  belief  storage flow  level")
for h in range(len(cyc["mean_flow"])):
    print(f"{h:4d}  {cyc['mean_belief'][h]:6.1f}  {cyc['mean_flow'][h]:12.3f}  {cyc['mean_level'][h]:5.2f}")
print("cheapest hours", cyc["cheap_hours"], "dearest hours", cyc["dear_hours"])

fs, bs = demand_shape_report(full), demand_shape_report(base)
print("\nprosumer net demand / capacity by hour")
print("  with storage", np.round(fs["prosumer"]["mean"], 3))
print("  idle        ", np.round(bs["prosumer"]["mean"], 3))
print(f"evening peak {res['evening']['full']:.3f} vs {res['evening']['baseline']:.3f}")
