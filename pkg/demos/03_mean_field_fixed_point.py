"""Population-limit equilibrium on the one-bus toy system.

Each day the aggregator best-responds to yesterday's prices, the
population distribution moves under that policy and the market clears.
When the combined map is a contraction the price profile settles
geometrically, from any starting guess, on a single equilibrium.
"""
import numpy as np

from mfmarket import estimate_contraction, load_scenario, run_mfe_iteration, verify_mfe
from mfmarket.analysis import geometric_fit

cfg = load_scenario("toy_1bus")
est = estimate_contraction(cfg)
print("Lipschitz pieces:", {k: round(v, 4) for k, v in est.as_dict().items() if k != "contracts"})
print("contracts:", est.contracts)

rep = run_mfe_iteration(cfg, tol=1e-10)
print("\nday-over-day change in the price profile:")
for d, n in enumerate(rep.norms):
    print(f"  day {d:2d}  {n:.3e}")
ratio, r2, npts = geometric_fit(rep.norms)
print(f"fitted decay ratio {ratio:.4f} (R^2 {r2:.4f} over {npts} days)")

rng = np.random.default_rng(0)
ends = [run_mfe_iteration(cfg, tol=1e-10, initial_beliefs_override=rng.uniform(10, 80, (1, cfg.H))).beliefs
        for _ in range(5)]
print("\nfive random starts, largest pairwise gap:", max(np.abs(a - b).sum() for a in ends for b in ends))
print("equilibrium prices:", np.round(rep.beliefs[0], 3))
ver = verify_mfe(rep, cfg)
print("verification:", "passed" if ver.passed else ver.failures())
