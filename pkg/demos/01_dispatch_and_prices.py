"""Dispatch a three-bus network and read prices off the duals.

A cheap unit sits at bus 0 and a dear unit at bus 1, with all load at
bus 2. With generous line ratings every bus pays the same price. Tighten
the 0-2 line and the prices separate: bus 2 now pays more than the
marginal cost of the cheap unit, and the gap is the value of the
congested line.
"""
import numpy as np

from mfmarket import GeneratorSpec, LineSpec, Network, solve_ed
from mfmarket.network import lmp_sensitivity_oracle, ptdf_from_branches


def triangle(f_max_02):
    P = ptdf_from_branches(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)])
    lines = [LineSpec(0, tuple(P[0]), 200.0), LineSpec(1, tuple(P[1]), 200.0), LineSpec(2, tuple(P[2]), f_max_02)]
    gens = [GeneratorSpec(0, 0, 0.05, 10.0, 200.0), GeneratorSpec(1, 1, 0.1, 20.0, 200.0)]
    return Network(3, lines, gens)


demand = np.array([10.0, 20.0, 60.0])
np.set_printoptions(precision=3, suppress=True)

for f_max in (200.0, 30.0):
    net = triangle(f_max)
    sol = solve_ed(net, demand)
    print(f"line 0-2 rated {f_max:.0f} MW")
    print("  dispatch  ", sol.dispatch)
    print("  flows     ", sol.flows)
    print("  hub price ", round(sol.hub_price, 3))
    print("  LMPs      ", sol.lmps)
    # the dual prices should match re-solving with one more MWh at each bus
    fd = np.array([lmp_sensitivity_oracle(net, demand, n) for n in range(3)])
    print("  finite-difference check, max gap", float(np.abs(fd - sol.lmps).max()))
    print()
