"""Entropy-regularized control of a single storage aggregator.

The aggregator believes prices dip at midday and peak in the evening.
Soft value iteration gives a stochastic policy. Starting half full, we
push the storage distribution through one day under that policy: it
sells down in the morning, refills in the cheap hours and empties again
into the evening peak. A larger temperature alpha blurs the schedule.
"""
import numpy as np

from mfmarket.env import reward_table
from mfmarket.io import load_scenario
from mfmarket.policy import RegularizerSpec, policy_from_q, soft_value_iteration

cfg = load_scenario("oahu_desk")
g, model = cfg.grids()[0], cfg.models()[0]
pop = cfg.buses[0].population
belief = np.array([40, 38, 37, 36, 30, 25, 25, 32, 60, 85, 75, 52], dtype=float)
rewards = reward_table(g, belief, pop.total_capacity, pop.efficiency)

print("hour   price " + "".join(f"{h:6d}" for h in range(cfg.H)))
print("             " + "".join(f"{p:6.0f}" for p in belief))
for alpha in (0.02, 1.0, 10.0):
    table = soft_value_iteration(model, rewards, RegularizerSpec(alpha), cfg.gamma, tol=1e-10)
    pi = policy_from_q(table.q, g.mask, alpha)
    M = model.policy_matrix(pi)
    # half full at hour 0, net load drawn from its hour-0 distribution
    d = np.zeros(g.S)
    for k in range(g.K):
        d[g.index(0, k, g.E // 2)] = g.nd_probs[0, k]
    levels, actions = [], []
    for h in range(cfg.H):
        levels.append(float(d @ g.state_e))
        actions.append(float(d @ (pi @ g.actions)))
        d = d @ M
    print(f"alpha={alpha:<5} level " + "".join(f"{x:6.2f}" for x in levels))
    print(f"            action" + "".join(f"{x:6.2f}" for x in actions))
print("actions are fractions of capacity; positive charges, negative discharges")
