"""Small scenario documents for fast tests."""
import copy

import numpy as np

import mfmarket.io as mio
from mfmarket.meanfield import DenseTransitionModel


def tiny_doc(n_buses=2, **algo):
    doc = {
        "name": "tiny",
        "units": "MWh",
        "H": 4,
        "n_days": 3,
        "evening_hours": [3],
        "grids": {"storage": 5, "actions": 5, "net_load": 3},
        "algorithm": {"alpha": 0.5, "gamma": 0.9, "zeta": 0.1, "t_train": 50, "mode": "finite", "seeds": [0, 1]},
        "network": {
            "n_buses": n_buses,
            "generators": [{"bus": 0, "cost_a": 2.0, "cost_b": 20.0, "p_max": 100.0},
                           {"bus": n_buses - 1, "cost_a": 4.0, "cost_b": 25.0, "p_max": 100.0}],
            "branches": [{"from": i, "to": i + 1, "x": 1.0, "f_max": 50.0} for i in range(n_buses - 1)],
        },
        "bus_defaults": {
            "prosumers": 12, "consumers": 20, "type_share": [0.5, 0.5], "type_theta": [1, 2],
            "total_capacity": 1.2, "consumer_ref_capacity": 0.05,
            "prosumer_nd_mean": [0.2, -0.3, 0.1, 0.5], "consumer_nd_mean": [0.5, 0.6, 0.7, 1.0],
            "noise": [0.8, 1.2, 1.0],
        },
        "buses": [{} for _ in range(n_buses)],
    }
    doc["algorithm"].update(algo)
    return doc


def tiny_config(n_buses=2, **algo):
    return mio.config_from_dict(tiny_doc(n_buses, **algo))


def with_changes(doc, **top):
    d = copy.deepcopy(doc)
    d.update(top)
    return d


def random_mdp(rng, S=3, A=2):
    P = rng.dirichlet(np.ones(S), size=(S, A))
    return DenseTransitionModel(P), rng.normal(size=(S, A))


def policy_grid_values(model, r, alpha, gamma, step=1e-3):
    """Exact regularized values of every policy on a 2-state 2-action grid."""
    p = np.arange(0, 1 + step / 2, step)
    x, y = np.meshgrid(p, p, indexing="ij")            # prob of action 0 in state 0 / state 1
    P = model.P

    def ent(z):
        with np.errstate(divide="ignore", invalid="ignore"):
            return -np.nan_to_num(z * np.log(z)) - np.nan_to_num((1 - z) * np.log(1 - z))
    r0 = x * r[0, 0] + (1 - x) * r[0, 1] + alpha * ent(x)
    r1 = y * r[1, 0] + (1 - y) * r[1, 1] + alpha * ent(y)
    m00 = x * P[0, 0, 0] + (1 - x) * P[0, 1, 0]
    m01 = 1 - m00
    m10 = y * P[1, 0, 0] + (1 - y) * P[1, 1, 0]
    m11 = 1 - m10
    a, b, c, d = 1 - gamma * m00, -gamma * m01, -gamma * m10, 1 - gamma * m11
    det = a * d - b * c
    return (d * r0 - b * r1) / det, (-c * r0 + a * r1) / det
