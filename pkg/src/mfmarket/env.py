"""Prosumer MDP: grids, storage dynamics, rewards and net-load sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def hour_of(t, H):
    return t % H


def day_of(t, H):
    return t // H


@dataclass(frozen=True)
class Triangular:
    lo: float = 1.0
    hi: float = 1.0
    mode: float = 1.0

    def __post_init__(self):
        if not self.lo <= self.mode <= self.hi:
            raise ValueError(f"triangular needs lo <= mode <= hi, got {self}")

    @property
    def mean(self):
        return (self.lo + self.hi + self.mode) / 3.0

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        lo, hi, c = self.lo, self.hi, self.mode
        w = hi - lo
        if w == 0:
            return np.full_like(u, lo)
        fc = (c - lo) / w
        left = lo + np.sqrt(u * w * (c - lo))
        right = hi - np.sqrt((1.0 - u) * w * (hi - c))
        return np.where(u < fc, left, right)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi, c = self.lo, self.hi, self.mode
        w = hi - lo
        if w == 0:
            return (x >= lo).astype(float)
        out = np.where(x <= c,
                       (x - lo) ** 2 / (w * (c - lo)) if c > lo else 0.0,
                       1.0 - (hi - x) ** 2 / (w * (hi - c)) if hi > c else 1.0)
        return np.clip(np.where(x <= lo, 0.0, np.where(x >= hi, 1.0, out)), 0.0, 1.0)


@dataclass
class PopulationSpec:
    m_prosumers: int
    m_consumers: int
    type_share: tuple
    type_theta: tuple
    total_capacity: float          # MWh
    efficiency: float = 1.0
    consumer_ref_capacity: float = 0.01   # MWh

    @property
    def k_types(self):
        return len(self.type_share)

    def type_capacity(self):
        """Per-prosumer capacity of each type; they sum to total_capacity over the population."""
        b = np.asarray(self.type_share, dtype=float)
        th = np.asarray(self.type_theta, dtype=float)
        if self.m_prosumers == 0:
            return np.zeros_like(th)
        return th * self.total_capacity / (self.m_prosumers * np.dot(th, b))

    def type_counts(self):
        counts = np.rint(np.asarray(self.type_share) * self.m_prosumers).astype(int)
        counts[-1] = self.m_prosumers - counts[:-1].sum()
        return counts

    def prosumer_capacities(self):
        return np.repeat(self.type_capacity(), self.type_counts())

    def validate(self):
        errs = []
        if abs(sum(self.type_share) - 1.0) > 1e-6:
            errs.append(f"type_share sums to {sum(self.type_share)}, expected 1")
        if len(self.type_share) != len(self.type_theta):
            errs.append("type_share and type_theta lengths differ")
        if any(t <= 0 for t in self.type_theta):
            errs.append("type_theta entries must be positive")
        if not 0 < self.efficiency <= 1:
            errs.append(f"efficiency {self.efficiency} outside (0, 1]")
        if self.m_prosumers < 0 or self.m_consumers < 0:
            errs.append("population counts must be nonnegative")
        if self.total_capacity < 0:
            errs.append("total_capacity must be nonnegative")
        return errs


@dataclass
class ScenarioProfiles:
    prosumer_nd_mean: np.ndarray
    consumer_nd_mean: np.ndarray
    noise: Triangular = field(default_factory=Triangular)
    consumer_noise: Triangular | None = None

    def __post_init__(self):
        self.prosumer_nd_mean = np.asarray(self.prosumer_nd_mean, dtype=float)
        self.consumer_nd_mean = np.asarray(self.consumer_nd_mean, dtype=float)
        if self.consumer_noise is None:
            self.consumer_noise = self.noise

    @property
    def H(self):
        return len(self.prosumer_nd_mean)


def make_action_grid(n=9):
    g = np.linspace(-1.0, 1.0, n)
    if not np.any(np.isclose(g, 0.0)):
        g = np.sort(np.append(g, 0.0))
    g[np.isclose(g, 0.0)] = 0.0
    return g


def make_storage_grid(n=21):
    return np.linspace(0.0, 1.0, n)


def snap_index(x, grid):
    """Index of the nearest grid point; ties go to the lower value (grid ascending)."""
    x = np.asarray(x, dtype=float)
    grid = np.asarray(grid, dtype=float)
    d = np.abs(x[..., None] - grid)
    return np.argmin(d, axis=-1)


def efficiency_adjust(e, a, eta):
    """Grid-side energy (fraction of capacity) needed for storage action a."""
    e = np.asarray(e, dtype=float)
    a = np.asarray(a, dtype=float)
    out = np.where(a < 0, np.maximum(-e, a) * eta, np.minimum(1.0 - e, a) / eta)
    return out if out.ndim else float(out)


def storage_transition(e, a, grid=None):
    nxt = np.clip(np.asarray(e, dtype=float) + np.asarray(a, dtype=float), 0.0, 1.0)
    if grid is not None:
        nxt = np.asarray(grid)[snap_index(nxt, grid)]
    return nxt if nxt.ndim else float(nxt)


def action_mask(e, grid, tol=1e-9):
    grid = np.asarray(grid, dtype=float)
    e = np.asarray(e, dtype=float)[..., None]
    mask = (grid >= -e - tol) & (grid <= 1.0 - e + tol)
    mask |= grid == 0.0
    return mask


def reward(e, nd, hour, a, lmp_profile, capacity, eta):
    """Net profit of one step; buying (positive net position) at a positive price loses money."""
    lam = np.asarray(lmp_profile, dtype=float)[hour]
    return -lam * capacity * (efficiency_adjust(e, a, eta) + nd)


def entropy_term(probs, alpha):
    """alpha * sum p log p with 0 log 0 = 0 (the negative-entropy regularizer)."""
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return alpha * plogp.sum(axis=-1)


def regularized_reward(e, nd, hour, a_dist, actions, lmp_profile, capacity, eta, alpha):
    r = reward(e, nd, hour, np.asarray(actions), lmp_profile, capacity, eta)
    return float(np.dot(a_dist, r) - entropy_term(a_dist, alpha))


def sample_net_load(mean_profile, noise: Triangular, hour, rng, size=None, grid=None):
    """mean[hour] times a triangular factor, optionally snapped to a value grid."""
    u = rng.random(size)
    x = np.asarray(mean_profile)[hour] * noise.ppf(u)
    if grid is not None:
        return np.asarray(grid)[snap_index(x, grid)]
    return x


class Grids:
    """Discrete state space (hour, net-load point, storage level) and action grid.

    States are flattened as s = (hour * K + k) * E + i.
    """

    def __init__(self, storage, actions, nd_values, nd_probs):
        self.storage = np.asarray(storage, dtype=float)
        self.actions = np.asarray(actions, dtype=float)
        self.nd_values = np.asarray(nd_values, dtype=float)     # (H, K)
        self.nd_probs = np.asarray(nd_probs, dtype=float)       # (H, K)
        self.H, self.K = self.nd_values.shape
        self.E = len(self.storage)
        self.A = len(self.actions)
        self.S = self.H * self.K * self.E
        hh, kk, ii = np.meshgrid(np.arange(self.H), np.arange(self.K), np.arange(self.E), indexing="ij")
        self.state_hour = hh.ravel()
        self.state_nd_index = kk.ravel()
        self.state_e_index = ii.ravel()
        self.state_e = self.storage[self.state_e_index]
        self.state_nd = self.nd_values[self.state_hour, self.state_nd_index]
        self.mask = action_mask(self.state_e, self.actions)
        # storage successor index for (level index, action index)
        self.next_e = snap_index(np.clip(self.storage[:, None] + self.actions[None, :], 0, 1), self.storage)
        self.zero_action = int(np.flatnonzero(self.actions == 0.0)[0])

    def index(self, hour, k, i):
        return (np.asarray(hour) * self.K + np.asarray(k)) * self.E + np.asarray(i)

    @classmethod
    def build(cls, prosumer_nd_mean, noise: Triangular, n_storage=21, n_actions=9, n_nd=5):
        mean = np.asarray(prosumer_nd_mean, dtype=float)
        q = (2 * np.arange(n_nd) + 1) / (2 * n_nd)
        factors = noise.ppf(q)
        vals = np.zeros((len(mean), n_nd))
        probs = np.zeros((len(mean), n_nd))
        for h, m in enumerate(mean):
            v = np.sort(m * factors)
            vals[h] = v
            probs[h] = _snap_cell_probs(v, m, noise)
        return cls(make_storage_grid(n_storage), make_action_grid(n_actions), vals, probs)


def _snap_cell_probs(values, mean, noise: Triangular):
    """Probability that mean * factor snaps to each of the (ascending) values."""
    K = len(values)
    p = np.zeros(K)
    if mean == 0 or noise.hi == noise.lo:
        # point mass: snap the single attainable value
        p[int(snap_index(mean * noise.mode, values))] = 1.0
        return p
    edges = np.concatenate([[-np.inf], (values[1:] + values[:-1]) / 2, [np.inf]])
    fac = edges / mean
    cdf = noise.cdf(np.clip(fac, noise.lo - 1.0, noise.hi + 1.0))
    if mean > 0:
        p = np.diff(cdf)
    else:
        p = -np.diff(cdf)
    # duplicates: all mass on the lowest index with that value
    for k in range(1, K):
        if values[k] == values[k - 1]:
            p[k - 1] += p[k]
            p[k] = 0.0
    p = np.maximum(p, 0.0)
    return p / p.sum()


def reward_table(grids: Grids, lmp_profile, capacity, eta):
    """r(s, a) for every state and action, shape (S, A)."""
    return reward(grids.state_e[:, None], grids.state_nd[:, None], grids.state_hour[:, None],
                  grids.actions[None, :], lmp_profile, capacity, eta)
