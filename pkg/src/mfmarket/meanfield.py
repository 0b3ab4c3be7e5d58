"""Transition kernels, the mean-field consistency map and demand aggregation.

A mean field is an (S, A) array of probabilities over state-action pairs.
Transition models expose three operations instead of a dense S x A x S
tensor (the prosumer kernel factorizes over hour, net load and storage):

    expect(v)   -> (S, A):  sum_s' P(s'|s,a) v(s')
    push(w)     -> (S, A):  out[s', a] = sum_s w[s, a] P(s'|s,a)
    policy_matrix(pi) -> (S, S):  sum_a pi(a|s) P(s'|s,a)
"""
from __future__ import annotations

import numpy as np

from .env import Grids, efficiency_adjust


class DenseTransitionModel:
    """Explicit P[s, a, s'] for small MDPs."""

    def __init__(self, P, mask=None):
        self.P = np.asarray(P, dtype=float)
        self.S, self.A, _ = self.P.shape
        self.mask = np.ones((self.S, self.A), bool) if mask is None else np.asarray(mask, bool)
        self._cum = np.cumsum(self.P, axis=2)

    def expect(self, v):
        return self.P @ np.asarray(v, dtype=float)

    def push(self, w):
        return np.einsum("sa,sat->ta", w, self.P)

    def policy_matrix(self, pi):
        return np.einsum("sa,sat->st", pi, self.P)

    def matrix(self):
        return self.P

    def sample_next(self, s, a, u):
        return int(min(np.searchsorted(self._cum[s, a], u[0], side="right"), self.S - 1))


class FactoredTransitionModel:
    """Prosumer kernel: hour advances, net load redrawn for the new hour,
    storage follows the clipped action or regenerates uniformly w.p. zeta."""

    def __init__(self, grids: Grids, zeta: float):
        self.grids = grids
        self.zeta = float(zeta)
        self.S, self.A = grids.S, grids.A
        self.mask = grids.mask
        g = grids
        # next_e one-hot: N[i, a, i']
        self._N = np.zeros((g.E, g.A, g.E))
        self._N[np.arange(g.E)[:, None], np.arange(g.A)[None, :], g.next_e] = 1.0
        self._nd_cum = np.cumsum(g.nd_probs, axis=1)

    def _shape(self, x):
        g = self.grids
        return x.reshape(g.H, g.K, g.E, *x.shape[1:])

    def expect(self, v):
        g = self.grids
        V = np.asarray(v, dtype=float).reshape(g.H, g.K, g.E)
        W = np.einsum("hk,hke->he", g.nd_probs, V)          # indexed by next hour
        W = np.roll(W, -1, axis=0)                           # W[h] is for hour h+1
        moved = W[:, g.next_e]                               # (H, E, A)
        out = (1 - self.zeta) * moved + self.zeta * W.mean(axis=1)[:, None, None]
        out = np.broadcast_to(out[:, None], (g.H, g.K, g.E, g.A))
        return out.reshape(g.S, g.A)

    def push(self, w):
        g = self.grids
        w = np.asarray(w, dtype=float).reshape(g.H, g.K, g.E, g.A)
        u = w.sum(axis=1)                                    # (H, E, A)
        moved = np.einsum("hea,eaf->hfa", u, self._N)        # (H, E', A)
        tot = u.sum(axis=1)                                  # (H, A)
        e_next = (1 - self.zeta) * moved + self.zeta * tot[:, None, :] / g.E
        e_next = np.roll(e_next, 1, axis=0)                  # mass at hour h lands in h+1
        out = g.nd_probs[:, :, None, None] * e_next[:, None, :, :]
        return out.reshape(g.S, g.A)

    def policy_matrix(self, pi):
        g = self.grids
        pi = np.asarray(pi, dtype=float).reshape(g.H, g.K, g.E, g.A)
        e_next = np.einsum("hkea,eaf->hkef", pi, self._N)
        e_next = (1 - self.zeta) * e_next + self.zeta / g.E
        M = np.zeros((g.H, g.K, g.E, g.H, g.K, g.E))
        for h in range(g.H):
            h2 = (h + 1) % g.H
            M[h, :, :, h2] = g.nd_probs[h2][None, None, :, None] * e_next[h][:, :, None, :]
        return M.reshape(g.S, g.S)

    def matrix(self):
        """Dense P[s, a, s']; only for small grids."""
        g = self.grids
        P = np.zeros((g.S, g.A, g.S))
        for a in range(g.A):
            onehot = np.zeros((g.S, g.A))
            onehot[:, a] = 1.0
            pi = onehot
            P[:, a, :] = self.policy_matrix(pi)
        return P

    def sample_next(self, s, a, u):
        """u: three uniforms (regeneration, regenerated level, net load)."""
        g = self.grids
        i = s % g.E
        h = s // (g.E * g.K)
        h2 = h + 1 if h + 1 < g.H else 0
        if u[0] < self.zeta:
            i2 = min(int(u[1] * g.E), g.E - 1)
        else:
            i2 = g.next_e[i, a]
        k2 = int(np.searchsorted(self._nd_cum[h2], u[2], side="right"))
        if k2 >= g.K:
            k2 = g.K - 1
        return (h2 * g.K + k2) * g.E + i2


def build_transition_model(grids: Grids, zeta: float) -> FactoredTransitionModel:
    if not 0 <= zeta <= 1:
        raise ValueError(f"zeta must lie in [0, 1], got {zeta}")
    return FactoredTransitionModel(grids, zeta)


def consistency_update(mf, policy, model, zeta, variant="printed"):
    """One step of the mean-field map with uniform noise of weight zeta.

    ``variant="printed"`` conditions the transition on the new action a',
    L'(s',a') = zeta/(|S||A|) + (1-zeta) sum_{s,a} L(s,a) P(s'|s,a') pi(a'|s).
    ``variant="natural"`` moves with the old action and then draws a' at s'.
    """
    mf = np.asarray(mf, dtype=float)
    pi = np.asarray(policy, dtype=float)
    S, A = mf.shape
    if variant == "printed":
        w = mf.sum(axis=1)[:, None] * pi
        moved = model.push(w)
    elif variant == "natural":
        nxt = model.push(mf).sum(axis=1)
        moved = nxt[:, None] * pi
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return zeta / (S * A) + (1 - zeta) * moved


def initial_meanfield(grids: Grids, e0=0.5, hour=0, policy=None):
    """Mass on storage level e0 at one hour, net load per that hour's distribution."""
    from .env import snap_index
    g = grids
    m = np.zeros((g.H, g.K, g.E))
    m[hour, :, int(snap_index(e0, g.storage))] = g.nd_probs[hour]
    m = m.reshape(g.S)
    if policy is None:
        policy = g.mask / g.mask.sum(axis=1, keepdims=True)
    return m[:, None] * policy


def meanfield_to_demand(mfs, grids_list, pops, consumer_ratio_sums):
    """Bus demand: capacity-scaled expected net position of the mean field plus consumers."""
    D = np.zeros(len(mfs))
    for n, (mf, g, pop) in enumerate(zip(mfs, grids_list, pops)):
        phi = efficiency_adjust(g.state_e[:, None], g.actions[None, :], pop.efficiency)
        pos = phi + g.state_nd[:, None]
        D[n] = pop.total_capacity * float(np.sum(mf * pos)) + pop.consumer_ref_capacity * consumer_ratio_sums[n]
    return D


def aggregate_storage(levels, capacities):
    levels = np.asarray(levels, dtype=float)
    caps = np.asarray(capacities, dtype=float)
    total = caps.sum()
    if total == 0:
        return float(levels.mean()) if levels.size else 0.0
    return float(np.dot(levels, caps) / total)
