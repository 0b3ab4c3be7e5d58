"""Randomized invariant checks shared by the `verify` command and the test suite."""
from __future__ import annotations

import numpy as np

from .meanfield import consistency_update
from .network import (GeneratorSpec, Infeasible, LineSpec, Network, kkt_residuals, lmp_sensitivity_oracle,
                      ptdf_from_branches, solve_ed)


def random_ed_instance(rng, max_buses=6, max_gens=8, max_lines=7, congest=True):
    """A random dispatch problem that is feasible (retries until it is)."""
    while True:
        N = int(rng.integers(1, max_buses + 1))
        G = int(rng.integers(1, max_gens + 1))
        gens = [GeneratorSpec(g, int(rng.integers(0, N)), float(rng.uniform(0.01, 0.5)),
                              float(rng.uniform(5, 40)), float(rng.uniform(20, 120))) for g in range(G)]
        lines = []
        if N > 1:
            # spanning tree plus random chords, capped at max_lines
            br = [(int(rng.integers(0, n)), n) for n in range(1, N)]
            extra = max_lines - len(br)
            for _ in range(int(rng.integers(0, max(extra, 0) + 1))):
                f, t = rng.choice(N, 2, replace=False)
                br.append((int(f), int(t)))
            br = br[:max_lines]
            P = ptdf_from_branches(N, [(f, t, float(rng.uniform(0.5, 2.0))) for f, t in br])
            for l in range(len(br)):
                fmax = float(rng.uniform(5, 60)) if congest else np.inf
                lines.append(LineSpec(l, tuple(P[l]), fmax))
        net = Network(N, lines, gens)
        cap = sum(g.p_max for g in gens)
        demand = rng.uniform(0, 1, N)
        demand *= rng.uniform(0.2, 0.8) * cap / demand.sum()
        try:
            solve_ed(net, demand)
        except Infeasible:
            continue
        return net, demand


def active_pattern(net, sol, tol=1e-7):
    """Binding line directions and generator bounds at a solution."""
    lines = tuple(int(np.sign(f)) if abs(abs(f) - l.f_max) <= tol * max(1, l.f_max) else 0
                  for f, l in zip(sol.flows, net.lines))
    gens = tuple(-1 if p <= tol else (1 if p >= g.p_max - tol else 0) for p, g in zip(sol.dispatch, net.generators))
    return lines, gens


def ed_fuzz(n_instances=200, seed=0, fd_step=1e-3):
    """KKT residuals, finite-difference price agreement and uncongested price equality."""
    rng = np.random.default_rng(seed)
    worst_kkt, worst_fd, worst_flat = 0.0, 0.0, 0.0
    n_fd, n_flat = 0, 0
    for _ in range(n_instances):
        net, d = random_ed_instance(rng)
        sol = solve_ed(net, d)
        worst_kkt = max(worst_kkt, max(kkt_residuals(net, d, sol).values()))
        pat = active_pattern(net, sol)
        if not any(pat[0]):
            n_flat += 1
            worst_flat = max(worst_flat, float(np.ptp(sol.lmps)))
        stable = True
        for n in range(net.n_buses):
            for s in (-1, 1):
                e = np.zeros_like(d)
                e[n] = s * fd_step
                try:
                    if active_pattern(net, solve_ed(net, d + e)) != pat:
                        stable = False
                except Infeasible:
                    stable = False
        if stable:
            n_fd += 1
            fd = np.array([lmp_sensitivity_oracle(net, d, n, fd_step) for n in range(net.n_buses)])
            worst_fd = max(worst_fd, float(np.abs(fd - sol.lmps).max()))
    return {"instances": n_instances, "max_kkt_residual": worst_kkt, "fd_instances": n_fd,
            "max_fd_error": worst_fd, "uncongested_instances": n_flat, "max_uncongested_spread": worst_flat}


def _random_meanfield(rng, S, A, mask):
    if rng.random() < 0.5:
        # point masses separate the transitions as much as possible
        s = int(rng.integers(S))
        w = np.zeros((S, A))
        w[s, rng.choice(np.flatnonzero(mask[s]))] = 1.0
        return w
    w = rng.random((S, A)) ** 3 * mask
    return w / w.sum()


def _random_policy(rng, mask):
    w = rng.random(mask.shape) ** 3 * mask
    return w / w.sum(axis=1, keepdims=True)


def consistency_ratios(model, zeta, n_pairs=1000, seed=0, variant="printed"):
    """Largest observed Lipschitz ratios of the consistency map.

    Mean-field ratio: ||G(L, pi) - G(L', pi)||_1 / ||L - L'||_1.
    Policy ratio: ||G(L, pi) - G(L, pi')||_1 / sup_s ||pi(.|s) - pi'(.|s)||_1.
    """
    rng = np.random.default_rng(seed)
    S, A, mask = model.S, model.A, model.mask
    r_mf, r_pi = 0.0, 0.0
    for _ in range(n_pairs):
        L1, L2 = _random_meanfield(rng, S, A, mask), _random_meanfield(rng, S, A, mask)
        p1, p2 = _random_policy(rng, mask), _random_policy(rng, mask)
        g11 = consistency_update(L1, p1, model, zeta, variant)
        d = np.abs(L1 - L2).sum()
        if d > 0:
            r_mf = max(r_mf, np.abs(g11 - consistency_update(L2, p1, model, zeta, variant)).sum() / d)
        dp = np.abs(p1 - p2).sum(axis=1).max()
        if dp > 0:
            r_pi = max(r_pi, np.abs(g11 - consistency_update(L1, p2, model, zeta, variant)).sum() / dp)
    return float(r_mf), float(r_pi)
