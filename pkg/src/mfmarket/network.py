"""Transmission network, economic dispatch and locational marginal prices.

Line flows use the withdrawal convention: PTDF[l, n] is the flow on line l
per MWh withdrawn at bus n (and injected at the reference bus), so

    flow = PTDF @ (D - B p)

where B maps generators to their buses. With this orientation the nodal
price is  lmp_n = hub - sum_l PTDF[l, n] * (mu_lo[l] - mu_hi[l]).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .qp import Infeasible, NonConvergence, solve_qp

KKT_TOL = 1e-8

__all__ = [
    "GeneratorSpec", "LineSpec", "Network", "EDSolution", "Infeasible", "NonConvergence",
    "validate_network", "solve_ed", "compute_lmps", "lmp_sensitivity_oracle",
    "estimate_lmp_lipschitz", "ptdf_from_branches", "kkt_residuals",
]


@dataclass(frozen=True)
class GeneratorSpec:
    id: int
    bus: int
    cost_a: float
    cost_b: float
    p_max: float

    def cost(self, p):
        return self.cost_a * p * p + self.cost_b * p


@dataclass(frozen=True)
class LineSpec:
    id: int
    ptdf: tuple
    f_max: float


@dataclass
class Network:
    n_buses: int
    lines: list = field(default_factory=list)
    generators: list = field(default_factory=list)
    gens_by_bus: list | None = None

    def __post_init__(self):
        if self.gens_by_bus is None:
            self.gens_by_bus = [[g.id for g in self.generators if g.bus == n] for n in range(self.n_buses)]

    @property
    def n_gens(self):
        return len(self.generators)

    @property
    def n_lines(self):
        return len(self.lines)

    def ptdf_matrix(self):
        if not self.lines:
            return np.zeros((0, self.n_buses))
        return np.array([l.ptdf for l in self.lines], dtype=float)

    def incidence(self):
        B = np.zeros((self.n_buses, self.n_gens))
        for n, gens in enumerate(self.gens_by_bus):
            for g in gens:
                B[n, g] = 1.0
        return B

    def with_capacities(self, p_max: dict):
        """Copy with some generator capacities replaced (used for renewables)."""
        gens = [GeneratorSpec(g.id, g.bus, g.cost_a, g.cost_b, float(p_max.get(g.id, g.p_max)))
                for g in self.generators]
        return Network(self.n_buses, list(self.lines), gens, [list(s) for s in self.gens_by_bus])


@dataclass
class EDSolution:
    dispatch: np.ndarray
    hub_price: float
    line_duals_lo: np.ndarray
    line_duals_hi: np.ndarray
    gen_duals_lo: np.ndarray
    gen_duals_hi: np.ndarray
    lmps: np.ndarray
    objective: float
    flows: np.ndarray | None = None
    iterations: int = 0

    def as_record(self):
        """Flat row: hub price, per-bus LMPs, per-generator dispatch, per-line flow."""
        rec = {"hub_price": float(self.hub_price)}
        rec.update({f"lmp_{n}": float(v) for n, v in enumerate(self.lmps)})
        rec.update({f"p_{g}": float(v) for g, v in enumerate(self.dispatch)})
        rec.update({f"flow_{l}": float(v) for l, v in enumerate(self.flows)})
        return rec


def validate_network(net: Network) -> list[str]:
    problems = []
    N = net.n_buses
    if N < 1:
        problems.append("network needs at least one bus")
    for i, g in enumerate(net.generators):
        if g.id != i:
            problems.append(f"generator {i} has id {g.id}; ids must be 0..G-1 in order")
        if not g.cost_a > 0:
            problems.append(f"generator {g.id} cost_a must be positive (strong convexity)")
        if not np.isfinite(g.cost_b):
            problems.append(f"generator {g.id} cost_b not finite")
        if not g.p_max >= 0:
            problems.append(f"generator {g.id} negative capacity")
        if not 0 <= g.bus < N:
            problems.append(f"generator {g.id} bus {g.bus} out of range")
    for i, l in enumerate(net.lines):
        if len(l.ptdf) != N:
            problems.append(f"line {l.id} ptdf has length {len(l.ptdf)}, expected {N}")
        elif not np.all(np.isfinite(l.ptdf)):
            problems.append(f"line {l.id} ptdf not finite")
        if not l.f_max > 0:
            problems.append(f"line {l.id} non-positive flow limit")
    seen = {}
    if len(net.gens_by_bus) != N:
        problems.append(f"gens_by_bus has {len(net.gens_by_bus)} sets for {N} buses")
    for n, gens in enumerate(net.gens_by_bus):
        for g in gens:
            if g in seen:
                problems.append(f"generator {g} in multiple bus sets ({seen[g]} and {n})")
            else:
                seen[g] = n
            if 0 <= g < len(net.generators) and net.generators[g].bus != n:
                problems.append(f"generator {g} listed at bus {n} but declares bus {net.generators[g].bus}")
    for g in range(len(net.generators)):
        if g not in seen:
            problems.append(f"generator {g} in no bus set")
    return problems


def _qp_data(net, demand):
    """Assemble the QP. Constraint order: line lower, line upper, gen lower, gen upper."""
    d = np.asarray(demand, dtype=float)
    a = np.array([g.cost_a for g in net.generators])
    b = np.array([g.cost_b for g in net.generators])
    pmax = np.array([g.p_max for g in net.generators])
    G_ = net.n_gens
    finite = [i for i, l in enumerate(net.lines) if np.isfinite(l.f_max)]
    ptdf = net.ptdf_matrix()[finite] if finite else np.zeros((0, net.n_buses))
    fmax = np.array([net.lines[i].f_max for i in finite])
    H = ptdf @ net.incidence()
    base = ptdf @ d
    # flow = base - H p ;  flow >= -F  ->  H p <= F + base ;  flow <= F  ->  -H p <= F - base
    G = np.vstack([H, -H, -np.eye(G_), np.eye(G_)])
    h = np.concatenate([fmax + base, fmax - base, np.zeros(G_), pmax])
    return a, b, pmax, finite, ptdf, G, h


def kkt_residuals(net: Network, demand, sol: EDSolution) -> dict:
    d = np.asarray(demand, dtype=float)
    a, b, pmax, finite, ptdf, G, h = _qp_data(net, d)
    p = sol.dispatch
    H = ptdf @ net.incidence()
    mu_lo = sol.line_duals_lo[finite] if finite else np.zeros(0)
    mu_hi = sol.line_duals_hi[finite] if finite else np.zeros(0)
    grad = 2 * a * p + b - sol.hub_price + H.T @ (mu_lo - mu_hi) - sol.gen_duals_lo + sol.gen_duals_hi
    mu = np.concatenate([mu_lo, mu_hi, sol.gen_duals_lo, sol.gen_duals_hi])
    slack = G @ p - h
    duals = np.concatenate([sol.line_duals_lo, sol.line_duals_hi, sol.gen_duals_lo, sol.gen_duals_hi])
    return {
        "stationarity": float(np.abs(grad).max(initial=0.0)),
        "balance": float(abs(p.sum() - d.sum())),
        "primal": float(np.maximum(slack, 0.0).max(initial=0.0)),
        "dual": float(np.maximum(-duals, 0.0).max(initial=0.0)),
        "complementarity": float(np.abs(mu * slack).max(initial=0.0)),
    }


def compute_lmps(hub_price, line_duals_lo, line_duals_hi, net: Network) -> np.ndarray:
    ptdf = net.ptdf_matrix()
    lo = np.asarray(line_duals_lo, dtype=float)
    hi = np.asarray(line_duals_hi, dtype=float)
    if ptdf.shape[0] == 0:
        return np.full(net.n_buses, float(hub_price))
    return hub_price - ptdf.T @ (lo - hi)


def solve_ed(net: Network, demand) -> EDSolution:
    """Least-cost dispatch with exact duals and nodal prices.

    Raises Infeasible (capacity shortfall or no flow-feasible dispatch) and
    NonConvergence (active-set iteration cap).
    """
    d = np.asarray(demand, dtype=float)
    if d.shape != (net.n_buses,):
        raise ValueError(f"demand has shape {d.shape}, expected ({net.n_buses},)")
    total = d.sum()
    cap = sum(g.p_max for g in net.generators)
    if total < 0:
        raise Infeasible("total demand is negative", {"kind": "negative_demand", "total_demand": total})
    if cap < total:
        raise Infeasible("total capacity below total demand",
                         {"kind": "capacity", "total_capacity": cap, "total_demand": total})
    a, b, pmax, finite, ptdf, G, h = _qp_data(net, d)
    G_ = net.n_gens
    try:
        res = solve_qp(np.diag(2 * a), b, np.ones((1, G_)), [total], G, h,
                       max_iter=50 * (G_ + net.n_lines))
    except Infeasible as exc:
        raise Infeasible("no flow-feasible dispatch",
                         {"kind": "flow", "total_demand": total, "detail": exc.certificate}) from None
    L = len(finite)
    mu = res.mu
    line_lo = np.zeros(net.n_lines)
    line_hi = np.zeros(net.n_lines)
    line_lo[finite] = mu[:L]
    line_hi[finite] = mu[L:2 * L]
    gen_lo = mu[2 * L:2 * L + G_]
    gen_hi = mu[2 * L + G_:]
    hub = -float(res.y[0])
    p = res.x
    return EDSolution(
        dispatch=p,
        hub_price=hub,
        line_duals_lo=line_lo,
        line_duals_hi=line_hi,
        gen_duals_lo=gen_lo,
        gen_duals_hi=gen_hi,
        lmps=compute_lmps(hub, line_lo, line_hi, net),
        objective=float(np.sum(a * p * p + b * p)),
        flows=net.ptdf_matrix() @ (d - net.incidence() @ p),
        iterations=res.iterations,
    )


def lmp_sensitivity_oracle(net: Network, demand, bus: int, h: float = 1e-3) -> float:
    """Central difference of the optimal cost in the demand at one bus."""
    d = np.asarray(demand, dtype=float)
    e = np.zeros_like(d)
    e[bus] = h
    return (solve_ed(net, d + e).objective - solve_ed(net, d - e).objective) / (2 * h)


def estimate_lmp_lipschitz(net: Network, sampler: Callable, n_pairs: int, return_ratios=False):
    """Largest |delta lmp| / ||delta D||_1 over sampled demand pairs.

    ``sampler()`` returns a pair of demand vectors. Returns the estimate and
    the number of infeasible pairs skipped (plus all ratios if asked).
    """
    best, skipped, ratios = 0.0, 0, []
    for _ in range(n_pairs):
        d1, d2 = sampler()
        try:
            l1 = solve_ed(net, d1).lmps
            l2 = solve_ed(net, d2).lmps
        except Infeasible:
            skipped += 1
            continue
        dist = np.abs(np.asarray(d1) - np.asarray(d2)).sum()
        r = 0.0 if dist == 0 else float(np.abs(l1 - l2).max() / dist)
        ratios.append(r)
        best = max(best, r)
    if return_ratios:
        return best, skipped, np.array(ratios)
    return best, skipped


def ptdf_from_branches(n_buses: int, branches: Sequence, ref: int = 0) -> np.ndarray:
    """DC power-flow PTDFs (withdrawal convention) for lines given as (from, to, reactance).

    Row l gives the flow on line l, oriented from -> to, per MWh withdrawn at
    each bus and injected at ``ref``.
    """
    L = len(branches)
    A = np.zeros((L, n_buses))
    x = np.zeros(L)
    for l, (f, t, react) in enumerate(branches):
        A[l, f], A[l, t], x[l] = 1.0, -1.0, react
    Bd = np.diag(1.0 / x)
    Bbus = A.T @ Bd @ A
    keep = [n for n in range(n_buses) if n != ref]
    Binv = np.zeros((n_buses, n_buses))
    Binv[np.ix_(keep, keep)] = np.linalg.inv(Bbus[np.ix_(keep, keep)])
    injection_ptdf = Bd @ A @ Binv
    return -injection_ptdf
