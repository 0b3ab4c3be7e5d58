"""Dense primal active-set solver for small strictly convex QPs.

Solves

    min  0.5 x'Qx + c'x
    s.t. A x  = b
         G x <= h

with Q positive definite. Multipliers follow the Lagrangian
f(x) + y'(Ax - b) + mu'(Gx - h), so mu >= 0 at the optimum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import linprog


class Infeasible(Exception):
    """Raised when no feasible point exists. ``certificate`` is a dict."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate or {}


class NonConvergence(Exception):
    pass


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray        # equality multipliers
    mu: np.ndarray       # inequality multipliers, zero off the working set
    working_set: list
    iterations: int


def _independent(rows, candidate, tol=1e-10):
    if not rows:
        return np.linalg.norm(candidate) > tol
    M = np.vstack(rows + [candidate])
    return np.linalg.matrix_rank(M, tol=tol * max(1.0, np.abs(M).max())) == M.shape[0]


def find_feasible_point(A, b, G, h):
    """Phase 1: any point with Ax = b, Gx <= h, via the HiGHS LP solver."""
    n = A.shape[1] if A.size else G.shape[1]
    res = linprog(
        np.zeros(n),
        A_ub=G if G.size else None,
        b_ub=h if G.size else None,
        A_eq=A if A.size else None,
        b_eq=b if A.size else None,
        bounds=[(None, None)] * n,
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10},
    )
    if res.status == 2:
        raise Infeasible("no point satisfies the constraints", {"kind": "phase1", "message": res.message})
    if res.status != 0:
        raise NonConvergence(f"phase 1 failed: {res.message}")
    return np.asarray(res.x, dtype=float)


def _kkt_solve(Q, M, g):
    n = Q.shape[0]
    m = M.shape[0]
    if m == 0:
        return scipy.linalg.solve(Q, -g, assume_a="pos"), np.zeros(0)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = Q
    K[:n, n:] = M.T
    K[n:, :n] = M
    rhs = np.concatenate([-g, np.zeros(m)])
    sol = scipy.linalg.solve(K, rhs, assume_a="sym")
    return sol[:n], sol[n:]


def solve_qp(Q, c, A, b, G, h, x0=None, max_iter=None, tol=1e-10):
    """Primal active-set method (Nocedal & Wright, Alg. 16.3).

    Ties among blocking constraints and among negative multipliers are broken
    toward the lowest constraint index.
    """
    Q = np.asarray(Q, dtype=float)
    c = np.asarray(c, dtype=float)
    n = Q.shape[0]
    A = np.asarray(A, dtype=float).reshape(-1, n)
    b = np.asarray(b, dtype=float).reshape(-1)
    G = np.asarray(G, dtype=float).reshape(-1, n)
    h = np.asarray(h, dtype=float).reshape(-1)
    m_eq, m_in = A.shape[0], G.shape[0]
    if max_iter is None:
        max_iter = 50 * max(n + m_in, 1)

    x = find_feasible_point(A, b, G, h) if x0 is None else np.array(x0, dtype=float)

    # Initial working set: near-active rows, kept linearly independent.
    scale = 1.0 + np.abs(h) if m_in else np.zeros(0)
    rows = [A[i] for i in range(m_eq)]
    W = []
    for i in range(m_in):
        if G[i] @ x >= h[i] - 1e-7 * scale[i] and _independent(rows, G[i]):
            rows.append(G[i])
            W.append(i)
    # Put x exactly on the working-set constraints.
    if rows:
        M = np.vstack(rows)
        r = np.concatenate([b, h[W]]) - M @ x
        x = x + np.linalg.lstsq(M, r, rcond=None)[0]

    for it in range(1, max_iter + 1):
        M = np.vstack([A, G[W]]) if W else A
        g = Q @ x + c
        p, z = _kkt_solve(Q, M, g)
        if np.abs(p).max(initial=0.0) <= 1e-11 * max(1.0, np.abs(x).max(initial=0.0)):
            mu_w = z[m_eq:]
            if mu_w.size == 0 or mu_w.min() >= -tol:
                mu = np.zeros(m_in)
                mu[W] = np.maximum(mu_w, 0.0)
                return QPResult(x, z[:m_eq], mu, sorted(W), it)
            most_neg = mu_w.min()
            # lowest constraint index among the most negative multipliers
            cands = [W[j] for j in range(len(W)) if mu_w[j] <= most_neg + 1e-14 * abs(most_neg)]
            W.remove(min(cands))
            continue
        alpha, blocking = 1.0, None
        for i in range(m_in):
            if i in W:
                continue
            gp = G[i] @ p
            if gp > 1e-14:
                slack = max(h[i] - G[i] @ x, 0.0)
                ai = slack / gp
                if ai < alpha - 1e-15:
                    alpha, blocking = ai, i
        x = x + alpha * p
        if blocking is not None:
            W.append(blocking)
    raise NonConvergence(f"active-set iteration cap {max_iter} reached")
