"""Entropy-regularized control: soft value iteration, soft Q-learning, evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .qp import NonConvergence

ALPHA_FLOOR = 1e-6


@dataclass(frozen=True)
class RegularizerSpec:
    alpha: float = 0.1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def rho(self):
        # strong-convexity modulus of alpha * sum p log p w.r.t. the l1 norm
        return self.alpha


@dataclass
class SoftQTable:
    q: np.ndarray
    mask: np.ndarray
    gamma: float
    visits: np.ndarray | None = None

    def copy(self):
        return SoftQTable(self.q.copy(), self.mask, self.gamma,
                          None if self.visits is None else self.visits.copy())


def soft_value(q, mask, alpha):
    """alpha * log sum_{a unmasked} exp(q/alpha), row-wise, max-shifted."""
    alpha = max(alpha, ALPHA_FLOOR)
    qm = np.where(mask, q, -np.inf)
    m = qm.max(axis=-1, keepdims=True)
    z = np.exp((qm - m) / alpha).sum(axis=-1)
    return m[..., 0] + alpha * np.log(z)


def policy_from_q(q, mask, alpha):
    """Masked softmax of q/alpha; the maximizer of <pi, q> - alpha sum pi log pi."""
    alpha = max(alpha, ALPHA_FLOOR)
    qm = np.where(mask, q, -np.inf)
    m = qm.max(axis=-1, keepdims=True)
    ex = np.exp((qm - m) / alpha)
    return ex / ex.sum(axis=-1, keepdims=True)


def soft_bellman(q, model, rewards, alpha, gamma):
    return rewards + gamma * model.expect(soft_value(q, model.mask, alpha))


def soft_value_iteration(model, rewards, reg: RegularizerSpec, gamma, tol=1e-8, q0=None,
                         return_history=False):
    """Fixed point of Q = r + gamma * E[V(s')], V = alpha log sum exp(Q / alpha).

    Stops once the contraction error bound gamma/(1-gamma) * ||Q_k+1 - Q_k|| <= tol.
    """
    rewards = np.asarray(rewards, dtype=float)
    mask = model.mask
    q = np.zeros_like(rewards) if q0 is None else np.array(q0, dtype=float)
    if gamma == 0:
        q = np.where(mask, rewards, 0.0)
        return (SoftQTable(q, mask, gamma), [0.0]) if return_history else SoftQTable(q, mask, gamma)
    cap = 10 * max(int(math.ceil(math.log(tol) / math.log(gamma))), 1)
    # the bound above assumes O(1) initial error; allow for the reward scale
    scale = max(1.0, float(np.abs(rewards).max()) / (1 - gamma), float(np.abs(q).max()))
    cap += 10 * int(math.ceil(math.log(scale) / -math.log(gamma)))
    history = []
    for _ in range(cap):
        q_new = np.where(mask, soft_bellman(q, model, rewards, reg.alpha, gamma), 0.0)
        diff = float(np.abs(q_new - q).max())
        history.append(diff)
        q = q_new
        if gamma / (1 - gamma) * diff <= tol:
            table = SoftQTable(q, mask, gamma)
            return (table, history) if return_history else table
    raise NonConvergence(f"soft value iteration did not reach tol={tol} in {cap} sweeps")


def default_lr(k, c=0.5):
    return c / (k ** 0.6 + 1.0)


def soft_q_learning(model, rewards, reg: RegularizerSpec, gamma, t_train, rng, table=None,
                    s0=0, lr=default_lr):
    """Tabular soft Q-learning along one trajectory sampled from ``model``.

    Actions are drawn from the current soft policy, so exploration comes from
    the entropy term alone. ``lr(k)`` takes the visit count of the updated pair.
    Returns the table and the final state.
    """
    if table is None:
        table = SoftQTable(np.zeros_like(rewards, dtype=float), model.mask, gamma)
    if table.visits is None:
        table.visits = np.zeros(table.q.shape, dtype=np.int64)
    if t_train <= 0:
        return table, s0
    alpha = max(reg.alpha, ALPHA_FLOOR)
    q, mask, visits = table.q, model.mask, table.visits
    rewards = np.asarray(rewards, dtype=float)
    u = rng.random((t_train, 4))
    # python lists are faster than numpy for the tiny per-step rows
    allowed = [np.flatnonzero(mask[s]).tolist() for s in range(q.shape[0])]
    s = int(s0)
    for t in range(t_train):
        acts = allowed[s]
        row = [q[s, a] for a in acts]
        m = max(row)
        w = [math.exp((x - m) / alpha) for x in row]
        tot = sum(w)
        r = u[t, 0] * tot
        acc = 0.0
        a = acts[-1]
        for j, wj in enumerate(w):
            acc += wj
            if r < acc:
                a = acts[j]
                break
        s2 = model.sample_next(s, a, u[t, 1:])
        nxt = [q[s2, b] for b in allowed[s2]]
        m2 = max(nxt)
        v2 = m2 + alpha * math.log(sum(math.exp((x - m2) / alpha) for x in nxt))
        k = visits[s, a] + 1
        visits[s, a] = k
        q[s, a] += lr(k) * (rewards[s, a] + gamma * v2 - q[s, a])
        s = s2
    return table, s


def evaluate_policy(policy, model, rewards, reg: RegularizerSpec, gamma, s0=None):
    """Exact regularized value by solving (I - gamma P_pi) V = r_pi."""
    pi = np.asarray(policy, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(pi > 0, pi * np.log(np.where(pi > 0, pi, 1.0)), 0.0)
    r_pi = np.sum(pi * np.where(model.mask, rewards, 0.0), axis=1) - reg.alpha * plogp.sum(axis=1)
    if gamma == 0:
        V = r_pi
    else:
        P = model.policy_matrix(pi)
        V = np.linalg.solve(np.eye(P.shape[0]) - gamma * P, r_pi)
    return V if s0 is None else float(V[s0])


def estimate_gamma1_lipschitz(model, reward_builder, reg: RegularizerSpec, gamma, lambda_pairs,
                              tol=1e-10):
    """max over pairs of sup_s ||pi_1(.|s) - pi_2(.|s)||_1 / ||lambda_1 - lambda_2||_1.

    ``reward_builder(lmp_profile)`` returns the (S, A) reward table.
    """
    best = 0.0
    for lam1, lam2 in lambda_pairs:
        dist = float(np.abs(np.asarray(lam1) - np.asarray(lam2)).sum())
        if dist == 0:
            continue
        pis = []
        for lam in (lam1, lam2):
            t = soft_value_iteration(model, reward_builder(lam), reg, gamma, tol)
            pis.append(policy_from_q(t.q, model.mask, reg.alpha))
        ratio = float(np.abs(pis[0] - pis[1]).sum(axis=1).max()) / dist
        best = max(best, ratio)
    return best


def reward_lipschitz_bound(capacity, eta, max_abs_nd):
    """L_r with |r(.,lam) - r(.,lam')| <= L_r ||lam - lam'||_1."""
    return capacity * (1.0 / eta + max_abs_nd)


def gamma1_lipschitz_bound(capacity, eta, max_abs_nd, reg: RegularizerSpec, gamma):
    L_r = reward_lipschitz_bound(capacity, eta, max_abs_nd)
    return (L_r + gamma * L_r / (1 - gamma)) / reg.rho
