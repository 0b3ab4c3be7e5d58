"""Metrics over traces (volatility, costs, demand shapes, storage cycles) and
fixed-point diagnostics (Lipschitz estimates, contraction, MFE verification)."""
from __future__ import annotations

import csv
import io as _io
import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import efficiency_adjust, reward_table
from .meanfield import consistency_update, meanfield_to_demand
from .network import Infeasible, estimate_lmp_lipschitz, solve_ed
from .policy import estimate_gamma1_lipschitz, policy_from_q, soft_value_iteration

AGENT_CLASSES = ("prosumer", "consumer")


# ---------------------------------------------------------------------------
# volatility and costs


def imv(series):
    """Incremental mean volatility: mean absolute first difference of a price series."""
    x = np.asarray(series, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("IMV needs at least two prices")
    return float(np.abs(np.diff(x)).mean())


def window_days(trace, window):
    """Day indices selected by 'all', 'lastNd' or 'dayA-B' (inclusive)."""
    n_days = int(np.max(trace.steps["day"])) + 1
    if window in (None, "all"):
        return list(range(n_days))
    m = re.fullmatch(r"last(\d+)d", window)
    if m:
        k = int(m.group(1))
        if not 1 <= k <= n_days:
            raise ValueError(f"window {window} outside a {n_days}-day trace")
        return list(range(n_days - k, n_days))
    m = re.fullmatch(r"day(\d+)-(\d+)", window)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if not 0 <= lo <= hi < n_days:
            raise ValueError(f"window {window} outside a {n_days}-day trace")
        return list(range(lo, hi + 1))
    raise ValueError(f"unrecognized window {window!r}; use all, lastNd or dayA-B")


def _rows_in(trace, days):
    return np.isin(trace.steps["day"], days)


def trace_imv(trace, window="last3d"):
    """IMV of each bus's LMP series and of the hub price over a window."""
    days = window_days(trace, window)
    N = trace.meta["n_buses"]
    sel = _rows_in(trace, days)
    lmps = np.asarray(trace.steps["lmp"], dtype=float)[sel].reshape(-1, N)
    out = {f"bus{n}": imv(lmps[:, n]) for n in range(N)}
    out["bus_mean"] = float(np.mean([out[f"bus{n}"] for n in range(N)]))
    hub = np.asarray(trace.steps["hub_price"], dtype=float)[sel].reshape(-1, N)[:, 0]
    out["hub"] = imv(hub)
    return out


def daily_cost(trace, agent_class, day):
    """Ex-post cost of one agent class on one day, summed over buses."""
    if agent_class not in AGENT_CLASSES:
        raise ValueError(f"agent_class must be one of {AGENT_CLASSES}")
    sel = np.asarray(trace.steps["day"]) == day
    if not sel.any():
        raise ValueError(f"day {day} not in trace")
    return float(np.asarray(trace.steps[f"cost_{agent_class}"], dtype=float)[sel].sum())


def system_daily_cost(trace, day):
    """sum_n sum_t lmp * bid over one day."""
    sel = np.asarray(trace.steps["day"]) == day
    return float(np.sum(np.asarray(trace.steps["lmp"], float)[sel] * np.asarray(trace.steps["demand_bid"], float)[sel]))


def mean_daily_cost(trace, agent_class, window="last5d"):
    return float(np.mean([daily_cost(trace, agent_class, d) for d in window_days(trace, window)]))


# ---------------------------------------------------------------------------
# shapes and storage behaviour


def _per_hour(trace, column, days, reduce_buses="sum"):
    """(n_days, H) array of a column summed (or averaged) over buses."""
    H, N = trace.meta["H"], trace.meta["n_buses"]
    sel = _rows_in(trace, days)
    x = np.asarray(trace.steps[column], dtype=float)[sel].reshape(len(days), H, N)
    return x.sum(axis=2) if reduce_buses == "sum" else x.mean(axis=2)


def demand_shape_report(trace, window_days_=3):
    """Per-hour mean and std (across days) of each class's net demand as a capacity ratio."""
    n_days = int(np.max(trace.steps["day"])) + 1
    days = window_days(trace, f"last{min(window_days_, n_days)}d")
    cap_p = float(np.sum(trace.meta["bus_capacity"]))
    cap_c = float(np.sum(trace.meta["consumer_capacity"]))
    out = {"hours": list(range(trace.meta["H"])), "days": days}
    for cls, cap in (("prosumer", cap_p), ("consumer", cap_c)):
        x = _per_hour(trace, f"{cls}_demand", days) / (cap if cap > 0 else 1.0)
        out[cls] = {"mean": x.mean(axis=0), "std": x.std(axis=0)}
    return out


def evening_peak_ratio(trace, window="last10d", hours=None):
    """Largest mean prosumer net-demand ratio over the evening hours."""
    days = window_days(trace, window)
    hours = hours if hours is not None else trace.meta.get("evening_hours") or list(range(trace.meta["H"]))
    cap = float(np.sum(trace.meta["bus_capacity"]))
    x = _per_hour(trace, "prosumer_demand", days).mean(axis=0) / cap
    return float(np.max(x[list(hours)]))


def storage_cycle_report(trace, window="last3d", n_extreme=3):
    """How storage flow lines up with believed prices over a window.

    Returns the mean per-hour flow and belief, their correlation, mean flow
    in the n cheapest and n dearest believed hours, and the smallest
    correlation between a single day's level profile and the window mean.
    """
    days = window_days(trace, window)
    flow = _per_hour(trace, "storage_flow", days)
    belief = _per_hour(trace, "belief_h", days, reduce_buses="mean")
    level = _per_hour(trace, "storage_level", days, reduce_buses="mean")
    f, b, lv = flow.mean(axis=0), belief.mean(axis=0), level.mean(axis=0)
    order = np.argsort(b, kind="stable")
    cheap, dear = order[:n_extreme], order[-n_extreme:]
    if len(days) > 1 and lv.std() > 0:
        day_corr = min(float(np.corrcoef(level[i], lv)[0, 1]) if level[i].std() > 0 else 0.0
                       for i in range(len(days)))
    else:
        day_corr = 1.0
    return {
        "mean_flow": f, "mean_belief": b, "mean_level": lv,
        "flow_belief_corr": float(np.corrcoef(f, b)[0, 1]) if f.std() > 0 and b.std() > 0 else 0.0,
        "cheap_hours": cheap.tolist(), "dear_hours": dear.tolist(),
        "cheap_flow": float(f[cheap].mean()), "dear_flow": float(f[dear].mean()),
        "min_day_level_corr": day_corr,
    }


def compare_with_baseline(full, base):
    """Directional checks of a storage run against its no-storage twin (lists of traces, one per seed)."""
    imv_f = [trace_imv(t)["bus_mean"] for t in full]
    imv_b = [trace_imv(t)["bus_mean"] for t in base]
    cost = {c: (float(np.mean([mean_daily_cost(t, c) for t in full])),
                float(np.mean([mean_daily_cost(t, c) for t in base]))) for c in AGENT_CLASSES}
    cyc = [storage_cycle_report(t) for t in full]
    ev_f = float(np.mean([evening_peak_ratio(t) for t in full]))
    ev_b = float(np.mean([evening_peak_ratio(t) for t in base]))
    cycle_ok = [c["flow_belief_corr"] < 0 and c["cheap_flow"] > 0 > c["dear_flow"]
                and c["min_day_level_corr"] >= 0.9 for c in cyc]
    return {
        "imv": {"full": imv_f, "baseline": imv_b, "pass": all(f < b for f, b in zip(imv_f, imv_b))},
        "cost": {**{c: {"full": v[0], "baseline": v[1]} for c, v in cost.items()},
                 "pass": all(v[0] < v[1] for v in cost.values())},
        "cycle": {"per_seed": cyc, "pass": all(cycle_ok)},
        "evening": {"full": ev_f, "baseline": ev_b, "pass": ev_f < ev_b},
    }


def seed_summary(values):
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0, "n": int(v.size)}


# ---------------------------------------------------------------------------
# fixed-point diagnostics


@dataclass
class LipschitzEstimates:
    l1: float
    l2: float
    l3: float
    l_lambda: float
    l_mf: float
    contraction_value: float = field(init=False)

    def __post_init__(self):
        for k in ("l1", "l2", "l3", "l_lambda", "l_mf"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be nonnegative")
        self.contraction_value = self.l1 * self.l_mf * self.l3 + self.l2

    @property
    def contracts(self):
        return self.contraction_value < 1

    def as_dict(self):
        d = asdict(self)
        d["contraction_value"] = self.contraction_value
        d["contracts"] = self.contracts
        return d


def estimate_contraction(config, n_lambda_pairs=20, n_demand_pairs=200, spread=0.2, seed=0):
    """Assemble L1 L_MF L3 + L2 for a scenario.

    L2 = L3 = 1 - zeta. L_lambda is the largest sampled LMP ratio over the
    hours' expected networks with demands within +-spread of the passive
    demand; L1 compares soft-optimal policies for belief profiles perturbed
    around the initial (dispatch-based) beliefs.
    """
    from .simulator import initial_beliefs
    rng = np.random.default_rng(seed)
    l2 = l3 = 1.0 - config.zeta
    l_lam = 0.0
    for h in range(config.H):
        net = config.expected_network(h)
        base = config.expected_passive_demand(h)

        def sampler():
            return (base * (1 + spread * rng.uniform(-1, 1, base.shape)),
                    base * (1 + spread * rng.uniform(-1, 1, base.shape)))
        est, _ = estimate_lmp_lipschitz(net, sampler, max(1, n_demand_pairs // config.H))
        l_lam = max(l_lam, est)
    l_mf = l_lam * max(b.population.total_capacity for b in config.buses)
    l1 = 0.0
    if config.storage_enabled:
        beliefs = initial_beliefs(config)
        grids, models = config.grids(), config.models()
        for n, b in enumerate(config.buses):
            pop = b.population
            scale = max(1.0, float(np.abs(beliefs[n].values).mean()))
            pairs = [(beliefs[n].values + scale * spread * rng.uniform(-1, 1, config.H),
                      beliefs[n].values + scale * spread * rng.uniform(-1, 1, config.H))
                     for _ in range(n_lambda_pairs)]
            est = estimate_gamma1_lipschitz(models[n],
                                            lambda lam, g=grids[n], p=pop: reward_table(g, lam, p.total_capacity,
                                                                                       p.efficiency),
                                            config.reg, config.gamma, pairs)
            l1 = max(l1, est)
    return LipschitzEstimates(l1, l2, l3, l_lam, l_mf)


def geometric_fit(norms, floor=1e-13):
    """Least-squares fit of log(norm) on day index over the decaying segment.

    The segment starts at the first peak and stops before norms reach the
    numerical floor. Returns (ratio, r_squared, n_points).
    """
    x = np.asarray(norms, dtype=float)
    start = int(np.argmax(x))
    seg = x[start:]
    stop = np.flatnonzero(seg <= floor)
    seg = seg[: stop[0]] if stop.size else seg
    if seg.size < 3:
        return float("nan"), float("nan"), int(seg.size)
    t = np.arange(seg.size)
    y = np.log(seg)
    slope, icpt = np.polyfit(t, y, 1)
    resid = y - (slope * t + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(np.exp(slope)), r2, int(seg.size)


@dataclass
class MFEVerification:
    optimality: bool
    consistency: bool
    price: bool
    policy_gap: float
    meanfield_gap: float
    price_gap: float

    @property
    def passed(self):
        return self.optimality and self.consistency and self.price

    def failures(self):
        return [k for k in ("optimality", "consistency", "price") if not getattr(self, k)]


def verify_mfe(report, config, tol=1e-3, policy_tol=1e-6):
    """Check the three equilibrium conditions at a terminal fixed-point report.

    (i) each bus's policy equals the soft-optimal policy for the terminal
    beliefs (sup-norm <= policy_tol); (ii) running the consistency map over
    one more day under those policies returns the mean field to itself
    (l1 <= tol); (iii) the prices re-solved along that day equal the belief
    entries hour by hour (max abs <= tol).
    """
    grids, models = config.grids(), config.models()
    pops = [b.population for b in config.buses]
    beliefs = np.asarray(report.beliefs, dtype=float)
    gap_pi = 0.0
    pols = []
    for n, b in enumerate(config.buses):
        g = grids[n]
        if config.storage_enabled:
            rewards = reward_table(g, beliefs[n], pops[n].total_capacity, pops[n].efficiency)
            table = soft_value_iteration(models[n], rewards, config.reg, config.gamma, tol=1e-12)
            pi = policy_from_q(table.q, g.mask, config.alpha)
        else:
            pi = np.zeros((g.S, g.A))
            pi[:, g.zero_action] = 1.0
        pols.append(pi)
        gap_pi = max(gap_pi, float(np.abs(pi - np.asarray(report.policies[n])).max()))
    mfs = [np.array(m) for m in report.meanfields]
    start = [m.copy() for m in mfs]
    gap_price = 0.0
    for h in range(config.H):
        mfs = [consistency_update(mfs[n], pols[n], models[n], config.zeta, config.mf_variant)
               for n in range(config.n_buses)]
        ratio = [config.expected_consumer_ratio_sum(n, h) for n in range(config.n_buses)]
        D = meanfield_to_demand(mfs, grids, pops, ratio)
        try:
            lmps = solve_ed(config.expected_network(h), D).lmps
        except Infeasible:
            gap_price = float("inf")
            break
        gap_price = max(gap_price, float(np.abs(lmps - beliefs[:, h]).max()))
    gap_mf = float(sum(np.abs(m - s).sum() for m, s in zip(mfs, start)))
    return MFEVerification(gap_pi <= policy_tol, gap_mf <= tol, gap_price <= tol, gap_pi, gap_mf, gap_price)


def limit_bid_from_policy(meanfield, grids, pop):
    """Expected prosumer bid (MWh) of a bus under a state-action distribution."""
    phi = efficiency_adjust(grids.state_e[:, None], grids.actions[None, :], pop.efficiency)
    return pop.total_capacity * float(np.sum(meanfield * (phi + grids.state_nd[:, None])))


# ---------------------------------------------------------------------------
# emitters


def metric_rows(trace, metric, window="last3d"):
    """Plot/CSV-ready rows for one metric of one trace."""
    seed = trace.meta.get("seed")
    if metric == "imv":
        return [{"seed": seed, "window": window, "series": k, "imv": v} for k, v in trace_imv(trace, window).items()]
    if metric == "cost":
        return [{"seed": seed, "day": d, "class": c, "cost": daily_cost(trace, c, d)}
                for d in window_days(trace, window) for c in AGENT_CLASSES]
    if metric == "shape":
        n = len(window_days(trace, window))
        rep = demand_shape_report(trace, n)
        return [{"seed": seed, "hour": h, "class": c, "mean_ratio": float(rep[c]["mean"][h]),
                 "std_ratio": float(rep[c]["std"][h])} for c in AGENT_CLASSES for h in rep["hours"]]
    if metric == "storage":
        rep = storage_cycle_report(trace, window)
        return [{"seed": seed, "hour": h, "mean_flow": float(rep["mean_flow"][h]),
                 "mean_belief": float(rep["mean_belief"][h]), "mean_level": float(rep["mean_level"][h])}
                for h in range(len(rep["mean_flow"]))]
    raise ValueError(f"unknown metric {metric!r}; choose imv, cost, shape or storage")


def rows_to_csv(rows):
    if not rows:
        return ""
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def summary_json(metric, window, values_by_seed):
    """{metric: {window: {"seeds": [...], "values": [...], "mean": .., "std": ..}}}."""
    seeds = sorted(values_by_seed)
    vals = [values_by_seed[s] for s in seeds]
    return json.dumps({metric: {window: {"seeds": seeds, "values": vals, **seed_summary(vals)}}}, indent=2)
