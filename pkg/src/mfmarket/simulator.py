"""Two-phase market simulation (train, execute, clear, update beliefs) and the
limit-population fixed-point iteration."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .beliefs import BeliefVector, update_belief
from .env import Grids, PopulationSpec, ScenarioProfiles, Triangular, efficiency_adjust, reward_table, snap_index
from .meanfield import (aggregate_storage, build_transition_model, consistency_update, initial_meanfield,
                        meanfield_to_demand)
from .network import Infeasible, Network, solve_ed
from .policy import RegularizerSpec, SoftQTable, policy_from_q, soft_q_learning, soft_value_iteration

log = logging.getLogger(__name__)

_PURPOSE = {"train": 0, "prosumer": 1, "consumer": 2, "renewable": 3}


@dataclass
class BusConfig:
    population: PopulationSpec
    profiles: ScenarioProfiles
    delta: float = 0.7


@dataclass
class RenewableSpec:
    gen: int
    capacity: float
    cf_mean: np.ndarray
    noise: Triangular = field(default_factory=Triangular)

    def __post_init__(self):
        self.cf_mean = np.asarray(self.cf_mean, dtype=float)


@dataclass
class SimulationConfig:
    network: Network
    buses: list
    renewables: list = field(default_factory=list)
    H: int = 12
    n_days: int = 20
    alpha: float = 0.1
    gamma: float = 0.95
    zeta: float = 0.05
    t_train: int = 1200
    n_storage: int = 21
    n_actions: int = 9
    n_nd: int = 5
    seeds: list = field(default_factory=lambda: [0])
    mode: str = "finite"              # or "limit"
    storage_enabled: bool = True
    initial_storage: float = 0.5
    belief_init: object = "ed"        # "ed" or a flat price
    reset_q: bool = False
    lr_c: float = 0.5
    mf_variant: str = "printed"
    evening_hours: list = field(default_factory=list)
    name: str = "scenario"

    def __post_init__(self):
        self._grids = None

    @property
    def n_buses(self):
        return self.network.n_buses

    def grids(self):
        if getattr(self, "_grids", None) is None:
            self._grids = [Grids.build(b.profiles.prosumer_nd_mean, b.profiles.noise,
                                       self.n_storage, self.n_actions, self.n_nd) for b in self.buses]
        return self._grids

    def models(self):
        return [build_transition_model(g, self.zeta) for g in self.grids()]

    @property
    def reg(self):
        return RegularizerSpec(self.alpha)

    def validate(self):
        errs = []
        if self.n_days < 1:
            errs.append("n_days must be >= 1")
        if self.t_train < 0:
            errs.append("t_train must be >= 0")
        if self.H < 1:
            errs.append("H must be >= 1")
        if len(self.buses) != self.network.n_buses:
            errs.append(f"{len(self.buses)} bus configs for {self.network.n_buses} buses")
        if self.mode not in ("finite", "limit"):
            errs.append(f"mode must be 'finite' or 'limit', got {self.mode!r}")
        if not 0 <= self.zeta <= 1:
            errs.append("zeta must lie in [0, 1]")
        if not 0 <= self.gamma < 1:
            errs.append("gamma must lie in [0, 1)")
        for n, b in enumerate(self.buses):
            errs += [f"bus {n}: {e}" for e in b.population.validate()]
            if b.profiles.H != self.H or len(b.profiles.consumer_nd_mean) != self.H:
                errs.append(f"bus {n}: profiles must have length H={self.H}")
        for r in self.renewables:
            if not 0 <= r.gen < self.network.n_gens:
                errs.append(f"renewable refers to unknown generator {r.gen}")
            if len(r.cf_mean) != self.H:
                errs.append(f"renewable {r.gen}: cf_mean must have length H={self.H}")
        return errs

    # expected quantities -------------------------------------------------
    def expected_consumer_ratio_sum(self, n, hour):
        b = self.buses[n]
        return b.population.m_consumers * b.profiles.consumer_nd_mean[hour] * b.profiles.consumer_noise.mean

    def expected_network(self, hour):
        caps = {r.gen: r.capacity * r.cf_mean[hour] * r.noise.mean for r in self.renewables}
        return self.network.with_capacities(caps)

    def expected_passive_demand(self, hour):
        """Bus demand with storage idle and every net load at its mean."""
        D = np.zeros(self.n_buses)
        for n, b in enumerate(self.buses):
            pop, pr = b.population, b.profiles
            D[n] = (pop.total_capacity * pr.prosumer_nd_mean[hour] * pr.noise.mean
                    + pop.consumer_ref_capacity * self.expected_consumer_ratio_sum(n, hour))
        return D


def rng_for(seed, t, bus, purpose):
    """Independent stream keyed by (seed, step, bus, purpose)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(t), int(bus), _PURPOSE[purpose])))


def initial_beliefs(config: SimulationConfig):
    if config.belief_init == "ed":
        vals = np.zeros((config.n_buses, config.H))
        for h in range(config.H):
            vals[:, h] = solve_ed(config.expected_network(h), config.expected_passive_demand(h)).lmps
    else:
        vals = np.full((config.n_buses, config.H), float(config.belief_init))
    return [BeliefVector(vals[n], config.buses[n].delta, allow_any_delta=True) for n in range(config.n_buses)]


@dataclass
class SimulationTrace:
    """Append-only per-step records. ``steps`` has one row per (t, bus)."""
    steps: dict
    market: dict
    meta: dict
    agents: dict | None = None

    STEP_COLUMNS = ("t", "day", "hour", "bus", "lmp", "hub_price", "demand_bid", "belief_h",
                    "storage_level", "cost_prosumer", "cost_consumer", "prosumer_demand",
                    "consumer_demand", "storage_flow", "mean_action")

    @classmethod
    def empty(cls, meta, log_agents=False):
        return cls({c: [] for c in cls.STEP_COLUMNS}, {}, meta,
                   {"t": [], "bus": [], "agent": [], "kind": [], "demand": [], "storage": [], "action": []}
                   if log_agents else None)

    def finalize(self):
        self.steps = {k: np.asarray(v) for k, v in self.steps.items()}
        self.market = {k: np.asarray(v) for k, v in self.market.items()}
        if self.agents is not None:
            self.agents = {k: np.concatenate(v) if v and isinstance(v[0], np.ndarray) else np.asarray(v)
                           for k, v in self.agents.items()}
        return self

    @property
    def n_steps(self):
        return int(np.max(self.steps["t"])) + 1 if len(self.steps["t"]) else 0

    def column(self, name, bus=None):
        """(T, N) array of a per-bus column, or (T,) for one bus."""
        N = self.meta["n_buses"]
        arr = np.asarray(self.steps[name], dtype=float).reshape(-1, N)
        return arr if bus is None else arr[:, bus]


class SimulationAborted(RuntimeError):
    def __init__(self, message, t, trace):
        super().__init__(message)
        self.t = t
        self.trace = trace


@dataclass
class SimState:
    levels: list          # per bus: storage-grid index of each prosumer
    capacities: list      # per bus: MWh of each prosumer
    tables: list          # per bus: SoftQTable
    beliefs: list
    traj: list            # per bus: current training state
    meanfields: list | None = None


def init_state(config: SimulationConfig):
    grids = config.grids()
    levels, caps, tables, traj = [], [], [], []
    for n, b in enumerate(config.buses):
        g = grids[n]
        c = b.population.prosumer_capacities()
        caps.append(c)
        levels.append(np.full(len(c), int(snap_index(config.initial_storage, g.storage))))
        tables.append(SoftQTable(np.zeros((g.S, g.A)), g.mask, config.gamma))
        traj.append(None)
    mfs = None
    if config.mode == "limit":
        mfs = [initial_meanfield(g, config.initial_storage, hour=config.H - 1) for g in grids]
    return SimState(levels, caps, tables, initial_beliefs(config), traj, mfs)


def _bus_storage_fraction(state, n, grids):
    return aggregate_storage(grids[n].storage[state.levels[n]], state.capacities[n])


def run_training_phase(config: SimulationConfig, state: SimState, t: int, seed: int):
    """One policy per bus, trained against that bus's current belief."""
    grids, models = config.grids(), config._models
    policies = []
    for n, b in enumerate(config.buses):
        g, model = grids[n], models[n]
        if not config.storage_enabled:
            pi = np.zeros((g.S, g.A))
            pi[:, g.zero_action] = 1.0
            policies.append(pi)
            continue
        rewards = reward_table(g, state.beliefs[n].values, b.population.total_capacity, b.population.efficiency)
        if config.mode == "limit":
            table = soft_value_iteration(model, rewards, config.reg, config.gamma, tol=1e-8,
                                         q0=state.tables[n].q)
            state.tables[n] = table
        else:
            rng = rng_for(seed, t, n, "train")
            if config.reset_q:
                state.tables[n] = SoftQTable(np.zeros((g.S, g.A)), g.mask, config.gamma)
            h = t % config.H
            e_idx = int(snap_index(_bus_storage_fraction(state, n, grids), g.storage))
            k = int(np.searchsorted(np.cumsum(g.nd_probs[h]), rng.random(), side="right"))
            s0 = int(g.index(h, min(k, g.K - 1), e_idx))
            c = config.lr_c
            table, _ = soft_q_learning(model, rewards, config.reg, config.gamma, config.t_train, rng,
                                       table=state.tables[n], s0=s0, lr=lambda kk: c / (kk ** 0.6 + 1.0))
            state.tables[n] = table
        policies.append(policy_from_q(state.tables[n].q, g.mask, config.alpha))
    return policies


def _sample_actions(probs, u):
    cum = np.cumsum(probs, axis=1)
    target = u * cum[:, -1]
    return np.argmax(cum > target[:, None], axis=1)


def run_execution_phase(config: SimulationConfig, state: SimState, policies, t: int, seed: int,
                        agent_log=None):
    """Sample net loads and actions for every household; returns bus demand and per-bus details.

    Storage levels in ``state`` advance to t+1 (regeneration, then clipped transition).
    """
    grids = config.grids()
    h = t % config.H
    N = config.n_buses
    D = np.zeros(N)
    info = {k: np.zeros(N) for k in ("prosumer_demand", "consumer_demand", "storage_flow",
                                      "mean_action", "storage_level")}
    for n, b in enumerate(config.buses):
        g, pop, pr = grids[n], b.population, b.profiles
        caps, lv = state.capacities[n], state.levels[n]
        info["storage_level"][n] = _bus_storage_fraction(state, n, grids)
        M = len(caps)
        rng = rng_for(seed, t, n, "prosumer")
        u = rng.random((M, 4))
        nd_raw = pr.prosumer_nd_mean[h] * pr.noise.ppf(u[:, 0])
        k = snap_index(nd_raw, g.nd_values[h])
        nd = g.nd_values[h, k]
        s = g.index(h, k, lv)
        a_idx = _sample_actions(policies[n][s], u[:, 1]) if M else np.zeros(0, int)
        e = g.storage[lv]
        a = g.actions[a_idx]
        phi = efficiency_adjust(e, a, pop.efficiency)
        d_pro = (phi + nd) * caps
        regen = u[:, 2] < config.zeta
        new = np.where(regen, np.minimum((u[:, 3] * g.E).astype(int), g.E - 1), g.next_e[lv, a_idx])
        state.levels[n] = new
        rng_c = rng_for(seed, t, n, "consumer")
        nd_c = pr.consumer_nd_mean[h] * pr.consumer_noise.ppf(rng_c.random(pop.m_consumers))
        d_con = nd_c * pop.consumer_ref_capacity
        info["prosumer_demand"][n] = d_pro.sum()
        info["consumer_demand"][n] = d_con.sum()
        info["storage_flow"][n] = float(np.dot(phi, caps))
        info["mean_action"][n] = float(np.dot(a, caps) / caps.sum()) if caps.sum() > 0 else 0.0
        D[n] = info["prosumer_demand"][n] + info["consumer_demand"][n]
        if agent_log is not None:
            for kind, dem, sto, act in (("p", d_pro, e, a), ("c", d_con, np.full(len(d_con), np.nan),
                                                            np.full(len(d_con), np.nan))):
                agent_log["t"].append(np.full(len(dem), t))
                agent_log["bus"].append(np.full(len(dem), n))
                agent_log["agent"].append(np.arange(len(dem)))
                agent_log["kind"].append(np.full(len(dem), kind))
                agent_log["demand"].append(dem)
                agent_log["storage"].append(sto)
                agent_log["action"].append(act)
    return D, info


def _limit_execution(config, state, policies, t):
    grids = config.grids()
    h = t % config.H
    N = config.n_buses
    info = {k: np.zeros(N) for k in ("prosumer_demand", "consumer_demand", "storage_flow",
                                      "mean_action", "storage_level")}
    for n, b in enumerate(config.buses):
        g, pop = grids[n], b.population
        state.meanfields[n] = consistency_update(state.meanfields[n], policies[n], config._models[n],
                                                 config.zeta, config.mf_variant)
        mf = state.meanfields[n]
        phi = efficiency_adjust(g.state_e[:, None], g.actions[None, :], pop.efficiency)
        info["storage_level"][n] = float(np.sum(mf.sum(axis=1) * g.state_e))
        info["storage_flow"][n] = pop.total_capacity * float(np.sum(mf * phi))
        info["mean_action"][n] = float(np.sum(mf * g.actions[None, :]))
        info["consumer_demand"][n] = pop.consumer_ref_capacity * config.expected_consumer_ratio_sum(n, h)
    ratio_sums = [config.expected_consumer_ratio_sum(n, h) for n in range(N)]
    D = meanfield_to_demand(state.meanfields, grids, [b.population for b in config.buses], ratio_sums)
    info["prosumer_demand"] = D - info["consumer_demand"]
    return D, info


def _network_at(config, t, seed, expected=False):
    h = t % config.H
    if expected or not config.renewables:
        return config.expected_network(h)
    rng = rng_for(seed, t, config.n_buses, "renewable")
    u = rng.random(len(config.renewables))
    caps = {r.gen: r.capacity * r.cf_mean[h] * float(r.noise.ppf(u[j])) for j, r in enumerate(config.renewables)}
    return config.network.with_capacities(caps)


def _meta(config, seed):
    from .io import config_hash, config_to_dict
    grids = config.grids()
    return {
        "seed": int(seed),
        "config_hash": config_hash(config),
        "scenario": config.name,
        "mode": config.mode,
        "storage_enabled": bool(config.storage_enabled),
        "n_buses": config.n_buses,
        "H": config.H,
        "n_days": config.n_days,
        "bus_capacity": [b.population.total_capacity for b in config.buses],
        "consumer_capacity": [b.population.m_consumers * b.population.consumer_ref_capacity for b in config.buses],
        "prosumer_nd_mean": [list(map(float, b.profiles.prosumer_nd_mean)) for b in config.buses],
        "evening_hours": list(config.evening_hours),
        "config": config_to_dict(config),
        "n_states": grids[0].S,
    }


def run_simulation(config: SimulationConfig, seed=None, log_agents=False) -> SimulationTrace:
    """Algorithm loop over n_days * H steps for one seed."""
    errs = config.validate()
    if errs:
        raise ValueError("; ".join(errs))
    seed = config.seeds[0] if seed is None else seed
    config._models = config.models()
    trace = SimulationTrace.empty(_meta(config, seed), log_agents)
    try:
        state = init_state(config)
    except Infeasible as exc:
        trace.meta["aborted_at"] = 0
        raise SimulationAborted(f"belief initialization dispatch infeasible: {exc}", 0, trace.finalize()) from exc
    T = config.n_days * config.H
    limit = config.mode == "limit"
    for t in range(T):
        h = t % config.H
        policies = run_training_phase(config, state, t, seed)
        if limit:
            D, info = _limit_execution(config, state, policies, t)
        else:
            D, info = run_execution_phase(config, state, policies, t, seed, trace.agents)
        net = _network_at(config, t, seed, expected=limit)
        try:
            sol = solve_ed(net, D)
        except Infeasible as exc:
            trace.meta["aborted_at"] = t
            trace.meta["abort_reason"] = str(exc)
            raise SimulationAborted(f"dispatch infeasible at t={t}: {exc}", t, trace.finalize()) from exc
        rec = sol.as_record()
        trace.market.setdefault("t", []).append(t)
        for key, val in rec.items():
            trace.market.setdefault(key, []).append(val)
        for n in range(config.n_buses):
            lam = float(sol.lmps[n])
            row = dict(t=t, day=t // config.H, hour=h, bus=n, lmp=lam, hub_price=sol.hub_price,
                       demand_bid=float(D[n]), belief_h=float(state.beliefs[n].values[h]),
                       storage_level=info["storage_level"][n],
                       cost_prosumer=lam * info["prosumer_demand"][n],
                       cost_consumer=lam * info["consumer_demand"][n],
                       prosumer_demand=info["prosumer_demand"][n], consumer_demand=info["consumer_demand"][n],
                       storage_flow=info["storage_flow"][n], mean_action=info["mean_action"][n])
            for key in SimulationTrace.STEP_COLUMNS:
                trace.steps[key].append(row[key])
            state.beliefs[n] = update_belief(state.beliefs[n], t, lam)
    trace.meta["final_beliefs"] = [list(map(float, b.values)) for b in state.beliefs]
    return trace.finalize()


# ---------------------------------------------------------------------------
# limit-population fixed point


class MaxDaysExceeded(RuntimeError):
    def __init__(self, message, norms, report=None):
        super().__init__(message)
        self.norms = norms
        self.report = report


@dataclass
class MFEReport:
    beliefs: np.ndarray            # (N, H) terminal price profile
    policies: list                 # per bus policy used on the last day
    meanfields: list               # per bus mean field at the end of the last day
    norms: list                    # day-over-day l1 distance of the realized profile
    converged: bool
    days: int
    initial_beliefs: np.ndarray


def _one_day(config, beliefs, meanfields, q_tables, models):
    """Step 1 (optimality) then H applications of step 2 (consistency + dispatch)."""
    grids = config.grids()
    pols = []
    for n, b in enumerate(config.buses):
        g = grids[n]
        pop = b.population
        rewards = reward_table(g, beliefs[n], pop.total_capacity, pop.efficiency)
        if config.storage_enabled:
            table = soft_value_iteration(models[n], rewards, config.reg, config.gamma, tol=1e-10,
                                         q0=q_tables[n])
            q_tables[n] = table.q
            pols.append(policy_from_q(table.q, g.mask, config.alpha))
        else:
            pi = np.zeros((g.S, g.A))
            pi[:, g.zero_action] = 1.0
            pols.append(pi)
    realized = np.zeros((config.n_buses, config.H))
    pops = [b.population for b in config.buses]
    for h in range(config.H):
        meanfields = [consistency_update(meanfields[n], pols[n], models[n], config.zeta, config.mf_variant)
                      for n in range(config.n_buses)]
        ratio_sums = [config.expected_consumer_ratio_sum(n, h) for n in range(config.n_buses)]
        D = meanfield_to_demand(meanfields, grids, pops, ratio_sums)
        realized[:, h] = solve_ed(config.expected_network(h), D).lmps
    return realized, pols, meanfields


def run_mfe_iteration(config: SimulationConfig, tol=1e-8, max_days=200, initial_beliefs_override=None,
                      raise_on_max=True):
    """Iterate whole days: policies from the belief, mean field and prices from
    the policies, belief replaced by the realized profile. Converged when the
    l1 change of the profile is <= tol."""
    models = config.models()
    grids = config.grids()
    if initial_beliefs_override is not None:
        beliefs = np.array(initial_beliefs_override, dtype=float).reshape(config.n_buses, config.H)
    else:
        beliefs = np.array([b.values for b in initial_beliefs(config)])
    start = beliefs.copy()
    mfs = [initial_meanfield(g, config.initial_storage, hour=config.H - 1) for g in grids]
    qs = [None] * config.n_buses
    norms = []
    pols = None
    for day in range(max_days):
        realized, pols, mfs = _one_day(config, beliefs, mfs, qs, models)
        norms.append(float(np.abs(realized - beliefs).sum()))
        beliefs = realized
        if norms[-1] <= tol:
            return MFEReport(beliefs, pols, mfs, norms, True, day + 1, start)
    report = MFEReport(beliefs, pols, mfs, norms, False, max_days, start)
    if raise_on_max:
        raise MaxDaysExceeded(f"no convergence within {max_days} days (last norm {norms[-1]:.3g})", norms, report)
    return report
