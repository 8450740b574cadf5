"""Closed-loop simulation: topology, scenario configs, slot loop and sweeps.

Per slot every source runs the recruitment handshake, looks up its
scheduling action for ``(traffic state, rate bin)``, the AP scales the
requested airtimes to fit the slot, packets are lost at the bound-derived
packet error rate and each traffic state advances.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .cooperation import CoopConfig, coop_energy, run_recruitment
from .mdp import action_values, build_traffic_chain, estimate_rate_pmf
from .phy import PhyConfig, Topology, bits_per_symbol, draw_channel_matrix, packet_error_probability
from .pricing import UserModel, harmonic_schedule, normalize_allocations, price_iteration
from .traffic import (
    FlowCounts,
    GopSpec,
    advance,
    ibpb_gop,
    initial_state,
    state_key,
    truncate_action,
    utility,
)

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "SourceSpec",
    "SweepSpec",
    "SimConfig",
    "UserStats",
    "SimStats",
    "EpisodeResult",
    "place_nodes",
    "build_topology",
    "source_position",
    "plan_users",
    "run_episode",
    "sweep_distance",
    "SWEEP_COLUMNS",
    "TRACE_COLUMNS",
]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent simulation configuration."""


@dataclass
class SourceSpec:
    """A video source: polar position and how its GOP differs from the base GOP."""

    distance: float
    angle_deg: float = 0.0
    packets_per_frame: int | list | None = None
    quality_scale: float = 1.0


@dataclass
class SweepSpec:
    distances: list = field(default_factory=lambda: [10.0 * k for k in range(1, 11)])
    xi_values: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    n_slots: int = 10_000


def _three_sources():
    # the 20/45/80 m layout used for the multi-user scenarios
    return [SourceSpec(20.0, 25.0), SourceSpec(45.0, -30.0), SourceSpec(80.0, 0.0)]


@dataclass
class SimConfig:
    """Everything a run or sweep needs; round-trips through JSON."""

    seed: int = 42
    n_relays: int = 50
    coverage_radius: float = 100.0
    path_loss_exponent: float = 3.0
    sources: list = field(default_factory=_three_sources)
    phy: PhyConfig = field(default_factory=PhyConfig)
    coop: CoopConfig = field(default_factory=CoopConfig)
    gop: GopSpec = field(default_factory=ibpb_gop)
    alpha: float = 0.9
    price_step: float = 5.0
    price_tol: float = 1e-3
    price_max_iter: int = 200
    n_slots: int = 1000
    cooperation: bool = True
    pmf_samples: int = 2000
    replan: bool = False
    overhead_fraction: float = 0.0
    sweep: SweepSpec = field(default_factory=SweepSpec)
    experiment: str = "run"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.n_slots < 1:
            raise ConfigError("n_slots must be >= 1")
        if self.n_relays < 0:
            raise ConfigError("n_relays must be >= 0")
        if self.coverage_radius <= 0 or self.path_loss_exponent <= 0:
            raise ConfigError("coverage_radius and path_loss_exponent must be positive")
        if not 0 <= self.alpha < 1:
            raise ConfigError("alpha must lie in [0, 1)")
        if self.price_step <= 0 or self.price_tol <= 0 or self.price_max_iter < 1:
            raise ConfigError("price schedule parameters must be positive")
        if self.pmf_samples < 1:
            raise ConfigError("pmf_samples must be >= 1")
        if not 0 <= self.overhead_fraction < 1:
            raise ConfigError("overhead_fraction must lie in [0, 1)")
        if self.experiment not in ("run", "sweep"):
            raise ConfigError("experiment must be 'run' or 'sweep'")
        if not self.sources:
            raise ConfigError("need at least one source")
        for s in self.sources:
            if not 0 < s.distance <= self.coverage_radius:
                raise ConfigError(f"source distance {s.distance} outside (0, coverage_radius]")
            if s.quality_scale < 0:
                raise ConfigError("quality_scale must be non-negative")
        if not self.sweep.distances or not self.sweep.xi_values or self.sweep.n_slots < 1:
            raise ConfigError("sweep needs distances, xi values and n_slots >= 1")
        for d in self.sweep.distances:
            if not 0 < d <= self.coverage_radius:
                raise ConfigError(f"sweep distance {d} outside (0, coverage_radius]")
        try:
            self.coop.phase_beps(self.phy)
            for xi in self.sweep.xi_values:
                CoopConfig(self.coop.stbc_length, self.coop.stbc_rate, xi)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def user_gop(self, k: int) -> GopSpec:
        s = self.sources[k]
        g = self.gop
        packets = s.packets_per_frame
        if isinstance(packets, int):
            packets = (packets,) * g.frames_per_gop
        quality = tuple(q * s.quality_scale for q in g.quality_increment)
        return g.scaled(packets=packets, quality=quality)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["sources"] = [asdict(s) for s in self.sources]
        d["phy"] = asdict(self.phy)
        d["coop"] = asdict(self.coop)
        d["gop"] = self.gop.to_dict()
        d["sweep"] = asdict(self.sweep)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "sources" in d:
                d["sources"] = [SourceSpec(**s) for s in d["sources"]]
            if "phy" in d:
                d["phy"] = PhyConfig(**d["phy"])
            if "coop" in d:
                d["coop"] = CoopConfig(**d["coop"])
            if "gop" in d:
                d["gop"] = GopSpec.from_dict(d["gop"])
            if "sweep" in d:
                d["sweep"] = SweepSpec(**d["sweep"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path) -> SimConfig:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)


def place_nodes(n, radius, rng, path_loss_exponent=3.0) -> Topology:
    """``n`` nodes uniform over the disk of ``radius`` around the AP."""
    if n < 1:
        raise ValueError("n must be >= 1")
    r = radius * np.sqrt(rng.random(n))
    th = 2 * np.pi * rng.random(n)
    return Topology(np.column_stack([r * np.cos(th), r * np.sin(th)]), path_loss_exponent, radius)


def source_position(distance, angle_deg=0.0) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([distance * math.cos(a), distance * math.sin(a)])


def build_topology(cfg: SimConfig, rng) -> Topology:
    """Sources first (ids 1..S), then the candidate relays."""
    src = np.array([source_position(s.distance, s.angle_deg) for s in cfg.sources])
    if cfg.n_relays:
        relays = place_nodes(cfg.n_relays, cfg.coverage_radius, rng, cfg.path_loss_exponent).positions
        src = np.vstack([src, relays])
    return Topology(src, cfg.path_loss_exponent, cfg.coverage_radius)


@dataclass
class UserStats:
    slots: int = 0
    rate_sum: float = 0.0
    coop_slots: int = 0
    relay_sum: int = 0
    packets_sent: int = 0
    utility_scheduled: float = 0.0
    utility_delivered: float = 0.0
    energy_source: float = 0.0
    energy_relays: float = 0.0
    flow: FlowCounts = field(default_factory=FlowCounts)
    buffered_end: int = 0

    @property
    def mean_rate(self) -> float:
        """Mean effective spectral efficiency (bits/symbol)."""
        return self.rate_sum / self.slots if self.slots else 0.0

    @property
    def coop_probability(self) -> float:
        return self.coop_slots / self.slots if self.slots else 0.0

    @property
    def mean_relays(self) -> float:
        return self.relay_sum / self.coop_slots if self.coop_slots else 0.0

    @property
    def energy_total(self) -> float:
        return self.energy_source + self.energy_relays

    @property
    def energy_per_packet(self) -> float:
        return self.energy_total / self.packets_sent if self.packets_sent else 0.0

    @property
    def throughput_to_energy(self) -> float:
        """Delivered packets per unit of network energy."""
        return self.flow.delivered / self.energy_total if self.energy_total > 0 else 0.0

    def summary(self) -> dict:
        return {
            "mean_rate": self.mean_rate,
            "coop_probability": self.coop_probability,
            "mean_relays": self.mean_relays,
            "packets_sent": self.packets_sent,
            "energy_source": self.energy_source,
            "energy_relays": self.energy_relays,
            "energy_total": self.energy_total,
            "energy_per_packet": self.energy_per_packet,
            "throughput_to_energy": self.throughput_to_energy,
            "utility_delivered": self.utility_delivered,
            "admitted": self.flow.admitted,
            "delivered": self.flow.delivered,
            "expired": self.flow.expired,
            "dropped": self.flow.dropped,
            "frames_lost": self.flow.frames_lost,
            "buffered_end": self.buffered_end,
        }


@dataclass
class SimStats:
    users: list
    price: float
    price_converged: bool
    price_history: list
    mean_requested: float
    mean_granted: float
    violation_frequency: float
    max_granted: float
    relay_activation: dict
    slots: int

    def summary(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "slots": self.slots,
            "price": self.price,
            "price_converged": self.price_converged,
            "price_history": [list(h) for h in self.price_history],
            "mean_requested_airtime": self.mean_requested,
            "mean_granted_airtime": self.mean_granted,
            "violation_frequency": self.violation_frequency,
            "max_granted_airtime": self.max_granted,
            "relay_activation": {str(k): v for k, v in sorted(self.relay_activation.items())},
            "users": [u.summary() for u in self.users],
        }


TRACE_COLUMNS = ("slot", "user", "bits_per_symbol", "decision", "n_relays", "scheduled",
                 "delivered", "x_requested", "x_granted", "energy_source", "energy_relays",
                 "utility")


@dataclass
class EpisodeResult:
    stats: SimStats
    trace: list
    protocol_log: list = field(default_factory=list)


@dataclass
class UserPlan:
    gop: GopSpec
    model: UserModel


def plan_users(cfg: SimConfig, topology: Topology, rng: np.random.Generator):
    """Offline stage: rate pmfs, traffic chains and the uniform price."""
    phy = cfg.phy
    cap = phy.packet_budget(phy.rate_grid[-1])
    chains = {}
    plans = []
    ids = list(range(1, topology.n_nodes + 1))
    for k in range(len(cfg.sources)):
        gop = cfg.user_gop(k)
        if gop not in chains:
            chains[gop] = build_traffic_chain(gop, cap)
        pmf = estimate_rate_pmf(k + 1, topology, phy, cfg.coop, cfg.pmf_samples, rng.spawn(1)[0],
                                cooperate=cfg.cooperation, candidates=ids)
        plans.append(UserPlan(gop, UserModel(chains[gop], pmf, f"user{k + 1}")))
    price = price_iteration([p.model for p in plans], cfg.alpha, R=phy.slot_seconds,
                            P=phy.packet_bits, schedule=harmonic_schedule(cfg.price_step),
                            tol=cfg.price_tol, max_iter=cfg.price_max_iter)
    return plans, price


def _direct_outcome(source, H, phy, coop):
    from .cooperation import CoopOutcome

    Gamma = coop.snr_coefficients(phy)[0]
    g0 = float(abs(H[source, 0]) ** 2)
    b0 = bits_per_symbol(g0, Gamma, phy.max_bits_per_symbol)
    return CoopOutcome(source, 0, (), b0 * phy.symbol_rate, 0.0, 0.0, None, None, [], g0)


def run_episode(cfg: SimConfig, n_slots=None, log_protocol=False, plan=None) -> EpisodeResult:
    """Simulate ``n_slots`` slots of the multi-user uplink."""
    from .cooperation import format_trace

    n_slots = cfg.n_slots if n_slots is None else n_slots
    if n_slots < 1:
        raise ConfigError("n_slots must be >= 1")
    phy, coop = cfg.phy, cfg.coop
    R, P = phy.slot_seconds, phy.packet_bits
    topo_rng, plan_rng, ch_rng, r_rng, err_rng = np.random.default_rng(cfg.seed).spawn(5)
    topology = build_topology(cfg, topo_rng)
    if plan is None:
        plan = plan_users(cfg, topology, plan_rng)
    plans, price = plan
    M = len(plans)
    ids = list(range(1, topology.n_nodes + 1))
    states = [initial_state(p.gop, 0) for p in plans]
    stats = [UserStats() for _ in plans]
    for s, st in zip(stats, states):
        s.flow.admitted += st.total_packets
    activation = {}
    trace, log = [], []
    req_sum = grant_sum = 0.0
    violations = 0
    max_grant = 0.0
    usable = 1.0 - cfg.overhead_fraction

    for t in range(n_slots):
        H = draw_channel_matrix(topology, ch_rng)
        outcomes, actions, requested = [], [], []
        for i, p in enumerate(plans):
            src = i + 1
            if cfg.cooperation:
                out = run_recruitment(src, H, phy, coop, r_rng, price=price.price, candidates=ids)
            else:
                out = _direct_outcome(src, H, phy, coop)
            if log_protocol and cfg.cooperation:
                log.extend(format_trace(out, t))
            rate = out.effective_rate
            rbin = min(int(math.floor(rate * phy.symbol_period + 1e-9)), len(p.model.rate_pmf) - 1)
            chain = p.model.chain
            pol = price.policies[i]
            key = state_key(states[i], t, p.gop)
            a = pol.action(key, rbin)
            n = sum(a)
            x = P * n / (R * rate) if n else 0.0
            outcomes.append((out, rate, rbin, chain.index(key)))
            actions.append(a)
            requested.append(x)
        req = np.array(requested)
        req_sum += req.sum()
        if req.sum() > usable + 1e-12:
            violations += 1
        granted = normalize_allocations(req / usable) * usable
        max_grant = max(max_grant, float(granted.sum()))
        grant_sum += granted.sum()

        for i, p in enumerate(plans):
            out, rate, rbin, sidx = outcomes[i]
            a = actions[i]
            st = states[i]
            if granted[i] < requested[i]:
                budget = int(math.floor(R * rate * granted[i] / P + 1e-9))
                if cfg.replan:
                    rows, q = action_values(price.value_functions[i], sidx, rbin, M, R=R, P=P)
                    q = np.where(p.model.chain.packets[rows] <= budget, q, -np.inf)
                    a = p.model.chain.actions[rows[int(np.argmax(q))]]
                else:
                    a = truncate_action(st, a, budget, p.gop)
            n = sum(a)
            us = stats[i]
            us.slots += 1
            us.rate_sum += rate * phy.symbol_period
            if out.decision:
                us.coop_slots += 1
                us.relay_sum += out.n_relays
            e_src = e_rly = 0.0
            delivered = (0,) * len(a)
            if n:
                if out.decision:
                    rep = coop_energy(phy, out.rate_coop, out.rate_phase2, coop.stbc_rate,
                                      out.n_relays, n)
                    e_src, e_rly = rep.source, rep.total - rep.source
                    for rid in out.relay_ids:
                        activation[rid] = activation.get(rid, 0) + 1
                else:
                    e_src = n * P * phy.symbol_power / rate
                per = packet_error_probability(out.bit_error_bound(phy), P)
                delivered = tuple(int(err_rng.binomial(y, 1.0 - per)) if y else 0 for y in a)
            us.packets_sent += n
            us.energy_source += e_src
            us.energy_relays += e_rly
            us.utility_scheduled += utility(st, a, p.gop)
            u_del = utility(st, delivered, p.gop)
            us.utility_delivered += u_del
            x_final = P * n / (R * rate) if n else 0.0
            trace.append((t, i + 1, rate * phy.symbol_period, out.decision, out.n_relays, n,
                          sum(delivered), requested[i], x_final, e_src, e_rly, u_del))
            states[i] = advance(st, delivered, t, p.gop, us.flow)

    for us, st in zip(stats, states):
        us.buffered_end = st.total_packets
    sim = SimStats(
        users=stats,
        price=price.price,
        price_converged=price.converged,
        price_history=price.history,
        mean_requested=req_sum / n_slots,
        mean_granted=grant_sum / n_slots,
        violation_frequency=violations / n_slots,
        max_granted=max_grant,
        relay_activation={k: v / n_slots for k, v in activation.items()},
        slots=n_slots,
    )
    return EpisodeResult(sim, trace, log)


SWEEP_COLUMNS = ("distance", "xi", "mean_rate", "coop_probability", "mean_relays",
                 "energy_per_packet", "throughput_to_energy", "direct_equiv_energy")


@dataclass
class _Cell:
    rate: list = field(default_factory=list)
    coop: list = field(default_factory=list)
    relays: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    gain: list = field(default_factory=list)


def sweep_distance(cfg: SimConfig, distances=None, xi_values=None, n_slots=None,
                   with_direct=False):
    """Single-source statistics over a (distance, xi) grid.

    Every slot re-places the candidate relays and redraws the fades. All
    xi values at one distance see the same channels; each distance has its
    own child seed. Metrics per cell (rates in bits/symbol, energies in
    normalized units per packet):

    - ``mean_rate``: mean effective rate over all slots
    - ``coop_probability``: fraction of slots that cooperate
    - ``mean_relays``: mean self-selected relay count over all slots
    - ``energy_per_packet``: mean network energy per packet over slots that transmit
    - ``throughput_to_energy``: (rate / energy) relative to direct transmission
      over the same channels
    - ``direct_equiv_energy``: mean energy per packet a direct link needs to
      hold the cell's mean rate in every slot by adapting its symbol energy.
      The per-slot cost scales with ``1 / |h|**2``, so under Rayleigh fading
      this mean is dominated by deep fades and drifts up with ``n_slots``

    Returns a list of row dicts keyed by :data:`SWEEP_COLUMNS`; with
    ``with_direct`` also a dict of direct-transmission rows per distance.
    """
    distances = list(cfg.sweep.distances if distances is None else distances)
    xi_values = list(cfg.sweep.xi_values if xi_values is None else xi_values)
    n_slots = cfg.sweep.n_slots if n_slots is None else n_slots
    if not distances or not xi_values:
        raise ValueError("need at least one distance and one xi value")
    phy = cfg.phy
    coops = [CoopConfig(cfg.coop.stbc_length, cfg.coop.stbc_rate, xi,
                        cfg.coop.bep_phase1, cfg.coop.bep_phase2) for xi in xi_values]
    Gamma = coops[0].snr_coefficients(phy)[0]
    ts = phy.symbol_period
    rows, direct_rows = [], {}
    root = np.random.SeedSequence(cfg.seed)
    for di, dist in enumerate(distances):
        ch_seed, r_seed = root.spawn(len(distances) * 2)[2 * di: 2 * di + 2]
        ch_rng = np.random.default_rng(ch_seed)
        r_rngs = [np.random.default_rng(s) for s in r_seed.spawn(len(xi_values))]
        src = source_position(dist, 0.0)
        cells = [_Cell() for _ in xi_values]
        d_rate, d_energy, g0s = [], [], []
        for _ in range(n_slots):
            relays = place_nodes(cfg.n_relays, cfg.coverage_radius, ch_rng,
                                 cfg.path_loss_exponent).positions if cfg.n_relays else np.zeros((0, 2))
            topo = Topology(np.vstack([src[None, :], relays]), cfg.path_loss_exponent,
                            cfg.coverage_radius)
            H = draw_channel_matrix(topo, ch_rng)
            g0 = float(abs(H[1, 0]) ** 2)
            b0 = bits_per_symbol(g0, Gamma, phy.max_bits_per_symbol)
            g0s.append(g0)
            d_rate.append(b0)
            d_energy.append(1.0 / b0 * (phy.packet_bits * phy.symbol_power * ts) if b0 else np.nan)
            for c, cc, rr in zip(cells, coops, r_rngs):
                out = run_recruitment(1, H, phy, cc, rr)
                rate = out.effective_rate * ts
                c.rate.append(rate)
                c.coop.append(out.decision)
                c.relays.append(len(out.relay_ids))
                if out.decision:
                    c.energy.append(coop_energy(phy, out.rate_coop, out.rate_phase2, cc.stbc_rate,
                                                out.n_relays).total)
                elif b0:
                    c.energy.append(phy.packet_bits * phy.symbol_power / out.rate_direct)
                else:
                    c.energy.append(np.nan)
        d_rate = np.array(d_rate, float)
        d_energy = np.array(d_energy, float)
        g0s = np.array(g0s)
        tx = d_rate > 0
        d_ratio = (d_rate[tx].mean() / d_energy[tx].mean()) if tx.any() else 0.0
        direct_rows[dist] = {"distance": dist, "mean_rate": float(d_rate.mean()),
                             "energy_per_packet": float(d_energy[tx].mean()) if tx.any() else 0.0}
        for xi, c in zip(xi_values, cells):
            rate = np.array(c.rate)
            energy = np.array(c.energy)
            on = rate > 0
            e_mean = float(energy[on].mean()) if on.any() else 0.0
            r_on = float(rate[on].mean()) if on.any() else 0.0
            ratio = (r_on / e_mean) / d_ratio if on.any() and d_ratio > 0 else 0.0
            rows.append({
                "distance": float(dist),
                "xi": float(xi),
                "mean_rate": float(rate.mean()),
                "coop_probability": float(np.mean(c.coop)),
                "mean_relays": float(np.mean(c.relays)),
                "energy_per_packet": e_mean,
                "throughput_to_energy": float(ratio),
                "direct_equiv_energy": _direct_equivalent(float(rate.mean()), g0s, Gamma, phy),
            })
    return (rows, direct_rows) if with_direct else rows


def _direct_equivalent(rate_bits, gains, Gamma, phy: PhyConfig) -> float:
    """Mean per-packet energy of a direct link forced to ``rate_bits`` bits/symbol.

    Inverting the rate formula, the symbol energy must grow by
    ``(2**r - 1) / (Gamma * |h|**2)`` over the fixed one.
    """
    if rate_bits <= 0 or gains.size == 0:
        return 0.0
    scale = (2.0 ** rate_bits - 1.0) / (Gamma * gains)
    unit = phy.packet_bits * phy.symbol_power * phy.symbol_period
    return float(np.mean(scale * unit / rate_bits))
