"""Two-phase decode-and-forward cooperation with randomized STBC relays.

The recruitment handshake runs once per source and slot::

    RTS (source) -> CRS (AP: direct rate, xi) -> HTS (self-selected relays)
    -> CTS (AP: decision, phase-II rate, price) -> data -> ACK

Its control overhead is four messages plus the ACK whatever the relay count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .phy import (
    ChannelMatrix,
    InvalidParameterError,
    PhyConfig,
    ber_upper_bound,
    bits_per_symbol,
    snr_coefficient,
)

__all__ = [
    "CooperationInfeasibleError",
    "NoDirectLinkError",
    "CoopConfig",
    "RandomizationMatrix",
    "ProtocolMessage",
    "CoopOutcome",
    "EnergyReport",
    "CONTROL_KINDS",
    "self_select",
    "assigned_phase1_rate",
    "channel_truth_phase1_rate",
    "draw_randomization",
    "equivalent_channel",
    "phase2_rate",
    "coop_rate",
    "phase_split",
    "cooperation_wins",
    "ap_accept_condition",
    "run_recruitment",
    "coop_energy",
    "format_trace",
]

CONTROL_KINDS = ("RTS", "CRS", "HTS", "CTS")


class CooperationInfeasibleError(ValueError):
    """A hop has zero rate, so the two-phase mode cannot carry data."""


class NoDirectLinkError(ValueError):
    """Recruitment needs a nonzero direct rate to derive the phase-I rate."""


@dataclass(frozen=True)
class CoopConfig:
    """Cooperation parameters known to every node.

    The per-hop BEP budgets default to the split carried by the
    :class:`~coopvideo.phy.PhyConfig`; explicit values must add up to its
    end-to-end target.
    """

    stbc_length: int = 2
    stbc_rate: float = 1.0
    self_select_xi: float = 0.2
    bep_phase1: float | None = None
    bep_phase2: float | None = None

    def __post_init__(self):
        if self.stbc_length < 1:
            raise InvalidParameterError("stbc_length must be >= 1")
        if not 0 < self.stbc_rate <= 1:
            raise InvalidParameterError("stbc_rate must lie in (0, 1]")
        if not 0 < self.self_select_xi < 1:
            raise InvalidParameterError("self_select_xi must lie in (0, 1)")
        if (self.bep_phase1 is None) != (self.bep_phase2 is None):
            raise InvalidParameterError("give both per-hop BEPs or neither")

    def phase_beps(self, phy: PhyConfig) -> tuple[float, float]:
        if self.bep_phase1 is None:
            return phy.bep_phase1, phy.bep_phase2
        b1, b2 = self.bep_phase1, self.bep_phase2
        if not math.isclose(b1 + b2, phy.bep_target, rel_tol=1e-9):
            raise InvalidParameterError("per-hop BEPs must sum to the end-to-end target")
        if b1 <= b2:
            raise InvalidParameterError("phase-I BEP must exceed phase-II BEP")
        return b1, b2

    def snr_coefficients(self, phy: PhyConfig) -> tuple[float, float, float]:
        """(Gamma, Gamma_1, Gamma_2) for the direct link and the two hops."""
        b1, b2 = self.phase_beps(phy)
        g = phy.avg_snr_gamma
        return snr_coefficient(g, phy.bep_target), snr_coefficient(g, b1), snr_coefficient(g, b2)


@dataclass
class RandomizationMatrix:
    """STBC weights: one length-L column per relay, first row reserved for the source."""

    weights: np.ndarray

    @property
    def source_weights(self) -> np.ndarray:
        r = np.zeros(self.weights.shape[0], dtype=complex)
        r[0] = 1.0
        return r

    @property
    def n_relays(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class ProtocolMessage:
    step: int
    kind: str
    sender: str
    payload: tuple = ()

    @property
    def is_control(self) -> bool:
        return self.kind in CONTROL_KINDS


@dataclass
class CoopOutcome:
    """Result of one recruitment round for one source."""

    source: int
    decision: int
    relay_ids: tuple
    rate_direct: float
    rate_phase1: float
    rate_phase2: float
    rate_coop: float | None
    rho: float | None
    message_trace: list = field(default_factory=list)
    gain_direct: float = 0.0
    gain_phase1_min: float = 0.0
    gain_equivalent: float = 0.0
    condition_mismatch: bool = False

    @property
    def effective_rate(self) -> float:
        return self.rate_coop if self.decision else self.rate_direct

    @property
    def n_relays(self) -> int:
        return len(self.relay_ids) if self.decision else 0

    @property
    def control_messages(self) -> list:
        return [m for m in self.message_trace if m.is_control]

    def bit_error_bound(self, phy: PhyConfig) -> float:
        """BER bound of the hop that limits end-to-end reliability."""
        ts = phy.symbol_period
        if self.decision:
            b1 = round(self.rate_phase1 * ts)
            b2 = round(self.rate_phase2 * ts)
            return float(max(ber_upper_bound(math.sqrt(self.gain_phase1_min), b1, phy.avg_snr_gamma),
                             ber_upper_bound(math.sqrt(self.gain_equivalent), b2, phy.avg_snr_gamma)))
        b0 = round(self.rate_direct * ts)
        if b0 < 1:
            return 1.0
        return float(ber_upper_bound(math.sqrt(self.gain_direct), b0, phy.avg_snr_gamma))


@dataclass(frozen=True)
class EnergyReport:
    source: float
    per_relay: float
    total: float


def self_select(beta_direct, beta_source_to_me, xi) -> bool:
    """Relay-side rule: join iff ``beta_direct / beta_source_to_me <= xi``."""
    if beta_source_to_me <= 0:
        return False
    return beta_direct / beta_source_to_me <= xi


def assigned_phase1_rate(beta_direct, xi, cfg: PhyConfig) -> float:
    """Phase-I rate ``beta_direct / xi`` rounded down onto the rate grid."""
    if beta_direct <= 0:
        raise NoDirectLinkError("phase-I rate undefined without a direct link")
    b = math.floor(beta_direct * cfg.symbol_period / xi + 1e-9)
    return min(b, cfg.max_bits_per_symbol) * cfg.symbol_rate


def channel_truth_phase1_rate(H: ChannelMatrix, source, relays, Gamma1, cfg: PhyConfig) -> float:
    """Rate the weakest source-to-relay link actually supports."""
    relays = list(relays)
    if not relays:
        raise ValueError("relay set must be nonempty")
    g = np.min(np.abs(H[source, relays]) ** 2)
    return bits_per_symbol(g, Gamma1, cfg.max_bits_per_symbol) * cfg.symbol_rate


def draw_randomization(L: int, n_relays: int, rng: np.random.Generator) -> RandomizationMatrix:
    """Random STBC weights, i.i.d. CN(0, 1/L) except the zeroed first row."""
    z = rng.standard_normal((2, L, n_relays))
    w = (z[0] + 1j * z[1]) * math.sqrt(0.5 / L)
    w[0, :] = 0.0
    return RandomizationMatrix(w)


def equivalent_channel(h_source_ap, R: RandomizationMatrix, h_relays_ap) -> np.ndarray:
    """Composite channel ``h_i0 * r_i + R @ h_relays`` seen by the AP."""
    h2 = np.atleast_1d(np.asarray(h_relays_ap, dtype=complex))
    if h2.shape[0] != R.n_relays:
        raise ValueError(f"{h2.shape[0]} relay channels for {R.n_relays} weight columns")
    return h_source_ap * R.source_weights + R.weights @ h2


def phase2_rate(h_source_ap, Rh, Gamma2, cfg: PhyConfig) -> float:
    """Second-hop rate from the equivalent-channel energy."""
    gain = abs(h_source_ap) ** 2 + float(np.sum(np.abs(np.asarray(Rh)) ** 2))
    return bits_per_symbol(gain, Gamma2, cfg.max_bits_per_symbol) * cfg.symbol_rate


def coop_rate(beta1, beta2, Rc):
    """End-to-end two-phase rate ``1 / (1/beta1 + 1/(Rc beta2))``."""
    if beta1 <= 0 or beta2 <= 0:
        raise CooperationInfeasibleError("both hops need a positive rate")
    return 1.0 / (1.0 / beta1 + 1.0 / (Rc * beta2))


def phase_split(beta1, beta2, Rc):
    """Phase-I share of the airtime that balances both hops' packet counts."""
    if beta1 <= 0 or beta2 <= 0:
        raise CooperationInfeasibleError("both hops need a positive rate")
    return 1.0 / (1.0 + beta1 / (beta2 * Rc))


def cooperation_wins(beta_direct, beta1, beta2, Rc) -> bool:
    """True iff the two-phase mode strictly beats the direct rate."""
    if beta1 <= 0 or beta2 <= 0:
        return False
    if beta_direct <= 0:
        return True
    return 1.0 / beta1 + 1.0 / (Rc * beta2) < 1.0 / beta_direct


def ap_accept_condition(beta_direct, beta2, Rc, xi) -> bool:
    """The AP-side check ``1/(Rc beta2) < (1 - xi)/beta_direct``."""
    if beta2 <= 0:
        return False
    if beta_direct <= 0:
        return True
    return 1.0 / (Rc * beta2) < (1.0 - xi) / beta_direct


def run_recruitment(source: int, H: ChannelMatrix, phy: PhyConfig, coop: CoopConfig,
                    rng: np.random.Generator, price: float = 0.0,
                    candidates=None) -> CoopOutcome:
    """Run the nine-step handshake for ``source`` over one channel realization.

    ``candidates`` restricts which node ids may self-select (default: every
    node except the source). ``rng`` feeds only the relays' randomization
    weights, so channel draws can come from an independent stream.
    """
    Gamma, Gamma1, Gamma2 = coop.snr_coefficients(phy)
    xi = coop.self_select_xi
    bmax = phy.max_bits_per_symbol
    sr = phy.symbol_rate
    trace = []

    # steps 1-2: RTS; AP and listeners estimate their links to the source
    trace.append(ProtocolMessage(1, "RTS", f"node{source}"))
    h0 = H[source, 0]
    g0 = float(abs(h0) ** 2)
    b0 = bits_per_symbol(g0, Gamma, bmax)
    if candidates is None:
        cand = np.array([k for k in range(1, H.n_nodes + 1) if k != source], dtype=int)
    else:
        cand = np.array([k for k in candidates if k != source], dtype=int)
    g_sl = np.abs(H[source, cand]) ** 2 if cand.size else np.zeros(0)
    b_sl = bits_per_symbol(g_sl, Gamma1, bmax) if cand.size else np.zeros(0, dtype=int)

    # step 3: CRS carries the direct rate and xi
    trace.append(ProtocolMessage(3, "CRS", "AP", (("rate_direct", b0 * sr), ("xi", xi))))

    # step 4: phase-I rate beta_direct / xi; zero without a direct link, in
    # which case nobody is recruited and the HTS slot stays empty
    b1 = min(math.floor(b0 / xi + 1e-9), bmax)

    # step 5: distributed self-selection, then the HTS burst
    if b0 > 0:
        chosen = (b_sl > 0) & (b0 <= xi * b_sl + 1e-12) & (b_sl >= b1)
    else:
        chosen = np.zeros(cand.size, dtype=bool)
    relays = cand[chosen]
    trace.append(ProtocolMessage(5, "HTS", "relays", (("n_relays", int(relays.size)),)))

    # step 6: AP estimates the equivalent channel and decides
    b2 = 0
    g_eq = g0
    g1min = 0.0
    if relays.size:
        R = draw_randomization(coop.stbc_length, relays.size, rng)
        Rh = R.weights @ H[relays, 0]
        g_eq = g0 + float(np.sum(np.abs(Rh) ** 2))
        b2 = bits_per_symbol(g_eq, Gamma2, bmax)
        g1min = float(np.min(g_sl[chosen]))
    beta0, beta1, beta2 = b0 * sr, b1 * sr, b2 * sr
    accept = relays.size > 0 and ap_accept_condition(beta0, beta2, coop.stbc_rate, xi)
    wins = relays.size > 0 and cooperation_wins(beta0, beta1, beta2, coop.stbc_rate)
    z = int(accept and wins)
    trace.append(ProtocolMessage(6, "CTS", "AP", (("z", z), ("rate_phase2", beta2 if z else 0.0),
                                                  ("price", price))))

    # steps 7-9
    if z:
        rc = coop_rate(beta1, beta2, coop.stbc_rate)
        rho = phase_split(beta1, beta2, coop.stbc_rate)
        trace.append(ProtocolMessage(7, "DATA1", f"node{source}", (("rate", beta1),)))
        trace.append(ProtocolMessage(8, "DATA2", "relays", (("rate", beta2),)))
    else:
        rc, rho = None, None
        if b0 > 0:
            trace.append(ProtocolMessage(7, "DATA", f"node{source}", (("rate", beta0),)))
    trace.append(ProtocolMessage(9, "ACK", "AP"))

    return CoopOutcome(
        source=source,
        decision=z,
        relay_ids=tuple(int(r) for r in relays),
        rate_direct=float(beta0),
        rate_phase1=float(beta1),
        rate_phase2=float(beta2),
        rate_coop=rc,
        rho=rho,
        message_trace=trace,
        gain_direct=g0,
        gain_phase1_min=g1min,
        gain_equivalent=g_eq,
        condition_mismatch=bool(relays.size and accept != wins),
    )


def coop_energy(cfg: PhyConfig, rate_coop, rate_phase2, Rc, n_relays, n_packets=1) -> EnergyReport:
    """Source, per-relay and network energy for ``n_packets`` cooperative packets."""
    if rate_coop <= 0 or rate_phase2 <= 0:
        raise CooperationInfeasibleError("energy needs positive rates")
    if n_relays < 0:
        raise InvalidParameterError("n_relays must be >= 0")
    unit = cfg.packet_bits * cfg.symbol_power
    src = n_packets * unit / rate_coop
    rly = n_packets * unit / (rate_phase2 * Rc)
    return EnergyReport(src, rly, src + n_relays * rly)


def format_trace(outcome: CoopOutcome, slot: int) -> list[str]:
    """One tab-separated line per message: slot, step, kind, sender, relays, rates."""
    lines = []
    n = len(outcome.relay_ids)
    for m in outcome.message_trace:
        payload = " ".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in m.payload)
        lines.append(f"{slot}\t{m.step}\t{m.kind}\t{m.sender}\t{n}\t{payload}")
    return lines
