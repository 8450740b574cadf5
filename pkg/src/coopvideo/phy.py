"""Physical-layer models: fading draws, BEP-constrained rates and energies.

Rates are expressed in bits/second. A link whose achievable constellation
carries zero bits per symbol has rate ``0.0``, which callers treat as
"unusable this slot".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "InvalidParameterError",
    "InvalidTopologyError",
    "PhyConfig",
    "ChannelMatrix",
    "Topology",
    "snr_coefficient",
    "ber_upper_bound",
    "bits_per_symbol",
    "direct_rate",
    "draw_channel_matrix",
    "direct_energy_per_packet",
    "packet_error_probability",
]


class InvalidParameterError(ValueError):
    """Raised when a numeric parameter falls outside its valid domain."""


class InvalidTopologyError(ValueError):
    """Raised for node placements the fading model cannot handle."""


@dataclass(frozen=True)
class PhyConfig:
    """Static PHY parameters shared by every node.

    ``symbol_energy=None`` selects the normalized energy unit in which rates
    count in bits/symbol, so a packet sent at ``b`` bits per symbol costs
    ``1 / b`` (E_s = 1 / P, i.e. P_s = 1 / P with T_s taken as the time unit).
    """

    symbol_rate: float = 1_250_000.0
    avg_snr_gamma: float = 6.0e7
    bep_target: float = 1e-5
    bep_split: float = 0.9
    max_bits_per_symbol: int = 8
    base_bits_per_symbol: int = 1
    packet_bits: int = 8000
    slot_seconds: float = 0.01
    symbol_energy: float | None = None

    def __post_init__(self):
        if self.symbol_rate <= 0:
            raise InvalidParameterError("symbol_rate must be positive")
        if self.avg_snr_gamma <= 0:
            raise InvalidParameterError("avg_snr_gamma must be positive")
        if not 0 < self.bep_target < 1:
            raise InvalidParameterError("bep_target must lie in (0, 1)")
        if not 0 < self.bep_split < 1:
            raise InvalidParameterError("bep_split must lie in (0, 1)")
        if self.base_bits_per_symbol < 1 or self.max_bits_per_symbol < 1:
            raise InvalidParameterError("bits per symbol must be >= 1")
        if self.base_bits_per_symbol > self.max_bits_per_symbol:
            raise InvalidParameterError("base_bits_per_symbol exceeds max_bits_per_symbol")
        if self.packet_bits <= 0 or self.slot_seconds <= 0:
            raise InvalidParameterError("packet_bits and slot_seconds must be positive")

    @property
    def symbol_period(self) -> float:
        return 1.0 / self.symbol_rate

    @property
    def energy_per_symbol(self) -> float:
        if self.symbol_energy is None:
            return 1.0 / self.packet_bits
        return self.symbol_energy

    @property
    def symbol_power(self) -> float:
        """Average transmit power P_s = E_s / T_s (Watts)."""
        return self.energy_per_symbol * self.symbol_rate

    @property
    def bep_phase1(self) -> float:
        return self.bep_split * self.bep_target

    @property
    def bep_phase2(self) -> float:
        return self.bep_target - self.bep_phase1

    @property
    def rate_grid(self) -> np.ndarray:
        """Basic rate set {0, 1, ..., b_N} / T_s in bits/second."""
        return np.arange(self.max_bits_per_symbol + 1) * self.symbol_rate

    @property
    def packets_per_bit_symbol(self) -> float:
        """Packets that fit in one slot per bit/symbol of spectral efficiency."""
        return self.slot_seconds * self.symbol_rate / self.packet_bits

    def packet_budget(self, rate: float) -> int:
        """Largest packet count allowed by ``||y||_1 <= R beta / P``."""
        return int(math.floor(self.slot_seconds * rate / self.packet_bits + 1e-9))


@dataclass
class ChannelMatrix:
    """Complex fading coefficients among the AP (index 0) and nodes 1..M."""

    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=complex)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("channel matrix must be square")
        self.coefficients = c

    @property
    def n_nodes(self) -> int:
        """Number of non-AP nodes."""
        return self.coefficients.shape[0] - 1

    def gain(self, i, j):
        return np.abs(self.coefficients[i, j]) ** 2

    def __getitem__(self, idx):
        return self.coefficients[idx]


@dataclass
class Topology:
    """Node positions in meters; row ``k`` is node ``k + 1`` (the AP sits at the origin)."""

    positions: np.ndarray
    path_loss_exponent: float = 3.0
    coverage_radius: float = 100.0
    _distances: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.shape[1] != 2:
            raise InvalidTopologyError("positions must be an (n, 2) array")
        if self.path_loss_exponent <= 0:
            raise InvalidParameterError("path_loss_exponent must be positive")
        radii = np.hypot(pos[:, 0], pos[:, 1])
        if np.any(radii > self.coverage_radius * (1 + 1e-12)):
            raise InvalidTopologyError("node outside the AP coverage radius")
        self.positions = pos

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    def distances(self) -> np.ndarray:
        """(M+1) x (M+1) Euclidean distance matrix including the AP at index 0."""
        if self._distances is None:
            pts = np.vstack([np.zeros((1, 2)), self.positions])
            diff = pts[:, None, :] - pts[None, :, :]
            self._distances = np.hypot(diff[..., 0], diff[..., 1])
        return self._distances

    def with_node(self, position) -> Topology:
        """Copy of this topology with one extra node appended (as the last id)."""
        return Topology(np.vstack([self.positions, np.asarray(position, float)[None, :]]),
                        self.path_loss_exponent, self.coverage_radius)


def snr_coefficient(gamma, bep):
    """SNR gap coefficient ``Gamma = 3 gamma / (2 |ln(bep / 4)|)``.

    >>> round(snr_coefficient(1.0, 4 * math.exp(-3)), 12)
    0.5
    """
    if gamma <= 0:
        raise InvalidParameterError("gamma must be positive")
    if not 0 < bep < 4:
        raise InvalidParameterError(f"bep={bep} outside the bound's valid range (0, 4)")
    if bep >= 1:
        raise InvalidParameterError("bep must be a probability below 1")
    return 3.0 * gamma / (2.0 * abs(math.log(bep / 4.0)))


def ber_upper_bound(h, bits_per_symbol, gamma):
    """Gray-coded square-QAM bit error bound at the ML detector."""
    if np.any(np.asarray(bits_per_symbol) < 1):
        raise InvalidParameterError("bits_per_symbol must be >= 1")
    gain = np.abs(h) ** 2
    val = 4.0 * np.exp(-3.0 * gamma * gain / (2.0 * (2.0 ** bits_per_symbol - 1.0)))
    return np.minimum(1.0, val)


def bits_per_symbol(gain, Gamma, max_bits):
    """Integer constellation size ``min(b_N, floor(log2(1 + Gamma * gain)))``.

    Works element-wise on arrays of squared channel magnitudes.
    """
    b = np.floor(np.log2(1.0 + Gamma * np.asarray(gain, dtype=float)))
    b = np.clip(b, 0, max_bits).astype(int)
    return b if b.ndim else int(b)


def direct_rate(h, Gamma, cfg: PhyConfig):
    """BEP-constrained rate (bits/s) of a single link with fade ``h``."""
    if Gamma < 0:
        raise InvalidParameterError("Gamma must be non-negative")
    return bits_per_symbol(np.abs(h) ** 2, Gamma, cfg.max_bits_per_symbol) * cfg.symbol_rate


def draw_channel_matrix(topology: Topology, rng: np.random.Generator) -> ChannelMatrix:
    """Draw one slot of Rayleigh fades with variance ``distance ** -delta``.

    Only the upper triangle is drawn; the lower triangle receives the same
    magnitude with an independently drawn phase, so the link magnitudes are
    dual while the complex values need not be equal.
    """
    n = topology.n_nodes + 1
    if n < 2:
        raise InvalidTopologyError("need at least one node besides the AP")
    dist = topology.distances()
    iu = np.triu_indices(n, k=1)
    d = dist[iu]
    if np.any(d <= 0):
        raise InvalidTopologyError("coincident node positions give zero link distance")
    scale = np.sqrt(d ** (-topology.path_loss_exponent) / 2.0)
    z = rng.standard_normal((2, d.size))
    upper = scale * (z[0] + 1j * z[1])
    phase = np.exp(2j * np.pi * rng.random(d.size))
    h = np.zeros((n, n), dtype=complex)
    h[iu] = upper
    h[iu[1], iu[0]] = np.abs(upper) * phase
    return ChannelMatrix(h)


def direct_energy_per_packet(cfg: PhyConfig, rate):
    """Energy (J) to send one packet at ``rate`` bits/s: ``P * P_s / rate``."""
    if np.any(np.asarray(rate) <= 0):
        raise InvalidParameterError("energy undefined for a zero rate")
    return cfg.packet_bits * cfg.symbol_power / rate


def packet_error_probability(ber, packet_bits):
    """Packet loss probability under independent bit errors."""
    ber = np.asarray(ber, dtype=float)
    if np.any((ber < 0) | (ber > 1)):
        raise InvalidParameterError("ber must lie in [0, 1]")
    safe = np.where(ber >= 1.0, 0.0, ber)
    out = np.where(ber >= 1.0, 1.0, -np.expm1(packet_bits * np.log1p(-safe)))
    return out if out.ndim else float(out)
