import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopvideo.phy import (
    ChannelMatrix,
    InvalidParameterError,
    InvalidTopologyError,
    PhyConfig,
    Topology,
    ber_upper_bound,
    bits_per_symbol,
    direct_energy_per_packet,
    direct_rate,
    draw_channel_matrix,
    packet_error_probability,
    snr_coefficient,
)


def gamma_oracle(gamma, bep):
    return 1.5 * gamma / -math.log(bep / 4.0)


class TestSnrCoefficient:
    def test_exact_exponent(self):
        assert snr_coefficient(1.0, 4 * math.exp(-3)) == pytest.approx(0.5, rel=1e-12)

    def test_hand_value(self):
        assert snr_coefficient(10.0, 1e-3) == pytest.approx(30 / (2 * 8.29404964), rel=1e-6)

    def test_tiny_gamma_gives_zero_rate(self):
        G = snr_coefficient(1e-4, 1e-5)
        assert direct_rate(1.0, G, PhyConfig()) == 0

    @pytest.mark.parametrize("bep", [0.0, 1.0, 4.0, 5.0])
    def test_rejects_bad_bep(self, bep):
        with pytest.raises(InvalidParameterError):
            snr_coefficient(1.0, bep)

    def test_rejects_bad_gamma(self):
        with pytest.raises(InvalidParameterError):
            snr_coefficient(0.0, 1e-3)


class TestBerBound:
    def test_zero_channel(self):
        assert ber_upper_bound(0.0, 1, 123.0) == 1.0

    def test_unit_channel(self):
        assert ber_upper_bound(1.0, 1, 1.0) == pytest.approx(4 * math.exp(-1.5))

    def test_strong_channel(self):
        assert ber_upper_bound(1e3, 2, 10.0) == pytest.approx(0.0, abs=1e-300)

    def test_rejects_zero_bits(self):
        with pytest.raises(InvalidParameterError):
            ber_upper_bound(1.0, 0, 1.0)


class TestDirectRate:
    cfg = PhyConfig(max_bits_per_symbol=10)

    @pytest.mark.parametrize("x, bits", [(3.0, 2), (6.5, 2), (1e6, 10), (0.5, 0), (1.0, 1)])
    def test_hand_values(self, x, bits):
        assert direct_rate(1.0, x, self.cfg) == bits * self.cfg.symbol_rate

    @given(st.floats(0, 1e4), st.floats(0, 1e4), st.floats(0, 1e3))
    def test_monotone_in_gain_and_gamma(self, g, dg, G):
        cfg = self.cfg
        lo = direct_rate(math.sqrt(g), G, cfg)
        assert direct_rate(math.sqrt(g + dg), G, cfg) >= lo
        assert direct_rate(math.sqrt(g), G + dg, cfg) >= lo

    @given(st.floats(1e-3, 1e8), st.floats(1e-9, 1e-1), st.floats(1e-4, 1e2))
    def test_chosen_constellation_meets_bep(self, gamma, bep, gain):
        G = snr_coefficient(gamma, bep)
        b = bits_per_symbol(gain, G, 12)
        if b >= 1:
            assert ber_upper_bound(math.sqrt(gain), b, gamma) <= bep * (1 + 1e-9)

    def test_array_input(self):
        b = bits_per_symbol(np.array([0.0, 3.0, 7.0, 1e9]), 1.0, 8)
        assert b.tolist() == [0, 2, 3, 8]


class TestEnergy:
    def test_normalized_unit_rate(self):
        cfg = PhyConfig()
        # normalized units: one bit per symbol costs one unit per packet
        assert direct_energy_per_packet(cfg, cfg.symbol_rate) == pytest.approx(1.0)

    def test_halving(self):
        cfg = PhyConfig()
        e1 = direct_energy_per_packet(cfg, 2 * cfg.symbol_rate)
        e2 = direct_energy_per_packet(cfg, 4 * cfg.symbol_rate)
        assert e2 == pytest.approx(e1 / 2)

    def test_hand_value(self):
        # P = 1000 bits, P_s = 0.1 W: E_s = 0.1 / symbol_rate
        cfg = PhyConfig(packet_bits=1000, symbol_rate=1e6, symbol_energy=0.1 / 1e6)
        assert cfg.symbol_power == pytest.approx(0.1)
        assert direct_energy_per_packet(cfg, 1e6) == pytest.approx(1e-4)

    @given(st.floats(1.0, 1e9))
    def test_identity(self, rate):
        cfg = PhyConfig()
        assert direct_energy_per_packet(cfg, rate) * rate == pytest.approx(cfg.packet_bits * cfg.symbol_power)

    def test_zero_rate(self):
        with pytest.raises(InvalidParameterError):
            direct_energy_per_packet(PhyConfig(), 0.0)


class TestPacketError:
    def test_edges(self):
        assert packet_error_probability(0.0, 1000) == 0.0
        assert packet_error_probability(1.0, 1000) == 1.0

    def test_hand_value(self):
        assert packet_error_probability(1e-4, 1000) == pytest.approx(1 - 0.9999 ** 1000, rel=1e-12)

    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidParameterError):
            packet_error_probability(1.5, 10)


class TestChannel:
    def test_duality_and_determinism(self):
        topo = Topology(np.array([[10.0, 0.0], [0.0, 20.0], [-5.0, -5.0]]))
        H1 = draw_channel_matrix(topo, np.random.default_rng(7))
        H2 = draw_channel_matrix(topo, np.random.default_rng(7))
        assert np.array_equal(H1.coefficients, H2.coefficients)
        mag = np.abs(H1.coefficients)
        assert np.allclose(mag, mag.T, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("d, delta", [(1.0, 3.0), (10.0, 3.0), (5.0, 2.0)])
    def test_variance(self, d, delta):
        topo = Topology(np.array([[d, 0.0]]), delta, coverage_radius=100.0)
        rng = np.random.default_rng(1)
        g = np.array([abs(draw_channel_matrix(topo, rng)[1, 0]) ** 2 for _ in range(100_000)])
        assert g.mean() == pytest.approx(d ** -delta, rel=0.03)

    def test_coincident_nodes(self):
        topo = Topology(np.array([[1.0, 1.0], [1.0, 1.0]]))
        with pytest.raises(InvalidTopologyError):
            draw_channel_matrix(topo, np.random.default_rng(0))

    def test_coverage(self):
        with pytest.raises(InvalidTopologyError):
            Topology(np.array([[150.0, 0.0]]))

    def test_matrix_shape(self):
        with pytest.raises(ValueError):
            ChannelMatrix(np.zeros((2, 3)))


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"bep_target": 0.0}, {"bep_target": 1.0}, {"bep_split": 1.0},
        {"base_bits_per_symbol": 9}, {"symbol_rate": -1.0}, {"packet_bits": 0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(InvalidParameterError):
            PhyConfig(**kw)

    def test_rate_grid_sorted(self):
        g = PhyConfig().rate_grid
        assert g[0] == 0 and np.all(np.diff(g) > 0)

    def test_packet_budget(self):
        cfg = PhyConfig()
        # 8 bits/symbol * 1.25e6 symbols/s * 10 ms / 8000 bits = 12.5 packets
        assert cfg.packet_budget(8 * cfg.symbol_rate) == 12
