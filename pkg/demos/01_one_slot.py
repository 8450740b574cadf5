"""
One slot of relay recruitment
=============================

A source 90 m from the access point, 50 candidate relays. We draw one
fading realization, run the handshake and look at what it decided.
"""

# %%
import numpy as np

from coopvideo.cooperation import CoopConfig, coop_energy, format_trace, run_recruitment
from coopvideo.phy import PhyConfig, Topology, draw_channel_matrix
from coopvideo.sim import place_nodes, source_position

phy = PhyConfig()
coop = CoopConfig(self_select_xi=0.2)
rng = np.random.default_rng(3)

relays = place_nodes(50, 100.0, rng).positions
topo = Topology(np.vstack([source_position(90.0), relays]))

# %%
# Channels are redrawn every slot. Keep drawing until the handshake
# actually recruits somebody, so there is something to look at.
for slot in range(200):
    H = draw_channel_matrix(topo, rng)
    out = run_recruitment(1, H, phy, coop, rng)
    if out.decision:
        break

print(f"slot {slot}: recruited {out.n_relays} relays")
for line in format_trace(out, slot):
    print("  ", line)

# %%
# Rates in bits per symbol. The two-phase rate is the harmonic combination
# of the hops; rho is the share of the slot spent on the first hop.
ts = phy.symbol_period
print(f"direct {out.rate_direct * ts:.0f}, phase I {out.rate_phase1 * ts:.0f}, "
      f"phase II {out.rate_phase2 * ts:.0f}, two-phase {out.rate_coop * ts:.3f}, rho {out.rho:.3f}")

# %%
# Energy per packet in normalized units (one packet at one bit per symbol
# costs 1). The source pays less than it would alone, the relays pay the rest.
e = coop_energy(phy, out.rate_coop, out.rate_phase2, coop.stbc_rate, out.n_relays)
direct = 1 / (out.rate_direct * ts) if out.rate_direct else float("inf")
print(f"source {e.source:.3f} (direct would be {direct:.3f}), "
      f"each relay {e.per_relay:.3f}, network {e.total:.3f}")
