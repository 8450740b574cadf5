"""
Three video sources sharing the uplink
======================================

Sources at 20 m, 45 m and 80 m. The AP picks one congestion price offline,
every user solves its own scheduling MDP at that price, and then we run the
closed loop with and without cooperation.

Planning dominates the runtime (about half a minute per run).
"""

# %%
from coopvideo.sim import SimConfig, run_episode

slots = 2000
with_coop = run_episode(SimConfig(n_slots=slots))
without = run_episode(SimConfig(n_slots=slots, cooperation=False))

# %%
s = with_coop.stats
print(f"price {s.price:.3f} (converged: {s.price_converged}), "
      f"mean airtime requested {s.mean_requested:.3f}, granted {s.mean_granted:.3f}")
print(f"slots where requests exceeded the slot: {100 * s.violation_frequency:.1f}%")

# %%
print(f"\n{'user':>4} {'coop':>6} {'relays':>6} {'rate':>6} {'utility on':>11} {'utility off':>12} {'lost frames':>12}")
for k, (on, off) in enumerate(zip(with_coop.stats.users, without.stats.users), start=1):
    print(f"{k:4d} {on.coop_probability:6.3f} {on.mean_relays:6.2f} {on.mean_rate:6.3f} "
          f"{on.utility_delivered:11.0f} {off.utility_delivered:12.0f} {on.flow.frames_lost:12d}")

# %%
# The far user cooperates far more often than the near ones. At this price
# the change in delivered utility is small for all three users.
