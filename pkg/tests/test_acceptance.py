"""End-to-end acceptance checks, one PASS/FAIL line each in the terminal summary.

The slow scenarios (distance sweep, three-user runs, CLI determinism) run
at full size here; expect a few minutes in total.
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import spearmanr

from coopvideo.cli import main
from coopvideo.cooperation import CONTROL_KINDS, CoopConfig, coop_energy, coop_rate, phase_split, run_recruitment
from coopvideo.mdp import RatePmf, action_to_allocation, build_traffic_chain, value_iteration
from coopvideo.oracle import random_chain, random_oracle_instances
from coopvideo.phy import PhyConfig, Topology, bits_per_symbol, draw_channel_matrix
from coopvideo.pricing import UserModel, harmonic_schedule, normalize_allocations, price_iteration, user_demand
from coopvideo.sim import SimConfig, place_nodes, run_episode, source_position, sweep_distance
from coopvideo.traffic import GopSpec, TrafficState, feasible_actions, ibpb_gop
from test_cooperation import build_channel, coefficients, unit_phy
from test_mdp import exhaustive_optimum

pytestmark = pytest.mark.slow

DISTANCES = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0]
XI = [0.1, 0.2, 0.3, 0.4, 0.5]


@pytest.fixture(scope="module")
def sweep():
    rows = sweep_distance(SimConfig(), DISTANCES, XI, n_slots=10_000)
    return {(r["distance"], r["xi"]): r for r in rows}


@pytest.fixture(scope="module")
def three_user():
    """Default three-source scenario with and without cooperation, 10^4 slots."""
    on = run_episode(SimConfig(n_slots=10_000))
    off = run_episode(SimConfig(n_slots=10_000, cooperation=False))
    return on, off


def test_c01_opportunistic_equivalence(verdict):
    t0 = time.perf_counter()
    rows = random_oracle_instances(200, seed=0)
    dt = time.perf_counter() - t0
    worst = max(abs(r["gap"]) for r in rows)
    above = max(r["gap"] for r in rows)
    ok = len(rows) >= 200 and worst <= 1e-8 and above <= 1e-8 and dt < 60
    verdict("1 opportunistic cooperation matches explicit-choice MDP", ok,
            f"{len(rows)} instances, max |gap| {worst:.2e}, {dt:.1f} s")


def test_c02_cooperation_grows_with_distance(verdict, sweep):
    p = [sweep[(d, 0.2)]["coop_probability"] for d in DISTANCES]
    rho = spearmanr(DISTANCES, p).statistic
    verdict("2 cooperation probability rises with distance", rho >= 0.95,
            f"spearman {rho:.3f}; p(10 m) {p[0]:.4f}, p(100 m) {p[-1]:.4f}")


def test_c03_xi_shape(verdict, sweep):
    relays = [sweep[(100.0, x)]["mean_relays"] for x in XI]
    rate = [sweep[(100.0, x)]["mean_rate"] for x in XI]
    ok = all(b >= a for a, b in zip(relays, relays[1:])) and int(np.argmax(rate)) != len(XI) - 1
    verdict("3 relay count non-decreasing in xi, rate not maximal at xi=0.5", ok,
            "relays " + ", ".join(f"{r:.2f}" for r in relays)
            + "; rate " + ", ".join(f"{r:.3f}" for r in rate))


def test_c04a_source_energy_below_direct(verdict):
    cfg = SimConfig()
    phy, coop = cfg.phy, CoopConfig(self_select_xi=0.2)
    Gamma = coop.snr_coefficients(phy)[0]
    rng = np.random.default_rng(11)
    src = source_position(100.0)
    unit = phy.packet_bits * phy.symbol_power
    n_coop = bad = 0
    for _ in range(3000):
        relays = place_nodes(cfg.n_relays, cfg.coverage_radius, rng).positions
        H = draw_channel_matrix(Topology(np.vstack([src, relays])), rng)
        out = run_recruitment(1, H, phy, coop, rng)
        if not out.decision:
            continue
        n_coop += 1
        b0 = bits_per_symbol(abs(H[1, 0]) ** 2, Gamma, phy.max_bits_per_symbol)
        e_src = coop_energy(phy, out.rate_coop, out.rate_phase2, coop.stbc_rate, out.n_relays).source
        e_direct = unit / (b0 * phy.symbol_rate) if b0 else math.inf
        bad += not e_src < e_direct
    verdict("4a cooperative source energy below direct in every cooperating slot",
            n_coop > 0 and bad == 0, f"{n_coop} cooperating slots, {bad} violations")


def test_c04b_direct_equivalent_energy(verdict, sweep):
    r = sweep[(100.0, 0.2)]
    ratio = r["direct_equiv_energy"] / r["energy_per_packet"]
    verdict("4b direct-equivalent energy at least twice cooperative energy", ratio >= 2,
            f"{r['direct_equiv_energy']:.2f} vs {r['energy_per_packet']:.2f}, ratio {ratio:.1f}")


def test_c04c_throughput_to_energy(verdict, sweep):
    t = sweep[(100.0, 0.2)]["throughput_to_energy"]
    verdict("4c throughput-to-energy relative to direct in [0.55, 0.95]", 0.55 <= t <= 0.95,
            f"{t:.3f}")


def test_c05_constant_control_overhead(verdict):
    phy = unit_phy()
    G, G1, _ = coefficients(phy)
    counts = {}
    for n in (0, 1, 5, 20):
        H = build_channel(1.0, [200.0] * n + [0.5] * 3, [1.0] * (n + 3), G, G1)
        out = run_recruitment(1, H, phy, CoopConfig(), np.random.default_rng(n))
        kinds = [m.kind for m in out.message_trace]
        counts[n] = (len(out.relay_ids), [k for k in kinds if k in CONTROL_KINDS], kinds.count("ACK"))
    ok = all(z == n and ctrl == list(CONTROL_KINDS) and ack == 1 for n, (z, ctrl, ack) in counts.items())
    verdict("5 four control messages and one ACK for 0, 1, 5, 20 relays", ok,
            ", ".join(f"z={n}: {len(c)}+{a}" for n, (_, c, a) in counts.items()))


def test_c06_numerical_identities(verdict):
    rng = np.random.default_rng(6)
    n = 200
    b1, b2 = rng.uniform(0.05, 50, n), rng.uniform(0.05, 50, n)
    Rc = rng.choice([0.5, 0.75, 1.0], n)
    harm = max(abs(coop_rate(a, b, r) - a * b * r / (b * r + a)) / (a * b * r / (b * r + a))
               for a, b, r in zip(b1, b2, Rc))
    split = max(abs(phase_split(a, b, r) * a - (1 - phase_split(a, b, r)) * r * b) / a
                for a, b, r in zip(b1, b2, Rc))

    alloc_err = 0.0
    for _ in range(n):
        R, P = float(rng.uniform(1e-3, 0.1)), int(rng.integers(100, 20000))
        rate = float(rng.uniform(1e4, 1e8))
        k = int(rng.integers(0, math.floor(R * rate / P) + 1))
        want = Fraction(P * k) / (Fraction(R) * Fraction(rate))
        got = action_to_allocation((k,), rate, R, P)
        alloc_err = max(alloc_err, abs(got - float(want)) / max(float(want), 1e-300))

    proj_err = 0.0
    for _ in range(n):
        req = rng.uniform(0, 1, int(rng.integers(1, 6))) * rng.choice([0.3, 1.0, 3.0])
        exact = [Fraction(v) for v in req]
        s = sum(exact)
        want = exact if s <= 1 else [v / s for v in exact]
        got = normalize_allocations(req)
        proj_err = max(proj_err, max(abs(g - float(w)) for g, w in zip(got, want)))

    ok = harm < 1e-12 and split < 1e-12 and alloc_err < 1e-12 and proj_err < 1e-15
    verdict("6 rate, split, allocation and projection identities (200 cases each)", ok,
            f"max rel errs {harm:.1e}, {split:.1e}, {alloc_err:.1e}; projection {proj_err:.1e}")


def test_c07_feasible_actions_exhaustive(verdict):
    t0 = time.perf_counter()
    cases = mismatches = 0
    for n in range(1, 5):
        pairs = [(k, j) for k in range(n) for j in range(k + 1, n)]
        edge_sets = [e for r in range(4) for e in itertools.combinations(pairs, r)]
        gops = [GopSpec(n, 1, deps, (12,) * n, (1.0,) * n, (0,) * n, 0) for deps in edge_sets]
        w = 13 ** np.arange(n)
        buffers = [b for b in itertools.product(range(13), repeat=n) if sum(b) <= 12]
        for i, b in enumerate(buffers):
            budget = i % 13
            grid = np.array(list(itertools.product(*(range(x + 1) for x in b)))).reshape(-1, n)
            within = grid.sum(axis=1) <= budget
            # a child may be sent only when its parent is sent in full
            edge_ok = {(k, j): (grid[:, j] == 0) | (grid[:, k] == b[k]) for k, j in pairs}
            codes = grid @ w
            state = TrafficState(tuple((0, c) for c in range(n)), b)
            for deps, gop in zip(edge_sets, gops):
                mask = within.copy()
                for e in deps:
                    mask &= edge_ok[e]
                got = np.array(feasible_actions(state, 0, 1, 1, gop, budget=budget)).reshape(-1, n) @ w
                cases += 1
                mismatches += not np.array_equal(np.sort(codes[mask]), np.sort(got))
    dt = time.perf_counter() - t0
    verdict("7 feasible actions equal brute force (buffer <= 12, <= 3 edges)",
            mismatches == 0 and dt < 10, f"{cases} states, {mismatches} mismatches, {dt:.1f} s")


def test_c08_value_iteration(verdict):
    rng = np.random.default_rng(8)
    worst_ratio, worst_gap = 0.0, 0.0
    excess = []
    for i in range(40):
        alpha = [0.0, 0.5, 0.9][i % 3]
        chain = random_chain(rng, 4, 2)
        pmf = RatePmf([0.0, 1.0, 2.0], rng.dirichlet(np.ones(3)))
        lam = float(rng.uniform(0, 2))
        V0 = rng.normal(0, 50, (chain.n_states, 3))
        vf, _ = value_iteration(chain, pmf, lam, alpha, 2, R=1, P=1, tol=1e-10, V0=V0, max_iter=100_000)
        d = np.array(vf.deltas)
        keep = d[1:] > 1e-4
        if keep.any():
            r = d[1:][keep] / d[:-1][keep]
            excess.append(float(np.max(r[-10:]) - alpha))
            worst_ratio = max(worst_ratio, float(np.max(r[-10:])))
        if chain.n_states <= 2:
            exact = exhaustive_optimum(chain, pmf, lam, alpha, 2, 1, 1)
            vf, _ = value_iteration(chain, pmf, lam, alpha, 2, R=1, P=1, tol=1e-12, max_iter=100_000)
            worst_gap = max(worst_gap, float(np.max(np.abs(vf.values - exact))))
    ok = max(excess) <= 1e-9 and worst_gap < 1e-8
    verdict("8 Bellman deltas contract by alpha; values match exhaustive enumeration", ok,
            f"max ratio excess {max(excess):.1e}, max enumeration gap {worst_gap:.1e}")


def test_c09_pricing(verdict, three_user):
    phy = PhyConfig()
    R, P, alpha = phy.slot_seconds, phy.packet_bits, 0.9
    budget = 1 / (1 - alpha)
    chain = build_traffic_chain(ibpb_gop(4), phy.packet_budget(phy.rate_grid[-1]))
    pmf = RatePmf(phy.rate_grid, np.array([0.05, 0.05, 0.1, 0.1, 0.2, 0.2, 0.1, 0.1, 0.1]))
    users = [UserModel(chain, pmf, "a"), UserModel(chain, pmf, "b")]
    X0 = sum(user_demand(u, 0.0, alpha, 2, R=R, P=P)[0] for u in users)
    res = price_iteration(users, alpha, R=R, P=P, schedule=harmonic_schedule(5.0))
    gap = abs(res.total_demand - budget)
    grid = [user_demand(users[0], lam, alpha, 2, R=R, P=P)[0] for lam in (0, 1, 2, 5, 10, 20, 50)]
    monotone = all(b <= a + 1e-9 for a, b in zip(grid, grid[1:]))
    slack = price_iteration(users[:1], alpha, R=R, P=P, schedule=harmonic_schedule(5.0))
    on, _ = three_user
    max_grant = on.stats.max_granted
    ok = X0 > budget and gap < 0.05 * budget and monotone and slack.price == 0.0 and max_grant <= 1 + 1e-12
    verdict("9 price converges, demand non-increasing, slack price zero, sum x <= 1", ok,
            f"demand at 0 {X0:.2f}, price {res.price:.3f}, |gap| {gap:.3f} < {0.05 * budget:.2f}; "
            f"slack price {slack.price}; max granted {max_grant:.6f} over {on.stats.slots} slots")


def test_c10_cli_determinism(verdict, tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        assert main(["run", "--seed", "42", "--out-dir", str(d)]) == 0
        outs.append(((d / "run.csv").read_bytes(), (d / "price.csv").read_bytes()))
    verdict("10 run --seed 42 twice gives byte-identical CSV", outs[0] == outs[1],
            f"{len(outs[0][0])} bytes")


def test_utility_analog(verdict, three_user):
    on, off = three_user
    u1_on, u1_off = (r.stats.users[0].utility_delivered for r in (on, off))
    u3_on, u3_off = (r.stats.users[2].utility_delivered for r in (on, off))
    drop = (u1_off - u1_on) / u1_off
    ok = u3_on > u3_off and drop < 0.05
    verdict("delivered-utility analog: far user gains, near user loses < 5%", ok,
            f"user3 {u3_off:.0f} -> {u3_on:.0f}; user1 {u1_off:.0f} -> {u1_on:.0f} ({-100 * drop:+.2f}%)")
