"""Per-user scheduling MDP under a uniform resource price.

A user's state is ``(traffic state, rate bin)``. Rates are i.i.d. across
slots, so the Bellman recursion only needs the traffic chain (states,
actions, transitions) plus the rate pmf::

    V(T, r) = max_{y feasible at rate r} u(T, y) - lam * (x(y, r) - 1/M)
                                        + alpha * sum_T' p(T'|T, y) W(T')
    W(T')   = sum_r' p(r') V(T', r')

Everything here works on a compiled :class:`TrafficChain`, which the GOP
traffic model and the small synthetic oracle instances both produce.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .traffic import GopSpec, advance, feasible_actions, initial_state, state_key, utility

__all__ = [
    "NonConvergenceError",
    "InstanceTooLargeError",
    "RatePmf",
    "TrafficChain",
    "ValueFunction",
    "UserPolicy",
    "build_traffic_chain",
    "estimate_rate_pmf",
    "action_to_allocation",
    "value_iteration",
    "evaluate_policy",
    "action_values",
    "expected_resource",
    "AugmentedInstance",
    "augmented_brute_force",
    "opportunistic_pmf",
    "enumerate_policies",
    "dump_policy",
]


class NonConvergenceError(RuntimeError):
    def __init__(self, message, last_delta, iterations):
        super().__init__(message)
        self.last_delta = last_delta
        self.iterations = iterations


class InstanceTooLargeError(ValueError):
    pass


@dataclass
class RatePmf:
    """Distribution of the per-slot opportunistic rate over a finite set of bins."""

    bins: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=float)
        self.probabilities = np.asarray(self.probabilities, dtype=float)
        if self.bins.shape != self.probabilities.shape:
            raise ValueError("bins and probabilities differ in length")
        if np.any(np.diff(self.bins) <= 0):
            raise ValueError("rate bins must be strictly increasing")
        if np.any(self.probabilities < 0) or abs(self.probabilities.sum() - 1) > 1e-9:
            raise ValueError("probabilities must form a pmf")

    def __len__(self):
        return self.bins.size

    def bin_of(self, rate) -> int:
        """Index of the largest bin not exceeding ``rate``."""
        return max(0, int(np.searchsorted(self.bins, rate + 1e-9 * max(1.0, rate), side="right")) - 1)

    def mean(self) -> float:
        return float(self.bins @ self.probabilities)

    @classmethod
    def point_mass(cls, bins, rate) -> RatePmf:
        bins = np.asarray(bins, dtype=float)
        p = np.zeros(bins.size)
        p[int(np.argmin(np.abs(bins - rate)))] = 1.0
        return cls(bins, p)


@dataclass
class TrafficChain:
    """Flat state-action tables of a controlled traffic Markov chain.

    State-action pairs are stored contiguously per state (``offsets``), the
    zero action first. ``transitions`` is an ``(n_sa, n_states)`` sparse
    row-stochastic matrix.
    """

    keys: list
    offsets: np.ndarray
    packets: np.ndarray
    utility: np.ndarray
    transitions: sp.csr_matrix
    actions: list
    start: int = 0
    representatives: list = field(default_factory=list)
    gop: GopSpec | None = None
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.packets = np.asarray(self.packets, dtype=np.int64)
        self.utility = np.asarray(self.utility, dtype=float)
        self.transitions = sp.csr_matrix(self.transitions)
        if not self._index:
            self._index = {k: i for i, k in enumerate(self.keys)}
        if np.any(np.diff(self.offsets) < 1):
            raise ValueError("every state needs at least one action")
        if np.any(self.packets[self.offsets[:-1]] != 0):
            raise ValueError("first action of every state must be the zero action")

    @property
    def n_states(self) -> int:
        return len(self.keys)

    @property
    def n_actions(self) -> int:
        return self.packets.size

    @property
    def sa_state(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_states), np.diff(self.offsets))

    def index(self, key) -> int:
        return self._index[key]

    @classmethod
    def from_tables(cls, tables, start=0, keys=None) -> TrafficChain:
        """Build from ``tables[s] = [(packets, utility, {next_state: prob}), ...]``."""
        offsets, packets, util, rows, cols, vals, actions = [0], [], [], [], [], [], []
        for s, acts in enumerate(tables):
            acts = sorted(acts, key=lambda a: a[0])
            for n, u, nxt in acts:
                r = len(packets)
                packets.append(n)
                util.append(u)
                actions.append(n)
                for s2, p in nxt.items():
                    rows.append(r)
                    cols.append(s2)
                    vals.append(p)
            offsets.append(len(packets))
        n = len(tables)
        T = sp.csr_matrix((vals, (rows, cols)), shape=(len(packets), n))
        return cls(keys if keys is not None else list(range(n)), offsets, packets, util, T, actions, start)


def _partial_deliveries(action):
    """Every vector componentwise below ``action`` (what packet errors can leave)."""
    return itertools.product(*(range(a + 1) for a in action))


def build_traffic_chain(gop: GopSpec, max_packets: int, start_slot: int = 0,
                        max_states: int = 200_000, lossy: bool = True) -> TrafficChain:
    """Enumerate every traffic state reachable from a full initial buffer.

    ``max_packets`` caps the per-slot packet count (the budget at the top
    rate), which bounds the action sets. With ``lossy`` the state set also
    covers partial deliveries of each action, so a simulator with packet
    errors never leaves the chain; transitions still assume delivery.
    """
    s0 = initial_state(gop, start_slot)
    k0 = state_key(s0, start_slot, gop)
    keys, reps = [k0], [(s0, start_slot)]
    index = {k0: 0}
    queue = deque([0])
    per_state = {}
    while queue:
        i = queue.popleft()
        st, slot = reps[i]
        acts = feasible_actions(st, 0, 1, 1, gop, budget=max_packets)
        rows = []

        def visit(delivered):
            nxt = advance(st, delivered, slot, gop)
            k = state_key(nxt, slot + 1, gop)
            j = index.get(k)
            if j is None:
                j = len(keys)
                if j >= max_states:
                    raise InstanceTooLargeError(f"more than {max_states} traffic states")
                index[k] = j
                keys.append(k)
                reps.append((nxt, slot + 1))
                queue.append(j)
            return j

        for a in acts:
            rows.append((a, sum(a), utility(st, a, gop), visit(a)))
        if lossy:
            # the largest actions dominate every partial delivery
            seen = set(acts)
            for a in acts:
                for d in _partial_deliveries(a):
                    if d not in seen:
                        seen.add(d)
                        visit(d)
        per_state[i] = rows

    offsets, packets, util, nxt_idx, actions = [0], [], [], [], []
    for i in range(len(keys)):
        for a, n, u, j in per_state[i]:
            actions.append(a)
            packets.append(n)
            util.append(u)
            nxt_idx.append(j)
        offsets.append(len(packets))
    n_sa = len(packets)
    T = sp.csr_matrix((np.ones(n_sa), (np.arange(n_sa), nxt_idx)), shape=(n_sa, len(keys)))
    chain = TrafficChain(keys, offsets, packets, util, T, actions, 0, reps, gop, index)
    return chain


def estimate_rate_pmf(user, topology, phy, coop, n_samples, rng, cooperate=True,
                      candidates=None) -> RatePmf:
    """Monte-Carlo pmf of the opportunistic rate of node ``user``.

    Cooperative rates are floored onto the integer bits/symbol grid.
    """
    from .cooperation import run_recruitment
    from .phy import draw_channel_matrix

    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    ch_rng, r_rng = rng.spawn(2)
    counts = np.zeros(phy.max_bits_per_symbol + 1)
    for _ in range(n_samples):
        H = draw_channel_matrix(topology, ch_rng)
        if cooperate:
            out = run_recruitment(user, H, phy, coop, r_rng, candidates=candidates)
            rate = out.effective_rate
        else:
            from .phy import direct_rate
            rate = direct_rate(H[user, 0], coop.snr_coefficients(phy)[0], phy)
        counts[int(math.floor(rate * phy.symbol_period + 1e-9))] += 1
    return RatePmf(phy.rate_grid, counts / n_samples)


def action_to_allocation(action, rate, R, P) -> float:
    """Airtime fraction ``x = P * ||y||_1 / (R * rate)`` needed for ``action``."""
    n = int(np.sum(action))
    if n == 0:
        return 0.0
    if rate <= 0:
        raise ValueError("nonzero action at zero rate")
    x = P * n / (R * rate)
    if x > 1 + 1e-12:
        raise ValueError(f"action needs x={x:.4f} > 1 of the slot")
    return x


@dataclass
class ValueFunction:
    values: np.ndarray
    chain: TrafficChain
    rate_pmf: RatePmf
    deltas: list
    price: float
    alpha: float

    @property
    def iterations(self) -> int:
        return len(self.deltas)

    def __call__(self, key, rate_bin) -> float:
        return float(self.values[self.chain.index(key), rate_bin])


@dataclass
class UserPolicy:
    """Greedy action (state-action row index) for every ``(traffic, rate bin)``."""

    choice: np.ndarray
    chain: TrafficChain
    rate_pmf: RatePmf

    def action(self, key, rate_bin):
        return self.chain.actions[self.choice[self.chain.index(key), rate_bin]]

    def packets(self) -> np.ndarray:
        return self.chain.packets[self.choice]


def _allocation_table(chain, pmf, R, P):
    """x for every (state-action, rate bin) plus the feasibility mask."""
    rates = pmf.bins
    n = chain.packets.astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = (P * n[:, None]) / (R * rates[None, :])
    budget = np.floor(R * rates / P + 1e-9)
    feasible = n[:, None] <= budget[None, :]
    x = np.where(feasible, x, 0.0)
    x[:, rates <= 0] = 0.0
    return x, feasible


def _greedy(Q, offsets):
    """Per-segment max and first argmax of a ``(n_sa, n_bins)`` table."""
    V = np.maximum.reduceat(Q, offsets[:-1], axis=0)
    counts = np.diff(offsets)
    hit = Q >= np.repeat(V, counts, axis=0)
    # first hit per segment: mask later rows with a large index, take min
    idx = np.where(hit, np.arange(Q.shape[0])[:, None], Q.shape[0])
    choice = np.minimum.reduceat(idx, offsets[:-1], axis=0)
    return V, choice


def value_iteration(traffic, rate_pmf: RatePmf, lam, alpha, n_users, phy=None, *,
                    R=None, P=None, tol=1e-6, max_iter=10_000, V0=None):
    """Solve the priced per-user Bellman equation by value iteration.

    ``traffic`` is a :class:`TrafficChain` or a :class:`GopSpec` (compiled
    with the packet cap of the top rate bin). Slot length and packet size
    come from ``phy`` unless ``R``/``P`` are given.

    Returns ``(ValueFunction, UserPolicy)``.
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    if lam < 0:
        raise ValueError("price must be non-negative")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if R is None:
        R = phy.slot_seconds
    if P is None:
        P = phy.packet_bits
    chain = traffic
    if isinstance(traffic, GopSpec):
        cap = int(math.floor(R * rate_pmf.bins.max() / P + 1e-9))
        chain = build_traffic_chain(traffic, cap)

    x, feasible = _allocation_table(chain, rate_pmf, R, P)
    stage = chain.utility[:, None] - lam * (x - 1.0 / n_users)
    stage = np.where(feasible, stage, -np.inf)
    T = chain.transitions
    p = rate_pmf.probabilities
    V = np.zeros((chain.n_states, len(rate_pmf))) if V0 is None else np.array(V0, dtype=float)
    deltas = []
    for _ in range(max_iter):
        W = V @ p
        Q = stage + alpha * (T @ W)[:, None]
        V_new = np.maximum.reduceat(Q, chain.offsets[:-1], axis=0)
        delta = float(np.max(np.abs(V_new - V))) if V.size else 0.0
        deltas.append(delta)
        V = V_new
        if delta < tol:
            break
    else:
        raise NonConvergenceError(f"value iteration did not converge in {max_iter} sweeps "
                                  f"(last delta {deltas[-1]:.3g})", deltas[-1], max_iter)
    W = V @ p
    Q = stage + alpha * (T @ W)[:, None]
    V, choice = _greedy(Q, chain.offsets)
    vf = ValueFunction(V, chain, rate_pmf, deltas, lam, alpha)
    return vf, UserPolicy(choice, chain, rate_pmf)


def action_values(vf: ValueFunction, state: int, rate_bin: int, n_users, *, R, P):
    """State-action rows of ``state`` and their Q-values at ``rate_bin``.

    Rows infeasible at that rate get ``-inf``.
    """
    chain, pmf = vf.chain, vf.rate_pmf
    rows = np.arange(chain.offsets[state], chain.offsets[state + 1])
    rate = pmf.bins[rate_bin]
    n = chain.packets[rows].astype(float)
    budget = math.floor(R * rate / P + 1e-9) if rate > 0 else 0
    x = np.where(n > 0, P * n / (R * rate) if rate > 0 else 0.0, 0.0)
    W = vf.values @ pmf.probabilities
    q = chain.utility[rows] - vf.price * (x - 1.0 / n_users) + vf.alpha * (chain.transitions[rows] @ W)
    return rows, np.where(n <= budget, q, -np.inf)


def _policy_kernel(policy: UserPolicy, R, P):
    """Traffic-level kernel and mean allocation under the rate pmf."""
    chain, pmf = policy.chain, policy.rate_pmf
    x_all, _ = _allocation_table(chain, pmf, R, P)
    nb = len(pmf)
    cols = np.arange(nb)[None, :]
    x_state = x_all[policy.choice, cols]            # (n_states, n_bins)
    p = pmf.probabilities
    A = sp.csr_matrix((chain.n_states, chain.n_states))
    for r in range(nb):
        if p[r] > 0:
            A = A + p[r] * chain.transitions[policy.choice[:, r]]
    return x_state, A


def expected_resource(policy: UserPolicy, phy=None, alpha=0.9, start=None, *, R=None, P=None):
    """Discounted airtime demand ``E[sum_t alpha^t x_t]`` from ``start``.

    ``start`` is a traffic-state index (rate drawn from the pmf), a
    ``(traffic index, rate bin)`` pair, or ``None`` for the chain's start state.
    """
    if R is None:
        R = phy.slot_seconds
    if P is None:
        P = phy.packet_bits
    chain, pmf = policy.chain, policy.rate_pmf
    x_state, A = _policy_kernel(policy, R, P)
    p = pmf.probabilities
    xbar = x_state @ p
    M = sp.identity(chain.n_states, format="csc") - alpha * A.tocsc()
    Y = np.atleast_1d(spsolve(M, xbar))
    if start is None:
        start = chain.start
    if isinstance(start, tuple):
        s, r = start
        nxt = chain.transitions[policy.choice[s, r]]
        return float(x_state[s, r] + alpha * (nxt @ Y)[0])
    return float(Y[start])


def evaluate_policy(policy: UserPolicy, lam, alpha, n_users, *, R, P) -> np.ndarray:
    """Exact value ``(n_states, n_bins)`` of a fixed policy by a sparse linear solve."""
    chain, pmf = policy.chain, policy.rate_pmf
    x_state, A = _policy_kernel(policy, R, P)
    u_state = chain.utility[policy.choice]
    r_state = u_state - lam * (x_state - 1.0 / n_users)
    p = pmf.probabilities
    M = sp.identity(chain.n_states, format="csc") - alpha * A.tocsc()
    Y = np.atleast_1d(spsolve(M, r_state @ p))
    cont = np.column_stack([chain.transitions[policy.choice[:, r]] @ Y for r in range(len(pmf))])
    return r_state + alpha * cont


def enumerate_policies(chain: TrafficChain, rate_pmf: RatePmf, lam, alpha, n_users, *, R, P,
                       limit=100_000) -> np.ndarray:
    """Optimal values by exhaustive search over all stationary deterministic policies."""
    _, feasible = _allocation_table(chain, rate_pmf, R, P)
    options = []
    for s in range(chain.n_states):
        for r in range(len(rate_pmf)):
            rows = [a for a in range(chain.offsets[s], chain.offsets[s + 1]) if feasible[a, r]]
            options.append(rows)
    total = math.prod(len(o) for o in options)
    if total > limit:
        raise InstanceTooLargeError(f"{total} policies exceed the enumeration limit")
    best = None
    shape = (chain.n_states, len(rate_pmf))
    for combo in itertools.product(*options):
        pol = UserPolicy(np.array(combo).reshape(shape), chain, rate_pmf)
        V = evaluate_policy(pol, lam, alpha, n_users, R=R, P=P)
        best = V if best is None else np.maximum(best, V)
    return best


@dataclass
class AugmentedInstance:
    """Small MDP where the cooperation decision is an explicit action.

    Channel state ``c`` occurs with probability ``channel_probs[c]`` and
    offers ``rate_direct[c]`` (z=0) or ``rate_coop[c]`` (z=1).
    """

    chain: TrafficChain
    channel_probs: np.ndarray
    rate_direct: np.ndarray
    rate_coop: np.ndarray
    lam: float
    alpha: float
    n_users: int
    R: float = 1.0
    P: float = 1.0


def augmented_brute_force(inst: AugmentedInstance, max_pairs=10_000, tol=1e-13) -> np.ndarray:
    """Optimal values ``(n_traffic, n_channels)`` with z chosen by the optimizer.

    Policy iteration with exact linear solves; used only as an oracle.
    """
    chain = inst.chain
    pc = np.asarray(inst.channel_probs, float)
    rates = np.stack([np.asarray(inst.rate_direct, float), np.asarray(inst.rate_coop, float)])
    nC = pc.size
    n_pairs = chain.n_actions * nC * 2
    if n_pairs > max_pairs:
        raise InstanceTooLargeError(f"{n_pairs} state-action pairs exceed the guard of {max_pairs}")
    n = chain.packets.astype(float)
    # payoff[z, a, c]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = inst.P * n[None, :, None] / (inst.R * rates[:, None, :])
    budget = np.floor(inst.R * rates / inst.P + 1e-9)
    feas = n[None, :, None] <= budget[:, None, :]
    x = np.where(feas, np.nan_to_num(x, posinf=0.0), 0.0)
    x = np.where(rates[:, None, :] <= 0, 0.0, x)
    pay = chain.utility[None, :, None] - inst.lam * (x - 1.0 / inst.n_users)
    pay = np.where(feas, pay, -np.inf)
    T = chain.transitions
    # flatten (z, a) as candidate rows per (state, channel)
    S = chain.n_states
    V = np.zeros((S, nC))
    choice = None
    for _ in range(1000):
        W = V @ pc
        cont = T @ W
        Q = pay + inst.alpha * cont[None, :, None]          # (2, n_sa, nC)
        Qbest = np.max(Q, axis=0)
        zbest = np.argmax(Q, axis=0)
        Vs, a_choice = _greedy(Qbest, chain.offsets)
        new_choice = (a_choice, zbest[a_choice, np.arange(nC)[None, :]])
        if choice is not None and np.array_equal(new_choice[0], choice[0]) \
                and np.array_equal(new_choice[1], choice[1]):
            break
        choice = new_choice
        # exact evaluation of the current policy
        a_idx, z_idx = choice
        cols = np.arange(nC)[None, :]
        r_sc = pay[z_idx, a_idx, cols]
        A = sp.csr_matrix((S, S))
        for c in range(nC):
            A = A + pc[c] * T[a_idx[:, c]]
        M = sp.identity(S, format="csc") - inst.alpha * A.tocsc()
        Y = np.atleast_1d(spsolve(M, r_sc @ pc))
        V = r_sc + inst.alpha * np.column_stack([T[a_idx[:, c]] @ Y for c in range(nC)])
    return V


def opportunistic_pmf(inst: AugmentedInstance):
    """Rate pmf of ``max(direct, coop)`` plus each channel state's bin index."""
    best = np.maximum(inst.rate_direct, inst.rate_coop).astype(float)
    bins = np.unique(best)
    idx = np.searchsorted(bins, best)
    probs = np.zeros(bins.size)
    np.add.at(probs, idx, inst.channel_probs)
    return RatePmf(bins, probs / probs.sum()), idx


def dump_policy(vf: ValueFunction, policy: UserPolicy, path):
    """Write one JSON object per (state, rate bin): key, value and chosen action."""
    chain = vf.chain
    with open(path, "w") as fh:
        for s, key in enumerate(chain.keys):
            for r in range(len(vf.rate_pmf)):
                rec = {
                    "state": repr(key),
                    "rate_bin": r,
                    "rate": float(vf.rate_pmf.bins[r]),
                    "value": float(vf.values[s, r]),
                    "action": list(np.atleast_1d(chain.actions[policy.choice[s, r]]).tolist()),
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
