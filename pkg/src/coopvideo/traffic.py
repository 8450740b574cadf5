"""Video traffic state: sliding scheduling window over a periodic GOP.

Frame instances are ``(gop_index, frame_class)`` pairs. Instance ``(g, c)``
has deadline ``g * period + deadlines[c]`` and is schedulable in slot ``t``
while that deadline lies in ``[t, t + window]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter

__all__ = [
    "GopSpec",
    "TrafficState",
    "FlowCounts",
    "ibpb_gop",
    "schedulable_set",
    "initial_state",
    "feasible_actions",
    "utility",
    "advance",
    "state_key",
    "truncate_action",
]


@dataclass(frozen=True)
class GopSpec:
    """Periodic group-of-pictures structure and its per-class attributes.

    ``dependencies`` holds ``(k, j)`` pairs of class indices meaning class
    ``j`` of a GOP can only be decoded once class ``k`` of the same GOP is.
    """

    frames_per_gop: int
    period: int
    dependencies: tuple
    packets_per_frame: tuple
    quality_increment: tuple
    deadlines: tuple
    window: int
    names: tuple = ()
    _ancestors: tuple = field(default=(), init=False, repr=False, compare=False)
    _descendants: tuple = field(default=(), init=False, repr=False, compare=False)
    _parents: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.frames_per_gop
        if n < 1 or self.period < 1 or self.window < 0:
            raise ValueError("frames_per_gop and period must be >= 1, window >= 0")
        for name in ("packets_per_frame", "quality_increment", "deadlines"):
            val = tuple(getattr(self, name))
            if len(val) != n:
                raise ValueError(f"{name} needs one entry per frame class")
            object.__setattr__(self, name, val)
        if any(p < 0 for p in self.packets_per_frame):
            raise ValueError("packets_per_frame must be non-negative")
        if any(q < 0 for q in self.quality_increment):
            raise ValueError("quality increments must be non-negative")
        deps = tuple((int(k), int(j)) for k, j in self.dependencies)
        for k, j in deps:
            if not (0 <= k < n and 0 <= j < n) or k == j:
                raise ValueError(f"bad dependency {k} -> {j}")
        ts = TopologicalSorter({j: set() for j in range(n)})
        for k, j in deps:
            ts.add(j, k)
        try:
            tuple(ts.static_order())
        except CycleError as exc:
            raise ValueError("frame dependencies contain a cycle") from exc
        object.__setattr__(self, "dependencies", deps)
        parents = [set() for _ in range(n)]
        for k, j in deps:
            parents[j].add(k)
        anc = []
        for c in range(n):
            seen, stack = set(), list(parents[c])
            while stack:
                a = stack.pop()
                if a not in seen:
                    seen.add(a)
                    stack.extend(parents[a])
            anc.append(frozenset(seen))
        desc = [frozenset(j for j in range(n) if c in anc[j]) for c in range(n)]
        object.__setattr__(self, "_parents", tuple(frozenset(p) for p in parents))
        object.__setattr__(self, "_ancestors", tuple(anc))
        object.__setattr__(self, "_descendants", tuple(desc))
        if not self.names:
            object.__setattr__(self, "names", tuple(str(c + 1) for c in range(n)))

    def deadline(self, frame) -> int:
        g, c = frame
        return g * self.period + self.deadlines[c]

    def ancestors(self, c) -> frozenset:
        return self._ancestors[c]

    def descendants(self, c) -> frozenset:
        return self._descendants[c]

    def parents(self, c) -> frozenset:
        return self._parents[c]

    def startup_slots(self) -> int:
        """Number of initial slots whose frame set is not yet periodic."""
        return max(0, max(self.deadlines) - self.period + 1)

    def scaled(self, packets=None, quality=None) -> GopSpec:
        """Copy with per-class packet counts and/or quality increments replaced."""
        return GopSpec(self.frames_per_gop, self.period, self.dependencies,
                       tuple(packets) if packets is not None else self.packets_per_frame,
                       tuple(quality) if quality is not None else self.quality_increment,
                       self.deadlines, self.window, self.names)

    def to_dict(self) -> dict:
        return {
            "frames_per_gop": self.frames_per_gop,
            "period": self.period,
            "dependencies": [list(d) for d in self.dependencies],
            "packets_per_frame": list(self.packets_per_frame),
            "quality_increment": list(self.quality_increment),
            "deadlines": list(self.deadlines),
            "window": self.window,
            "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> GopSpec:
        return cls(
            frames_per_gop=int(d["frames_per_gop"]),
            period=int(d["period"]),
            dependencies=tuple(tuple(x) for x in d.get("dependencies", ())),
            packets_per_frame=tuple(d["packets_per_frame"]),
            quality_increment=tuple(d["quality_increment"]),
            deadlines=tuple(d["deadlines"]),
            window=int(d["window"]),
            names=tuple(d.get("names", ())),
        )


def ibpb_gop(packets_per_frame=4, quality=(8.0, 1.0, 4.0, 1.0)) -> GopSpec:
    """The four-frame I B P B pattern with a three-slot period and window 2.

    Classes are ``I1, B2, P3, B4``; P3 is predicted from I1 and both
    B-frames from P3 (B2 also from I1). Default increments give I, P and B
    packets 8, 4 and 1 utility units.
    """
    if isinstance(packets_per_frame, int):
        packets_per_frame = (packets_per_frame,) * 4
    return GopSpec(
        frames_per_gop=4,
        period=3,
        dependencies=((0, 2), (0, 1), (2, 1), (2, 3)),
        packets_per_frame=tuple(packets_per_frame),
        quality_increment=tuple(quality),
        deadlines=(0, 1, 1, 3),
        window=2,
        names=("I1", "B2", "P3", "B4"),
    )


@dataclass(frozen=True)
class TrafficState:
    """Schedulable frames, their remaining packets and known-undecodable frames."""

    frame_set: tuple
    buffers: tuple
    lost: frozenset = frozenset()

    def __post_init__(self):
        if len(self.frame_set) != len(self.buffers):
            raise ValueError("one buffer entry per schedulable frame")
        if any(b < 0 for b in self.buffers):
            raise ValueError("negative buffer")

    @property
    def total_packets(self) -> int:
        return sum(self.buffers)


@dataclass
class FlowCounts:
    """Running packet bookkeeping for one user."""

    admitted: int = 0
    delivered: int = 0
    expired: int = 0
    dropped: int = 0
    frames_lost: int = 0

    def add(self, other: FlowCounts):
        self.admitted += other.admitted
        self.delivered += other.delivered
        self.expired += other.expired
        self.dropped += other.dropped
        self.frames_lost += other.frames_lost


def schedulable_set(slot: int, gop: GopSpec) -> tuple:
    """Frame instances whose deadline falls in ``[slot, slot + window]``, by deadline."""
    if slot < 0:
        raise ValueError("slot must be >= 0")
    lo, hi = slot, slot + gop.window
    g_min = max(0, (lo - max(gop.deadlines)) // gop.period)
    g_max = (hi - min(gop.deadlines)) // gop.period
    frames = [(g, c) for g in range(g_min, g_max + 1) for c in range(gop.frames_per_gop)
              if lo <= g * gop.period + gop.deadlines[c] <= hi]
    frames.sort(key=lambda f: (gop.deadline(f), f[0], f[1]))
    return tuple(frames)


def initial_state(gop: GopSpec, slot: int = 0) -> TrafficState:
    frames = schedulable_set(slot, gop)
    return TrafficState(frames, tuple(gop.packets_per_frame[c] for _, c in frames))


def _budget(rate, R, P) -> int:
    if rate <= 0:
        return 0
    return int(math.floor(R * rate / P + 1e-9))


def _dependency_pairs(state: TrafficState, gop: GopSpec):
    """Index pairs (k, j) into the frame set for direct dependencies inside the window."""
    pos = {f: i for i, f in enumerate(state.frame_set)}
    pairs = []
    for j, (g, c) in enumerate(state.frame_set):
        for k_cls in gop.parents(c):
            k = pos.get((g, k_cls))
            if k is not None:
                pairs.append((k, j))
    return pairs


def feasible_actions(state: TrafficState, rate, R, P, gop: GopSpec, budget=None) -> list:
    """All scheduling vectors meeting the buffer, packet and dependency constraints.

    ``budget`` overrides the packet limit ``floor(R * rate / P)``.
    """
    if budget is None:
        budget = _budget(rate, R, P)
    n = len(state.frame_set)
    b = state.buffers
    parents = [[] for _ in range(n)]
    for k, j in _dependency_pairs(state, gop):
        parents[j].append(k)
    # fill frames so that in-window parents are decided before their children
    order = list(TopologicalSorter({j: set(parents[j]) for j in range(n)}).static_order())
    out = []
    y = [0] * n

    def rec(pos, left):
        if pos == n:
            out.append(tuple(y))
            return
        j = order[pos]
        blocked = any(y[k] < b[k] for k in parents[j])
        top = 0 if blocked else min(b[j], left)
        for v in range(top + 1):
            y[j] = v
            rec(pos + 1, left - v)
        y[j] = 0

    rec(0, max(budget, 0))
    out.sort(key=lambda a: (sum(a), a))
    return out


def utility(state: TrafficState, action, gop: GopSpec) -> float:
    return float(sum(gop.quality_increment[c] * y for (_, c), y in zip(state.frame_set, action)))


def advance(state: TrafficState, delivered, slot: int, gop: GopSpec,
            counts: FlowCounts | None = None) -> TrafficState:
    """Traffic state at ``slot + 1`` after ``delivered`` packets got through in ``slot``.

    Frames leaving the window with packets left are lost, and so is every
    frame depending on a lost frame: its packets are discarded, including
    frames that only enter the window now.
    """
    delivered = tuple(int(d) for d in delivered)
    if len(delivered) != len(state.buffers):
        raise ValueError("delivered vector does not match the frame set")
    if any(d < 0 or d > b for d, b in zip(delivered, state.buffers)):
        raise ValueError(f"delivered {delivered} exceeds buffers {state.buffers}")
    remaining = dict(zip(state.frame_set, (b - d for b, d in zip(state.buffers, delivered))))
    lost = set(state.lost)
    nxt = schedulable_set(slot + 1, gop)
    nxt_set = set(nxt)
    expired = dropped = admitted = frames_lost = 0

    for f, left in remaining.items():
        if f not in nxt_set and left > 0:
            expired += left
            if f not in lost:
                lost.add(f)
                frames_lost += 1

    buffers = {}
    for f in nxt:
        if f in remaining:
            buffers[f] = remaining[f]
        else:
            buffers[f] = gop.packets_per_frame[f[1]]
            admitted += buffers[f]

    for f in nxt:
        g, c = f
        if f not in lost and any((g, a) in lost for a in gop.ancestors(c)):
            lost.add(f)
            frames_lost += 1
            dropped += buffers[f]
            buffers[f] = 0

    # forget losses that can no longer affect a pending frame
    keep = set()
    for (g, c) in lost:
        for d in gop.descendants(c):
            if (g, d) not in lost and gop.deadline((g, d)) >= slot + 1:
                keep.add((g, c))
                break

    if counts is not None:
        counts.admitted += admitted
        counts.delivered += sum(delivered)
        counts.expired += expired
        counts.dropped += dropped
        counts.frames_lost += frames_lost
    return TrafficState(nxt, tuple(buffers[f] for f in nxt), frozenset(keep))


def state_key(state: TrafficState, slot: int, gop: GopSpec):
    """Hashable, shift-invariant key: equal keys have identical futures."""
    if slot < gop.startup_slots():
        phase, base = ("startup", slot), 0
    else:
        phase, base = slot % gop.period, slot // gop.period
    frames = tuple((g - base, c) for g, c in state.frame_set)
    lost = tuple(sorted((g - base, c) for g, c in state.lost))
    return (phase, frames, state.buffers, lost)


def truncate_action(state: TrafficState, action, budget: int, gop: GopSpec) -> tuple:
    """Shrink ``action`` to at most ``budget`` packets, keeping it feasible.

    Packets are removed one at a time from a frame with no scheduled
    in-window dependent, lowest quality increment first, then latest deadline.
    """
    y = [int(a) for a in action]
    budget = max(0, int(budget))
    if sum(y) <= budget:
        return tuple(y)
    children = [[] for _ in y]
    for k, j in _dependency_pairs(state, gop):
        children[k].append(j)
    while sum(y) > budget:
        leaves = [j for j in range(len(y)) if y[j] > 0 and not any(y[c] > 0 for c in children[j])]
        j = min(leaves, key=lambda j: (gop.quality_increment[state.frame_set[j][1]],
                                       -gop.deadline(state.frame_set[j]), -j))
        y[j] -= 1
    return tuple(y)
