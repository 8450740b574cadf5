"""Uniform airtime price: subgradient updates and per-slot allocation normalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import RatePmf, TrafficChain, UserPolicy, expected_resource, value_iteration

__all__ = [
    "UserModel",
    "PriceResult",
    "harmonic_schedule",
    "subgradient_step",
    "user_demand",
    "price_iteration",
    "normalize_allocations",
]


@dataclass
class UserModel:
    """What the AP needs to query one user's discounted airtime demand."""

    chain: TrafficChain
    rate_pmf: RatePmf
    name: str = ""


@dataclass
class PriceResult:
    price: float
    policies: list
    demands: list
    converged: bool
    iterations: int
    history: list = field(default_factory=list)
    value_functions: list = field(default_factory=list)

    @property
    def total_demand(self) -> float:
        return float(sum(self.demands))


def harmonic_schedule(mu0=0.5):
    """Diminishing step ``mu_k = mu0 / k`` (k starts at 1)."""
    if mu0 <= 0:
        raise ValueError("mu0 must be positive")
    return lambda k: mu0 / k


def subgradient_step(lam, mu_k, sum_X, alpha) -> float:
    """Projected update ``max(0, lam + mu_k * (sum_X - 1 / (1 - alpha)))``."""
    if mu_k <= 0:
        raise ValueError("step size must be positive")
    if lam < 0:
        raise ValueError("price must be non-negative")
    return max(0.0, lam + mu_k * (sum_X - 1.0 / (1.0 - alpha)))


def user_demand(user: UserModel, lam, alpha, n_users, *, R, P, tol=1e-6, V0=None):
    """Solve one user's priced MDP; return ``(X, policy, value function)``."""
    vf, pol = value_iteration(user.chain, user.rate_pmf, lam, alpha, n_users,
                              R=R, P=P, tol=tol, V0=V0)
    X = expected_resource(pol, alpha=alpha, R=R, P=P)
    return X, pol, vf


def price_iteration(users, alpha, *, R, P, schedule=None, tol=1e-3, max_iter=200,
                    lam0=0.0, n_users=None, vi_tol=1e-6) -> PriceResult:
    """Search the uniform price with projected subgradient steps.

    Each round every user solves its MDP at the current price and reports
    ``X``. Stops when the subgradient is within ``tol``, the price has
    stayed within ``tol`` for 5 rounds, or after ``max_iter`` rounds. The
    returned price is the best one seen (smallest |subgradient|, ties to the
    lower price); ``converged`` is False if ``max_iter`` ran out.
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    if not users:
        raise ValueError("need at least one user")
    schedule = schedule or harmonic_schedule()
    M = n_users or len(users)
    budget = 1.0 / (1.0 - alpha)
    lam = float(lam0)
    warm = [None] * len(users)
    history = []
    best = None
    recent = []
    converged = False
    k = 0
    for k in range(1, max_iter + 1):
        demands, policies, vfs = [], [], []
        for i, u in enumerate(users):
            X, pol, vf = user_demand(u, lam, alpha, M, R=R, P=P, tol=vi_tol, V0=warm[i])
            warm[i] = vf.values
            demands.append(X)
            policies.append(pol)
            vfs.append(vf)
        g = sum(demands) - budget
        history.append((k, lam, float(sum(demands))))
        score = (abs(g), lam)
        if best is None or score < best[0]:
            best = (score, lam, policies, demands, vfs)
        # a slack constraint at zero price is already optimal
        if abs(g) < tol or (lam == 0.0 and g <= 0):
            converged = True
            break
        recent.append(lam)
        if len(recent) > 5:
            recent.pop(0)
        if len(recent) == 5 and max(recent) - min(recent) < tol:
            converged = True
            break
        lam = subgradient_step(lam, schedule(k), sum(demands), alpha)
    _, lam_best, pols, dem, vfs = best
    return PriceResult(lam_best, pols, dem, converged, k, history, vfs)


def normalize_allocations(requested) -> np.ndarray:
    """Scale requested airtime fractions down proportionally when they exceed 1."""
    x = np.asarray(requested, dtype=float)
    if np.any(x < 0):
        raise ValueError("requested allocations must be non-negative")
    s = x.sum()
    if s <= 1.0:
        return x.copy()
    return x / s
