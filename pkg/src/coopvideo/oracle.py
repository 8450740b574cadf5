"""Random small MDP instances for brute-force checks of the scheduler.

The key check: letting the optimizer pick the cooperation mode explicitly
each slot never beats simply using the faster mode every slot.
"""

from __future__ import annotations

import numpy as np

from .mdp import (
    AugmentedInstance,
    TrafficChain,
    augmented_brute_force,
    opportunistic_pmf,
    value_iteration,
)

__all__ = ["random_chain", "random_augmented_instance", "opportunistic_values",
           "random_oracle_instances"]


def random_chain(rng, max_states=4, max_packets=2) -> TrafficChain:
    """Chain with 1..max_states states, actions sending 0..max_packets packets."""
    S = int(rng.integers(1, max_states + 1))
    tables = []
    for _ in range(S):
        acts = []
        for n in range(int(rng.integers(1, max_packets + 2))):
            u = 0.0 if n == 0 else float(rng.uniform(0, 5) * n)
            k = int(rng.integers(1, S + 1))
            nxt = rng.choice(S, k, replace=False)
            p = rng.dirichlet(np.ones(k))
            acts.append((n, u, dict(zip(nxt.tolist(), p.tolist()))))
        tables.append(acts)
    return TrafficChain.from_tables(tables)


def random_augmented_instance(rng, alpha, max_states=4, max_channels=3, max_rate=3):
    """Small instance; rates are packets per slot (``R = P = 1``)."""
    chain = random_chain(rng, max_states)
    nC = int(rng.integers(1, max_channels + 1))
    rd = rng.integers(0, max_rate + 1, nC).astype(float)
    rc = rng.integers(0, max_rate + 1, nC).astype(float)
    return AugmentedInstance(chain, rng.dirichlet(np.ones(nC)), rd, rc,
                             lam=float(rng.uniform(0, 3)), alpha=alpha,
                             n_users=int(rng.integers(1, 4)))


def opportunistic_values(inst: AugmentedInstance, tol=1e-12) -> np.ndarray:
    """Values of the MDP that always uses ``max(direct, coop)``, per channel state."""
    pmf, idx = opportunistic_pmf(inst)
    vf, _ = value_iteration(inst.chain, pmf, inst.lam, inst.alpha, inst.n_users,
                            R=inst.R, P=inst.P, tol=tol, max_iter=1_000_000)
    return vf.values[:, idx]


def random_oracle_instances(n, seed=0, alphas=(0.0, 0.5, 0.9)) -> list:
    """Solve ``n`` random instances both ways; one result dict per instance.

    ``gap`` is the largest (augmented - opportunistic) value difference.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        alpha = alphas[i % len(alphas)]
        inst = random_augmented_instance(rng, alpha)
        va = augmented_brute_force(inst)
        vo = opportunistic_values(inst)
        diff = va - vo
        j = np.unravel_index(np.argmax(np.abs(diff)), diff.shape)
        rows.append({
            "instance": i,
            "alpha": alpha,
            "n_states": inst.chain.n_states,
            "n_channels": len(inst.channel_probs),
            "augmented": float(va[j]),
            "opportunistic": float(vo[j]),
            "gap": float(np.max(diff)) if abs(np.max(diff)) >= abs(np.min(diff)) else float(np.min(diff)),
        })
    return rows
