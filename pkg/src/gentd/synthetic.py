"""Random small problems for property checks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .approx import FeatureMap
from .gvf import BACKWARD, FORWARD, GvfBlockSpec
from .mdp import (
    Policy,
    StateActionKernel,
    StationaryDistribution,
    TabularMdp,
    state_action_kernel,
    stationary_distribution,
)

__all__ = ["RandomProblem", "random_mdp", "random_problem", "random_features"]


@dataclass(frozen=True)
class RandomProblem:
    mdp: TabularMdp
    policy: Policy
    kernel: StateActionKernel
    mu: StationaryDistribution
    spec: GvfBlockSpec


def random_mdp(rng: np.random.Generator, num_states: int, num_actions: int, discount: float = 0.9):
    p = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    r = rng.standard_normal((num_states, num_actions))
    pi = Policy(rng.dirichlet(np.ones(num_actions), size=num_states))
    return TabularMdp(p, r, discount), pi


def random_problem(
    rng: np.random.Generator,
    k: Optional[int] = None,
    direction: Optional[str] = None,
    max_pairs: int = 30,
    gamma_range=(0.5, 0.95),
    coupling_scale: float = 1.0,
    max_dim: int = 2,
) -> RandomProblem:
    """Random ergodic chain plus a random causally filtered block system.

    Couplings are Gaussian matrices rescaled so that their mu-induced norms
    equal ``coupling_scale`` times a uniform draw from (0, 1).
    """
    while True:
        S = int(rng.integers(2, 6))
        A = int(rng.integers(1, 4))
        if S * A <= max_pairs:
            break
    mdp, pi = random_mdp(rng, S, A)
    kernel = state_action_kernel(mdp, pi)
    mu = stationary_distribution(kernel)
    n = S * A
    k = int(rng.integers(1, 4)) if k is None else k
    direction = (FORWARD, BACKWARD)[int(rng.integers(2))] if direction is None else direction
    dims = tuple(int(d) for d in rng.integers(1, max_dim + 1, size=k))
    gammas = tuple(float(g) for g in rng.uniform(*gamma_range, size=k))
    signals = tuple(rng.standard_normal(d * n) for d in dims)
    couplings = {}
    for i in range(k):
        for j in range(i):
            a = rng.standard_normal((dims[i] * n, dims[j] * n))
            left = np.sqrt(np.repeat(mu.mu, dims[i]))
            right = 1.0 / np.sqrt(np.repeat(mu.mu, dims[j]))
            nrm = np.linalg.norm(left[:, None] * a * right[None, :], 2)
            couplings[(i, j)] = a * (coupling_scale * rng.uniform() / nrm)
    spec = GvfBlockSpec(dims, gammas, signals, n, couplings=couplings, direction=direction)
    return RandomProblem(mdp, pi, kernel, mu, spec)


def random_features(rng: np.random.Generator, spec: GvfBlockSpec, incomplete: bool = False) -> FeatureMap:
    """Random full-rank bases; incomplete ones have fewer columns than pairs."""
    n = spec.num_pairs
    bases = []
    for _ in spec.dims:
        kk = int(rng.integers(1, n)) if incomplete and n > 1 else int(rng.integers(1, n + 1))
        bases.append(rng.standard_normal((n, kk)))
    return FeatureMap(tuple(bases), spec.dims)
