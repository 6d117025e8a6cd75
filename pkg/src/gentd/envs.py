"""Built-in problems: the Baird-style star MDP and the three-state chain."""
from __future__ import annotations

import numpy as np

from .mdp import BehaviorDistribution, Policy, StationaryDistribution, TabularMdp

__all__ = [
    "BAIRD_BEHAVIOR",
    "BAIRD_WEIGHTS",
    "EXAMPLE1_TRANSITION",
    "EXAMPLE1_REWARD",
    "EXAMPLE1_DISCOUNT",
    "build_baird",
    "build_example1",
    "backward_value",
]

# action 0 = dash (uniform over states 0..5, reward 1), action 1 = solid (to state 6, reward 0)
BAIRD_BEHAVIOR = np.array([
    0.2, 0.1,
    0.2, 0.1,
    0.04, 0.04,
    0.04, 0.04,
    0.04, 0.04,
    0.04, 0.04,
    0.04, 0.04,
])
BAIRD_WEIGHTS = np.tile([0.0, 1.8], 7)


def build_baird(discount: float = 0.99):
    S, A = 7, 2
    p = np.zeros((S, A, S))
    p[:, 0, :6] = 1.0 / 6.0
    p[:, 1, 6] = 1.0
    r = np.zeros((S, A))
    r[:, 0] = 1.0
    mdp = TabularMdp(p, r, discount)
    pi = Policy.softmax(BAIRD_WEIGHTS, S, A)
    d = BehaviorDistribution(BAIRD_BEHAVIOR)
    return mdp, pi, d


# Row-stochastic orientation: row s is P(. | s). With this orientation and a
# discount of 0.9 the backward value formula yields [8.1555, 9.0389, 9.0184];
# the transposed matrix is not stochastic and 0.99 gives different numbers.
EXAMPLE1_TRANSITION = np.array([
    [0.1, 0.9, 0.0],
    [0.1, 0.0, 0.9],
    [0.0, 0.1, 0.9],
])
EXAMPLE1_REWARD = np.array([1.0, 0.0, 1.0])
EXAMPLE1_DISCOUNT = 0.9


def build_example1(discount: float = EXAMPLE1_DISCOUNT):
    """Three-state single-action chain with uniform behavior distribution."""
    mdp = TabularMdp(EXAMPLE1_TRANSITION[:, None, :], EXAMPLE1_REWARD[:, None], discount)
    return mdp, Policy.uniform(3, 1), BehaviorDistribution.uniform(3)


def backward_value(transition: np.ndarray, reward: np.ndarray, mu, discount: float) -> np.ndarray:
    """U^{-1} (I - gamma P^T)^{-1} P^T U R for a single-action chain."""
    m = mu.mu if isinstance(mu, StationaryDistribution) else np.asarray(mu, dtype=float)
    p = np.asarray(transition, dtype=float)
    rhs = p.T @ (m * np.asarray(reward, dtype=float))
    return np.linalg.solve(np.eye(p.shape[0]) - discount * p.T, rhs) / m
