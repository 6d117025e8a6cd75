"""Primal-dual estimation of the density ratio mu_pi / D from off-policy samples.

Parameters are batched: ``w_rho`` and ``w_f`` have shape (n, d_rho) and ``eta``
has shape (n,), one row per independent run.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .approx import DEFAULT_RADIUS, project_ball
from .mdp import BehaviorDistribution, StateActionKernel, StationaryDistribution

logger = logging.getLogger(__name__)

__all__ = [
    "DensityRatioState",
    "init_ratio_state",
    "dice_step",
    "evaluate_ratio",
    "ratio_table",
    "true_ratio",
    "dice_loss",
    "ratio_system_singular_values",
]


@dataclass(frozen=True)
class DensityRatioState:
    w_rho: np.ndarray
    w_f: np.ndarray
    eta: np.ndarray
    features: np.ndarray
    radius: float = DEFAULT_RADIUS
    clip: bool = False
    l2: float = 0.0

    @property
    def batch(self) -> int:
        return self.w_rho.shape[0]


def init_ratio_state(features: np.ndarray, batch: int = 1, radius: float = DEFAULT_RADIUS,
                     clip: bool = False, l2: float = 0.0, w_rho0: Optional[np.ndarray] = None) -> DensityRatioState:
    features = np.asarray(features, dtype=float)
    if np.linalg.matrix_rank(features) < features.shape[1]:
        raise ValueError("ratio features must have linearly independent columns")
    k = features.shape[1]
    w_rho = np.zeros((batch, k)) if w_rho0 is None else np.broadcast_to(np.asarray(w_rho0, dtype=float), (batch, k)).copy()
    return DensityRatioState(w_rho, np.zeros((batch, k)), np.zeros(batch), features, radius, clip, l2)


def dice_step(state: DensityRatioState, sample, beta: float) -> DensityRatioState:
    """One simultaneous primal-dual step; ``sample`` is a TransitionBatch with one row per run."""
    s_idx, s2_idx = sample.pair, sample.next_pair
    psi = state.features[s_idx]
    psi2 = state.features[s2_idx]
    rho = np.einsum("nk,nk->n", psi, state.w_rho)
    f = np.einsum("nk,nk->n", psi, state.w_f)
    f2 = np.einsum("nk,nk->n", psi2, state.w_f)
    eta = state.eta
    delta_bar = rho[:, None] * (psi2 - psi)
    eta_new = eta + beta * (rho - 1.0 - eta)
    w_f = state.w_f + beta * (delta_bar - f[:, None] * psi)
    grad = (f2 - f + eta)[:, None] * psi
    if state.l2:
        grad = grad + state.l2 * state.w_rho
    w_rho = project_ball(state.w_rho - beta * grad, state.radius)
    return replace(state, w_rho=w_rho, w_f=w_f, eta=eta_new)


def evaluate_ratio(state: DensityRatioState, idx) -> np.ndarray:
    """psi(pair)^T w_rho for each run; idx is an array of pair indices of shape (n,)."""
    val = np.einsum("nk,nk->n", state.features[np.asarray(idx)], state.w_rho)
    return np.maximum(val, 0.0) if state.clip else val


def ratio_table(state: DensityRatioState) -> np.ndarray:
    """Estimated ratio at every pair, shape (n, N)."""
    val = state.w_rho @ state.features.T
    return np.maximum(val, 0.0) if state.clip else val


def true_ratio(mu, d) -> np.ndarray:
    m = mu.mu if isinstance(mu, StationaryDistribution) else np.asarray(mu, dtype=float)
    dd = d.probs if isinstance(d, BehaviorDistribution) else np.asarray(d, dtype=float)
    return m / dd


def dice_loss(params: Tuple[np.ndarray, np.ndarray, float], features: np.ndarray, d, kernel: StateActionKernel) -> float:
    """Exact population value of the min-max objective at (w_rho, w_f, eta)."""
    w_rho, w_f, eta = params
    dd = d.probs if isinstance(d, BehaviorDistribution) else np.asarray(d, dtype=float)
    rho = features @ np.asarray(w_rho, dtype=float)
    f = features @ np.asarray(w_f, dtype=float)
    tau = dd * rho
    return float(
        tau @ (kernel.matrix @ f) - tau @ f - 0.5 * dd @ f ** 2 + eta * (tau.sum() - 1.0) - 0.5 * eta ** 2
    )


def ratio_system_singular_values(features: np.ndarray, d, kernel: StateActionKernel) -> Tuple[float, float]:
    """Smallest singular values of A = E_D[psi (psi - psi')^T] and of the full saddle system.

    The saddle system adds the normalization multiplier; it can be
    well-posed even when A alone is singular (tabular features always make A
    singular because constants lie in the kernel of I - P_pi).
    """
    dd = d.probs if isinstance(d, BehaviorDistribution) else np.asarray(d, dtype=float)
    psi = np.asarray(features, dtype=float)
    a = psi.T @ (dd[:, None] * (psi - kernel.matrix @ psi))
    c = psi.T @ (dd[:, None] * psi)
    m = psi.T @ dd
    k = psi.shape[1]
    # stationarity conditions in (w_rho, w_f, eta)
    sys = np.zeros((2 * k + 1, 2 * k + 1))
    sys[:k, k:2 * k] = -a
    sys[:k, 2 * k] = m
    sys[k:2 * k, :k] = -a.T
    sys[k:2 * k, k:2 * k] = -c
    sys[2 * k, :k] = m
    sys[2 * k, 2 * k] = -1.0
    sa = float(np.linalg.svd(a, compute_uv=False)[-1])
    ss = float(np.linalg.svd(sys, compute_uv=False)[-1])
    if ss < 1e-8:
        logger.warning("density-ratio saddle system is near singular (sigma_min=%.2e)", ss)
    elif sa < 1e-8:
        logger.debug("A is singular (sigma_min=%.2e) but the normalized saddle system is not", sa)
    return sa, ss
