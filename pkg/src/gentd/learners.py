"""GenTD and GTD learners, their population objectives and fixed points.

Learner states are batched: ``theta`` has shape (n, num_params), one row per
independent run, and every step consumes a TransitionBatch with n rows.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .approx import DEFAULT_RADIUS, FeatureMap, project_ball
from .cases import GvfCase
from .density_ratio import DensityRatioState, dice_step, evaluate_ratio
from .gvf import BACKWARD, FORWARD, AssembledOperator, apply_gbo, block_mu_norm, alpha_norm
from .mdp import BehaviorDistribution, StateActionKernel, StationaryDistribution, TransitionBatch

__all__ = [
    "StepSchedule",
    "GenTdState",
    "GtdState",
    "GtdFixedPoint",
    "gentd_td_error",
    "gentd_step",
    "gtd_step",
    "gtd_fixed_point",
    "gtd_mean_system",
    "gtd_solution",
    "mspgbe",
    "mspbe",
    "estimation_error",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class StepSchedule:
    """``base * offset / (t + offset)``, or the constant ``base`` when offset is None."""

    base: float
    offset: Optional[float] = None

    def __post_init__(self):
        if self.base < 0:
            raise ValueError("step size base must be nonnegative")
        if self.offset is not None and self.offset <= 0:
            raise ValueError("step size offset must be positive")

    def __call__(self, t: int) -> float:
        if self.offset is None:
            return self.base
        return self.base * self.offset / (t + self.offset)


@dataclass(frozen=True)
class GenTdState:
    theta: np.ndarray
    ratio: DensityRatioState
    alpha: StepSchedule
    beta: StepSchedule
    t: int = 0
    radius: float = DEFAULT_RADIUS
    # optional known ratio table used in place of the learned estimate
    fixed_ratio: Optional[np.ndarray] = None

    @classmethod
    def create(cls, features: FeatureMap, ratio: DensityRatioState, alpha: StepSchedule, beta: StepSchedule,
               radius: float = DEFAULT_RADIUS, fixed_ratio=None, theta0=None) -> "GenTdState":
        n = ratio.batch
        theta = np.zeros((n, features.num_params)) if theta0 is None else np.broadcast_to(
            np.asarray(theta0, dtype=float), (n, features.num_params)).copy()
        fr = None if fixed_ratio is None else np.asarray(fixed_ratio, dtype=float)
        return cls(theta, ratio, alpha, beta, 0, radius, fr)


@dataclass(frozen=True)
class GtdState:
    theta: np.ndarray
    w: np.ndarray
    alpha: StepSchedule
    beta: StepSchedule
    t: int = 0
    radius: float = DEFAULT_RADIUS

    @classmethod
    def create(cls, features: FeatureMap, batch: int, alpha: StepSchedule, beta: StepSchedule,
               radius: float = DEFAULT_RADIUS, theta0=None) -> "GtdState":
        p = features.num_params
        theta = np.zeros((batch, p)) if theta0 is None else np.broadcast_to(
            np.asarray(theta0, dtype=float), (batch, p)).copy()
        return cls(theta, np.zeros((batch, p)), alpha, beta, 0, radius)


def _require_sampling(case: GvfCase) -> None:
    if not case.can_sample:
        raise ValueError(f"case {case.name or '<unnamed>'} has no sampling model")


def _as_batch(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return theta[None, :] if theta.ndim == 1 else theta


def _sides(case: GvfCase, sample: TransitionBatch):
    """(pair carrying the update features, pair fed through the coupling)."""
    if case.direction == FORWARD:
        return sample.pair, sample.next_pair
    return sample.next_pair, sample.pair


def gentd_td_error(case: GvfCase, features: FeatureMap, theta, sample: TransitionBatch) -> np.ndarray:
    """Per-sample TD error, shape (n, sum_i d_i)."""
    _require_sampling(case)
    theta = _as_batch(theta)
    if theta.shape[0] == 1 and len(sample) > 1:
        theta = np.broadcast_to(theta, (len(sample), theta.shape[1]))
    own, other = _sides(case, sample)
    s, a, s2, a2 = sample
    sig = case.sample_signal(s, a, s2, a2)
    m = case.sample_coupling(s, a, s2, a2)
    g_own = features.evaluate(own, theta)
    g_other = features.evaluate(other, theta)
    return sig + np.einsum("nij,nj->ni", m, g_other) - g_own


def _update_direction(case, features, theta, sample):
    """g(x, theta) = -phi^T delta at the direction-appropriate pair."""
    delta = gentd_td_error(case, features, theta, sample)
    own, _ = _sides(case, sample)
    return -features.transpose_apply(own, delta)


def gentd_step(state: GenTdState, case: GvfCase, features: FeatureMap, sample: TransitionBatch) -> GenTdState:
    t = state.t
    alpha, beta = state.alpha(t), state.beta(t)
    if state.fixed_ratio is not None:
        rho = state.fixed_ratio[sample.pair]
    else:
        rho = evaluate_ratio(state.ratio, sample.pair)
    ratio = dice_step(state.ratio, sample, beta)
    if alpha == 0.0:
        return replace(state, ratio=ratio, t=t + 1)
    g = _update_direction(case, features, state.theta, sample)
    theta = project_ball(state.theta - alpha * rho[:, None] * g, state.radius)
    return replace(state, theta=theta, ratio=ratio, t=t + 1)


def gtd_step(state: GtdState, case: GvfCase, features: FeatureMap, sample: TransitionBatch) -> GtdState:
    """Two-timescale gradient step on the behavior-weighted projected Bellman error.

    ``w`` tracks C^{-1} E_D[g] with C = E_D[phi^T phi] (it moves along g - l,
    whose mean vanishes there). With h = phi_other^T m^T phi_own w, the mean
    of g - h is the gradient of J(theta) = 0.5 ||E_D[g]||^2_{C^{-1}}, and theta
    steps against it.
    """
    t = state.t
    alpha, beta = state.alpha(t), state.beta(t)
    own, other = _sides(case, sample)
    s, a, s2, a2 = sample
    g = _update_direction(case, features, state.theta, sample)
    fw = features.evaluate(own, state.w)
    l = features.transpose_apply(own, fw)
    m = case.sample_coupling(s, a, s2, a2)
    h = features.transpose_apply(other, np.einsum("nji,nj->ni", m, fw))
    w = state.w + beta * (g - l)
    theta = state.theta
    if alpha != 0.0:
        theta = project_ball(theta - alpha * (g - h), state.radius)
    return replace(state, theta=theta, w=w, t=t + 1)


@dataclass(frozen=True)
class GtdFixedPoint:
    A: np.ndarray
    b: np.ndarray
    theta: np.ndarray


def _base(features) -> np.ndarray:
    if isinstance(features, FeatureMap):
        if len(features.blocks) != 1 or features.dims != (1,):
            raise ValueError("scalar fixed point needs a single scalar block")
        return features.blocks[0]
    f = np.asarray(features, dtype=float)
    return f[:, None] if f.ndim == 1 else f


def gtd_fixed_point(features, d, kernel: StateActionKernel, gamma: float, reward, direction: str = BACKWARD) -> GtdFixedPoint:
    """Closed-form GTD fixed point for a scalar value problem sampled from D.

    Backward: A = gamma Phi^T P^T Dbar Phi - Phi^T Dbar' Phi and
    b = Phi^T P^T Dbar R with Dbar' = diag(D^T P), i.e. the sample means of
    phi(s')(gamma phi(s) - phi(s'))^T and phi(s') r(s). Forward:
    A = Phi^T Dbar (gamma P - I) Phi, b = Phi^T Dbar R. theta = -A^{-1} b.
    """
    phi = _base(features)
    dd = d.probs if isinstance(d, BehaviorDistribution) else np.asarray(d, dtype=float)
    p = kernel.matrix if isinstance(kernel, StateActionKernel) else np.asarray(kernel, dtype=float)
    r = np.asarray(reward, dtype=float).reshape(-1)
    if direction == BACKWARD:
        d_next = dd @ p
        A = gamma * phi.T @ p.T @ (dd[:, None] * phi) - phi.T @ (d_next[:, None] * phi)
        b = phi.T @ p.T @ (dd * r)
    elif direction == FORWARD:
        A = phi.T @ (dd[:, None] * (gamma * p @ phi - phi))
        b = phi.T @ (dd * r)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError("GTD matrix is singular")
    theta = -np.linalg.solve(A, b)
    return GtdFixedPoint(A, b, theta)


def gtd_mean_system(case: GvfCase, features: FeatureMap, d, kernel: StateActionKernel):
    """Exact behavior-distribution means by enumeration.

    Returns (K, c, C) with E_D[g(x, theta)] = K theta + c and C = E_D[phi^T phi]
    taken at the update-side pair.
    """
    _require_sampling(case)
    dd = d.probs if isinstance(d, BehaviorDistribution) else np.asarray(d, dtype=float)
    p = kernel.matrix
    src, dst = np.nonzero(dd[:, None] * p)
    w = dd[src] * p[src, dst]
    A = case.num_actions
    s, a, s2, a2 = src // A, src % A, dst // A, dst % A
    sig = case.sample_signal(s, a, s2, a2)
    m = case.sample_coupling(s, a, s2, a2)
    rows = np.stack([features.row_matrix(i) for i in range(features.num_pairs)])
    if case.direction == FORWARD:
        own, other = src, dst
    else:
        own, other = dst, src
    phi_own, phi_other = rows[own], rows[other]
    # g = -phi_own^T (sig + m phi_other theta - phi_own theta)
    K = -np.einsum("n,nip,niq->pq", w, phi_own, np.einsum("nij,njq->niq", m, phi_other) - phi_own)
    c = -np.einsum("n,nip,ni->p", w, phi_own, sig)
    C = np.einsum("n,nip,niq->pq", w, phi_own, phi_own)
    return K, c, C


def gtd_solution(case: GvfCase, features: FeatureMap, d, kernel: StateActionKernel) -> np.ndarray:
    """Root of E_D[g]: where the GTD iterates settle."""
    K, c, _ = gtd_mean_system(case, features, d, kernel)
    return -np.linalg.solve(K, c)


def mspbe(theta, case: GvfCase, features: FeatureMap, d, kernel: StateActionKernel) -> np.ndarray:
    """0.5 ||E_D[g(x, theta)]||^2 in the C^{-1} norm."""
    K, c, C = gtd_mean_system(case, features, d, kernel)
    e = np.asarray(theta, dtype=float) @ K.T + c
    return 0.5 * np.einsum("...p,...p->...", e, np.linalg.solve(C, e.T).T)


def _sq_block_norm(v: np.ndarray, mu: np.ndarray, dims) -> np.ndarray:
    n = mu.size
    total = 0.0
    start = 0
    for d in dims:
        total = total + block_mu_norm(v[..., start:start + d * n], mu, d) ** 2
        start += d * n
    return total


def mspgbe(theta, op: AssembledOperator, features: FeatureMap, mu: StationaryDistribution) -> np.ndarray:
    """||Phi theta - Proj_mu T(Phi theta)||_mu^2 summed over blocks."""
    phi = features.matrix()
    u = np.concatenate([mu.lift(d) for d in features.dims])
    gram = phi.T @ (u[:, None] * phi)
    v = np.asarray(theta, dtype=float) @ phi.T
    tv = apply_gbo(op, v)
    rhs = (tv * u) @ phi
    coef = np.linalg.solve(gram, np.atleast_2d(rhs).T).T.reshape(rhs.shape)
    return _sq_block_norm(v - coef @ phi.T, mu.mu, features.dims)


def estimation_error(theta, features: FeatureMap, ground_truth, mu: StationaryDistribution, weights=None):
    """mu-weighted distance between the estimate and the ground truth.

    Without ``weights`` the per-block squared norms are pooled; with weights
    (a ContractionWeights or array) the alpha-norm is returned.
    """
    diff = features.values(theta) - np.asarray(ground_truth, dtype=float)
    if weights is not None:
        return alpha_norm(diff, weights, mu, features.dims)
    return np.sqrt(_sq_block_norm(diff, mu.mu, features.dims))


def save_checkpoint(directory, experiment: str, seed: int, iteration: int, state) -> Path:
    """Write learner parameters to ``<dir>/<experiment>_s<seed>_i<iteration>.npz``."""
    path = Path(directory) / f"{experiment}_s{seed}_i{iteration}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"theta": state.theta, "t": np.array(state.t)}
    if isinstance(state, GenTdState):
        arrays.update(w_rho=state.ratio.w_rho, w_f=state.ratio.w_f, eta=state.ratio.eta)
    else:
        arrays.update(w=state.w)
    np.savez(path, **arrays)
    return path


def load_checkpoint(directory, experiment: str, seed: int, iteration: int, template):
    """Restore parameters saved by :func:`save_checkpoint` into a copy of ``template``."""
    path = Path(directory) / f"{experiment}_s{seed}_i{iteration}.npz"
    with np.load(path) as z:
        if isinstance(template, GenTdState):
            ratio = replace(template.ratio, w_rho=z["w_rho"], w_f=z["w_f"], eta=z["eta"])
            return replace(template, theta=z["theta"], ratio=ratio, t=int(z["t"]))
        return replace(template, theta=z["theta"], w=z["w"], t=int(z["t"]))
