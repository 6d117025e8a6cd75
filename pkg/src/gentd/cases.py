"""Constructors for concrete GVF block systems and their per-sample operators.

Every sampled case carries two closures over batches of transitions
``(s, a, s2, a2)`` (integer arrays of equal shape (n,)):

* ``sample_signal`` returns the (n, sum_i d_i) signal sample;
* ``sample_coupling`` returns the (n, D, D) matrix applied to the estimate at
  the successor pair (forward) or the predecessor pair (backward).

For a forward case the conditional mean over (s2, a2) given (s, a) of
``signal + coupling @ G(s2, a2)`` must equal row (s, a) of ``B + M G``; for a
backward case the mean is over (s, a) given (s2, a2) under the reversed chain.
:func:`expected_backup` evaluates exactly that mean by enumeration.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .gvf import BACKWARD, FORWARD, GvfBlockSpec, backward_lift, block_offsets
from .mdp import (
    Policy,
    StateActionKernel,
    StationaryDistribution,
    TabularMdp,
    state_action_kernel,
    stationary_distribution,
)

__all__ = [
    "GvfCase",
    "canonical_case",
    "variance_case",
    "grad_q_case",
    "svg_case",
    "check_nonexpansive",
    "anomaly_case",
    "backward_value_case",
    "grad_logmu_case",
    "stationary_log_gradient",
    "expected_backup",
]


@dataclass(frozen=True)
class GvfCase:
    spec: GvfBlockSpec
    sample_signal: Optional[Callable] = None
    sample_coupling: Optional[Callable] = None
    num_actions: int = 1
    name: str = ""

    @property
    def direction(self) -> str:
        return self.spec.direction

    @property
    def can_sample(self) -> bool:
        return self.sample_signal is not None and self.sample_coupling is not None


def _pair(s, a, num_actions):
    return np.asarray(s) * num_actions + np.asarray(a)


def _scalar_coupling(value: float):
    def coupling(s, a, s2, a2):
        return np.full((np.shape(s)[0], 1, 1), value)
    return coupling


def _score_stack(pi: Policy) -> np.ndarray:
    """diag(grad Pi): column p holds grad_w log pi(p) in rows p*d_w .. (p+1)*d_w."""
    scores = pi.score_matrix()
    n, dw = scores.shape
    out = np.zeros((n * dw, n))
    for p in range(n):
        out[p * dw:(p + 1) * dw, p] = scores[p]
    return out


def canonical_case(mdp: TabularMdp, pi: Policy) -> GvfCase:
    """Plain Q-function: B = R, M = gamma P_pi."""
    A = mdp.num_actions
    r = mdp.reward_vector()
    spec = GvfBlockSpec((1,), (mdp.discount,), (r,), mdp.num_pairs)

    def signal(s, a, s2, a2):
        return r[_pair(s, a, A)][:, None]

    return GvfCase(spec, signal, _scalar_coupling(mdp.discount), A, "canonical")


def variance_case(mdp: TabularMdp, pi: Policy) -> GvfCase:
    """Q and second moment H of the return (variance is H - Q^2)."""
    A, g = mdp.num_actions, mdp.discount
    r = mdp.reward_vector()
    p = state_action_kernel(mdp, pi).matrix
    spec = GvfBlockSpec(
        (1, 1), (g, g * g), (r, r ** 2), mdp.num_pairs,
        couplings={(1, 0): 2.0 * g * r[:, None] * p},
    )

    def signal(s, a, s2, a2):
        rr = r[_pair(s, a, A)]
        return np.stack([rr, rr ** 2], axis=1)

    def coupling(s, a, s2, a2):
        rr = r[_pair(s, a, A)]
        m = np.zeros((rr.size, 2, 2))
        m[:, 0, 0] = g
        m[:, 1, 0] = 2.0 * g * rr
        m[:, 1, 1] = g * g
        return m

    return GvfCase(spec, signal, coupling, A, "variance")


def grad_q_case(mdp: TabularMdp, pi: Policy) -> GvfCase:
    """Q and its gradient with respect to the softmax weights."""
    if not pi.is_softmax:
        raise ValueError("gradient case needs a softmax-parameterized policy")
    A, g, n = mdp.num_actions, mdp.discount, mdp.num_pairs
    r = mdp.reward_vector()
    scores = pi.score_matrix()
    dw = scores.shape[1]
    p = state_action_kernel(mdp, pi).matrix
    a21 = g * np.kron(p, np.eye(dw)) @ _score_stack(pi)
    spec = GvfBlockSpec(
        (1, dw), (g, g), (r, np.zeros(n * dw)), n, couplings={(1, 0): a21},
    )
    eye = g * np.eye(dw)

    def signal(s, a, s2, a2):
        out = np.zeros((np.shape(s)[0], 1 + dw))
        out[:, 0] = r[_pair(s, a, A)]
        return out

    def coupling(s, a, s2, a2):
        m = np.zeros((np.shape(s)[0], 1 + dw, 1 + dw))
        m[:, 0, 0] = g
        m[:, 1:, 0] = g * scores[_pair(s2, a2, A)]
        m[:, 1:, 1:] = eye
        return m

    return GvfCase(spec, signal, coupling, A, "grad_q")


def svg_case(jacobians: Mapping[str, np.ndarray], kernel: StateActionKernel, gamma: float) -> GvfCase:
    """Stochastic value gradient system [Q_s; Q_a; grad_w Q] (no sampling model).

    ``jacobians`` holds stacked ``R_s``, ``R_a`` and the block matrices ``Pi_s``
    (d_s N x d_a N), ``Pi_w`` (d_w N x d_a N), ``F_s`` (d_s N x d_s N) and
    ``F_a`` (d_a N x d_s N). The third signal block is zero: the Pi_w Q_a term
    enters once, through the coupling.
    """
    n = kernel.num_pairs
    j = {k: np.asarray(v, dtype=float) for k, v in jacobians.items()}
    r_s, r_a = j["R_s"].reshape(-1), j["R_a"].reshape(-1)
    ds, da = r_s.size // n, r_a.size // n
    pi_w = j["Pi_w"]
    dw = pi_w.shape[0] // n
    pi_s = j.get("Pi_s", np.zeros((ds * n, da * n)))
    f_s = j.get("F_s", np.eye(ds * n))
    f_a = j.get("F_a", np.zeros((da * n, ds * n)))
    lift_s = np.kron(kernel.matrix, np.eye(ds))
    spec = GvfBlockSpec(
        (ds, da, dw),
        (gamma, gamma, gamma),
        (r_s + pi_s @ r_a, r_a, np.zeros(dw * n)),
        n,
        couplings={(1, 0): gamma * f_a @ lift_s, (2, 1): pi_w},
        left_factors={0: pi_s @ f_a + f_s},
    )
    return GvfCase(spec, name="svg")


def _mu_operator_norm(t: np.ndarray, mu: np.ndarray, trials: int, rng, iters: int = 1000) -> float:
    d = t.shape[0] // mu.size
    lift = np.repeat(mu, d)
    w = np.sqrt(lift)[:, None] * t / np.sqrt(lift)[None, :]
    v = rng.standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    wtw = w.T @ w
    for _ in range(iters):
        nxt = wtw @ v
        nrm = np.linalg.norm(nxt)
        if nrm == 0.0:
            break
        new = np.sqrt(nrm)
        v = nxt / nrm
        if abs(new - est) < 1e-15 * max(new, 1.0):
            est = new
            break
        est = new
    best = np.linalg.norm(w @ v)
    probes = rng.standard_normal((trials, w.shape[1]))
    ratios = np.linalg.norm(probes @ w.T, axis=1) / np.linalg.norm(probes, axis=1)
    return float(max(est, best, ratios.max(initial=0.0)))


def check_nonexpansive(pi_s, f_a, f_s, mu, trials: int = 100, seed: int = 0) -> bool:
    """Whether Pi_s F_a + F_s is non-expansive in the mu-weighted norm."""
    m = mu.mu if isinstance(mu, StationaryDistribution) else np.asarray(mu, dtype=float)
    t = np.asarray(pi_s, dtype=float) @ np.asarray(f_a, dtype=float) + np.asarray(f_s, dtype=float)
    rng = np.random.default_rng(seed)
    return _mu_operator_norm(t, m, trials, rng) <= 1.0 + 1e-9


def anomaly_case(cost, kernel: StateActionKernel, mu: StationaryDistribution, gamma: float, num_actions: int = 1) -> GvfCase:
    """Backward accumulation of a per-pair cost (anomaly detection)."""
    cost = np.asarray(cost, dtype=float).reshape(-1)
    if gamma >= 1.0:
        raise ValueError("anomaly case needs gamma < 1")
    spec = GvfBlockSpec((1,), (gamma,), (cost,), kernel.num_pairs, direction=BACKWARD)

    def signal(s, a, s2, a2):
        return cost[_pair(s2, a2, num_actions)][:, None]

    return GvfCase(spec, signal, _scalar_coupling(gamma), num_actions, "anomaly")


def backward_value_case(mdp: TabularMdp, pi: Policy, mu: Optional[StationaryDistribution] = None) -> GvfCase:
    """Backward value whose sampled signal is the predecessor's reward.

    The signal block is the reversed-chain mean of the predecessor reward,
    so the fixed point is U^{-1}(I - gamma P^T)^{-1} P^T U R.
    """
    A, g = mdp.num_actions, mdp.discount
    kernel = state_action_kernel(mdp, pi)
    mu = mu or stationary_distribution(kernel)
    r = mdp.reward_vector()
    rev = backward_lift(kernel, mu)
    spec = GvfBlockSpec((1,), (g,), (rev @ r,), mdp.num_pairs, direction=BACKWARD)

    def signal(s, a, s2, a2):
        return r[_pair(s, a, A)][:, None]

    return GvfCase(spec, signal, _scalar_coupling(g), A, "backward_value")


def grad_logmu_case(mdp: TabularMdp, pi: Policy) -> GvfCase:
    """Gradient of the log stationary distribution (backward, unit discount)."""
    if not pi.is_softmax:
        raise ValueError("gradient case needs a softmax-parameterized policy")
    A, n = mdp.num_actions, mdp.num_pairs
    scores = pi.score_matrix()
    dw = scores.shape[1]
    spec = GvfBlockSpec(
        (dw,), (1.0,), (scores.reshape(-1),), n, direction=BACKWARD, allow_unit_discount=True,
    )
    eye = np.eye(dw)

    def signal(s, a, s2, a2):
        return scores[_pair(s2, a2, A)]

    def coupling(s, a, s2, a2):
        return np.broadcast_to(eye, (np.shape(s)[0], dw, dw))

    return GvfCase(spec, signal, coupling, A, "grad_logmu")


def stationary_log_gradient(ground_truth: np.ndarray, mu: StationaryDistribution, dw: int) -> np.ndarray:
    """Shift a unit-discount solution to the representative with zero mu-mean.

    That representative is the actual gradient of log mu (differentiating
    sum mu = 1 gives E_mu[grad log mu] = 0).
    """
    g = np.asarray(ground_truth, dtype=float).reshape(mu.num_pairs, dw)
    return (g - mu.mu @ g).reshape(-1)


def expected_backup(case: GvfCase, kernel: StateActionKernel, values: np.ndarray, mu: Optional[StationaryDistribution] = None) -> np.ndarray:
    """Exact sampling-model mean of signal + coupling @ G(neighbour) for each pair.

    ``values`` is a stacked GVF vector. Forward cases average over successors,
    backward cases over predecessors of the reversed chain. The result is a
    stacked vector comparable with ``B + M values``.
    """
    if not case.can_sample:
        raise ValueError("case has no sampling model")
    spec = case.spec
    n, A = spec.num_pairs, case.num_actions
    dims = spec.dims
    off = block_offsets(dims, n)
    per_pair = np.concatenate(
        [values[off[i]:off[i + 1]].reshape(n, d) for i, d in enumerate(dims)], axis=1
    )
    if spec.direction == FORWARD:
        weights = kernel.matrix
    else:
        if mu is None:
            raise ValueError("backward enumeration needs mu")
        weights = backward_lift(kernel, mu)
    out = np.zeros((n, sum(dims)))
    for p in range(n):
        nbr = np.nonzero(weights[p])[0]
        if nbr.size == 0:
            continue
        w = weights[p, nbr]
        if spec.direction == FORWARD:
            s, a = np.full(nbr.size, p // A), np.full(nbr.size, p % A)
            s2, a2 = nbr // A, nbr % A
        else:
            s, a = nbr // A, nbr % A
            s2, a2 = np.full(nbr.size, p // A), np.full(nbr.size, p % A)
        sig = case.sample_signal(s, a, s2, a2)
        cpl = case.sample_coupling(s, a, s2, a2)
        term = sig + np.einsum("nij,nj->ni", cpl, per_pair[nbr])
        out[p] = w @ term
    parts = []
    start = 0
    for d in dims:
        parts.append(out[:, start:start + d].reshape(-1))
        start += d
    return np.concatenate(parts)
