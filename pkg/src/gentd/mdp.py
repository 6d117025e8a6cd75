"""Finite MDPs, target-policy kernels, stationary distributions and sampling.

State-action pairs are flattened as ``idx = s * num_actions + a`` everywhere in
the package; every Kronecker lift relies on this ordering.
"""
from __future__ import annotations

import configparser
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "NonErgodicError",
    "TabularMdp",
    "Policy",
    "BehaviorDistribution",
    "StateActionKernel",
    "StationaryDistribution",
    "state_action_kernel",
    "stationary_distribution",
    "TransitionBatch",
    "sample_transition",
    "sample_transitions",
    "q_function",
    "softmax_score",
    "load_problem",
]

_ROW_TOL = 1e-12
_POSITIVE_TOL = 1e-14


class NonErgodicError(ValueError):
    """Raised when the stationary solve signals a reducible or periodic chain."""


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_rows(mat: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(mat)):
        raise ValueError(f"{name} has non-finite entries")
    if np.any(mat < 0):
        raise ValueError(f"{name} has negative entries")
    err = np.max(np.abs(mat.sum(axis=-1) - 1.0))
    if err > _ROW_TOL:
        raise ValueError(f"{name} rows do not sum to 1 (max error {err:.3g})")


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with transition tensor ``transition[s, a, s']``."""

    transition: np.ndarray
    reward: np.ndarray
    discount: float

    def __post_init__(self):
        p = _frozen(self.transition)
        r = _frozen(self.reward)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        if r.shape != p.shape[:2]:
            raise ValueError(f"reward shape {r.shape} does not match {p.shape[:2]}")
        _check_rows(p, "transition")
        if not np.all(np.isfinite(r)):
            raise ValueError("reward table has non-finite entries")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must lie in (0, 1], got {self.discount}")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    def reward_vector(self) -> np.ndarray:
        return self.reward.reshape(-1)

    def with_discount(self, discount: float) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward, discount)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class Policy:
    """Target policy ``probs[s, a] = pi(a|s)``, optionally softmax-parameterized.

    With ``weights`` set, the logits are ``weights[s * A + a]`` and ``probs`` is
    always recomputed from them.
    """

    probs: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if self.weights is not None:
            w = _frozen(self.weights).reshape(-1)
            if w.size != probs.size:
                raise ValueError("softmax weights must have one entry per state-action pair")
            probs = _softmax_rows(w.reshape(probs.shape))
            object.__setattr__(self, "weights", w)
        if probs.ndim != 2:
            raise ValueError("policy probs must be a |S| x |A| matrix")
        _check_rows(probs, "policy")
        object.__setattr__(self, "probs", _frozen(probs))

    @classmethod
    def softmax(cls, weights, num_states: int, num_actions: int) -> "Policy":
        w = np.asarray(weights, dtype=float).reshape(num_states, num_actions)
        return cls(probs=np.full((num_states, num_actions), 1.0 / num_actions), weights=w.reshape(-1))

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "Policy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]

    @property
    def is_softmax(self) -> bool:
        return self.weights is not None

    def score_matrix(self) -> np.ndarray:
        """Rows are grad_w log pi(s, a) for every pair, shape (S*A, S*A)."""
        if not self.is_softmax:
            raise ValueError("score function requires a softmax-parameterized policy")
        S, A = self.probs.shape
        out = np.zeros((S * A, S * A))
        for s in range(S):
            block = slice(s * A, (s + 1) * A)
            out[block, block] = np.eye(A) - self.probs[s][None, :]
        return out

    def perturbed(self, delta: np.ndarray) -> "Policy":
        if not self.is_softmax:
            raise ValueError("only softmax policies can be perturbed")
        return Policy(self.probs, self.weights + np.asarray(delta, dtype=float))


def softmax_score(pi: Policy, s: int, a: int) -> np.ndarray:
    """Analytic grad_w log pi_w(a|s)."""
    if not pi.is_softmax:
        raise ValueError("score function requires a softmax-parameterized policy")
    A = pi.num_actions
    g = np.zeros(pi.num_states * A)
    g[s * A:(s + 1) * A] = -pi.probs[s]
    g[s * A + a] += 1.0
    return g


@dataclass(frozen=True)
class BehaviorDistribution:
    """Sampling distribution D over flattened state-action pairs."""

    probs: np.ndarray

    def __post_init__(self):
        d = _frozen(self.probs).reshape(-1)
        if np.any(d <= 0):
            raise ValueError("behavior distribution must be strictly positive")
        if abs(d.sum() - 1.0) > _ROW_TOL:
            raise ValueError(f"behavior distribution sums to {d.sum()!r}, not 1")
        object.__setattr__(self, "probs", d)

    @classmethod
    def uniform(cls, n: int) -> "BehaviorDistribution":
        return cls(np.full(n, 1.0 / n))

    @property
    def num_pairs(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class StateActionKernel:
    """Row-stochastic P_pi over flattened state-action pairs."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _frozen(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("kernel must be square")
        _check_rows(m, "kernel")
        object.__setattr__(self, "matrix", m)

    @property
    def num_pairs(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class StationaryDistribution:
    mu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen(self.mu).reshape(-1))

    @property
    def num_pairs(self) -> int:
        return self.mu.size

    def lift(self, d: int) -> np.ndarray:
        """Diagonal of diag(mu) kron I_d."""
        return np.repeat(self.mu, d)

    def lift_matrix(self, d: int) -> np.ndarray:
        return np.diag(self.lift(d))


def state_action_kernel(mdp: TabularMdp, pi: Policy) -> StateActionKernel:
    if pi.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(
            f"policy shape {pi.probs.shape} does not match MDP ({mdp.num_states}, {mdp.num_actions})"
        )
    # P_pi[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')
    m = mdp.transition[:, :, :, None] * pi.probs[None, None, :, :]
    return StateActionKernel(m.reshape(mdp.num_pairs, mdp.num_pairs))


def _power_iteration(p: np.ndarray, iters: int = 100_000, tol: float = 1e-14) -> np.ndarray:
    mu = np.full(p.shape[0], 1.0 / p.shape[0])
    for _ in range(iters):
        nxt = mu @ p
        # averaging kills periodic oscillation without moving the fixed point
        nxt = 0.5 * (nxt + mu)
        if np.max(np.abs(nxt - mu)) < tol:
            return nxt / nxt.sum()
        mu = nxt
    raise NonErgodicError("power iteration for the stationary distribution did not converge")


def stationary_distribution(kernel: StateActionKernel, tol: float = 1e-10) -> StationaryDistribution:
    p = kernel.matrix
    n = p.shape[0]
    system = np.vstack([p.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    mu, _, rank, _ = np.linalg.lstsq(system, rhs, rcond=None)
    resid = np.max(np.abs(mu @ p - mu))
    if rank < n or resid > tol:
        logger.debug("stationary solve ill-conditioned (rank %d, residual %.2e); power iteration", rank, resid)
        mu = _power_iteration(p)
        resid = np.max(np.abs(mu @ p - mu))
        if resid > tol:
            raise NonErgodicError(f"stationary residual {resid:.3g} exceeds {tol}")
    # entries at round-off level mean the pair is transient, not merely rare
    if np.any(mu <= _POSITIVE_TOL):
        raise NonErgodicError("stationary distribution has non-positive entries; chain is not ergodic")
    return StationaryDistribution(mu / mu.sum())


@dataclass(frozen=True)
class TransitionBatch:
    """Arrays of sampled (s, a, s', a'); iterates as that 4-tuple."""

    s: np.ndarray
    a: np.ndarray
    s2: np.ndarray
    a2: np.ndarray
    num_actions: int

    def __iter__(self):
        return iter((self.s, self.a, self.s2, self.a2))

    def __len__(self) -> int:
        return int(np.shape(self.s)[0])

    @property
    def pair(self) -> np.ndarray:
        return self.s * self.num_actions + self.a

    @property
    def next_pair(self) -> np.ndarray:
        return self.s2 * self.num_actions + self.a2

    def take(self, sel) -> "TransitionBatch":
        return TransitionBatch(self.s[sel], self.a[sel], self.s2[sel], self.a2[sel], self.num_actions)


def sample_transitions(
    d: BehaviorDistribution,
    mdp: TabularMdp,
    pi: Policy,
    rng: np.random.Generator,
    size: int,
) -> TransitionBatch:
    """Draw ``size`` i.i.d. tuples (s, a, s', a') with (s,a)~D, s'~P, a'~pi."""
    if d.num_pairs != mdp.num_pairs:
        raise ValueError("behavior distribution does not match the MDP")
    A = mdp.num_actions
    idx = rng.choice(d.num_pairs, size=size, p=d.probs)
    s, a = np.divmod(idx, A)
    cum_p = np.cumsum(mdp.transition, axis=2)
    u = rng.random(size)
    s2 = np.minimum((u[:, None] >= cum_p[s, a]).sum(axis=1), mdp.num_states - 1)
    cum_pi = np.cumsum(pi.probs, axis=1)
    u = rng.random(size)
    a2 = np.minimum((u[:, None] >= cum_pi[s2]).sum(axis=1), A - 1)
    return TransitionBatch(s, a, s2, a2, A)


def sample_transition(d: BehaviorDistribution, mdp: TabularMdp, pi: Policy, rng: np.random.Generator):
    s, a, s2, a2 = sample_transitions(d, mdp, pi, rng, 1)
    return int(s[0]), int(a[0]), int(s2[0]), int(a2[0])


def q_function(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    if mdp.discount >= 1.0:
        raise np.linalg.LinAlgError("q_function needs discount < 1")
    p = state_action_kernel(mdp, pi).matrix
    return np.linalg.solve(np.eye(mdp.num_pairs) - mdp.discount * p, mdp.reward_vector())


# --- plain-text problem files -------------------------------------------------

def _parse_table(text: str) -> np.ndarray:
    rows = [line.replace(",", " ").split() for line in text.strip().splitlines() if line.strip()]
    return np.array([[float(x) for x in row] for row in rows])


def load_problem(source) -> Tuple[TabularMdp, Policy, BehaviorDistribution]:
    """Read an MDP, target policy and behavior distribution from an INI-style file.

    Sections: ``[mdp]`` with ``num_states``, ``num_actions``, ``discount``,
    ``reward`` (S rows of A numbers) and ``transition`` (S*A rows of S numbers,
    one row per flattened pair); ``[policy]`` with either ``probs`` (S rows) or
    ``softmax_weights`` (S*A numbers); optional ``[behavior]`` with ``probs``
    (S*A numbers, uniform when absent).
    """
    cp = configparser.ConfigParser()
    if isinstance(source, (str, Path)) and Path(source).exists():
        text = Path(source).read_text()
    elif isinstance(source, io.IOBase):
        text = source.read()
    else:
        text = str(source)
    cp.read_string(text)
    m = cp["mdp"]
    S, A = m.getint("num_states"), m.getint("num_actions")
    trans = _parse_table(m["transition"]).reshape(S, A, S)
    reward = _parse_table(m["reward"]).reshape(S, A)
    mdp = TabularMdp(trans, reward, m.getfloat("discount"))
    pol = cp["policy"] if cp.has_section("policy") else {}
    if "softmax_weights" in pol:
        pi = Policy.softmax(_parse_table(pol["softmax_weights"]).reshape(-1), S, A)
    elif "probs" in pol:
        pi = Policy(_parse_table(pol["probs"]).reshape(S, A))
    else:
        pi = Policy.uniform(S, A)
    if cp.has_section("behavior") and "probs" in cp["behavior"]:
        d = BehaviorDistribution(_parse_table(cp["behavior"]["probs"]).reshape(-1))
    else:
        d = BehaviorDistribution.uniform(S * A)
    return mdp, pi, d
