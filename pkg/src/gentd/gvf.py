"""Block general Bellman operators, ground-truth solves and norm machinery.

A stacked GVF vector lists block 1 for all pairs, then block 2, and so on.
Inside block ``i`` the ``d_i`` coordinates of one pair are contiguous, which
matches the lift ``P kron I_{d_i}``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .mdp import StateActionKernel, StationaryDistribution

logger = logging.getLogger(__name__)

__all__ = [
    "SingularOperatorError",
    "RankDeficientError",
    "GvfBlockSpec",
    "AssembledOperator",
    "ContractionWeights",
    "assemble",
    "backward_lift",
    "spectral_radius",
    "solve_ground_truth",
    "apply_gbo",
    "coupling_bound",
    "contraction_weights",
    "block_mu_norm",
    "alpha_norm",
    "monotonicity_constant",
    "monotonicity_matrix",
    "population_update",
    "projected_fixed_point",
]

FORWARD = "forward"
BACKWARD = "backward"


class SingularOperatorError(np.linalg.LinAlgError):
    pass


class RankDeficientError(ValueError):
    pass


def block_offsets(dims: Sequence[int], num_pairs: int) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([d * num_pairs for d in dims])])


@dataclass(frozen=True)
class GvfBlockSpec:
    """Causally filtered block system.

    ``couplings[(i, j)]`` (0-based, ``j < i``) is the ``d_i N x d_j N`` matrix
    feeding block ``j`` into block ``i``. ``left_factors[i]`` optionally
    premultiplies diagonal block ``i`` (used by the stochastic value gradient
    case, whose first diagonal block is not a pure lift).
    """

    dims: Tuple[int, ...]
    discounts: Tuple[float, ...]
    signals: Tuple[np.ndarray, ...]
    num_pairs: int
    couplings: Mapping[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    direction: str = FORWARD
    allow_unit_discount: bool = False
    left_factors: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        gammas = tuple(float(g) for g in self.discounts)
        if len(dims) != len(gammas) or len(dims) != len(self.signals):
            raise ValueError("dims, discounts and signals must have one entry per block")
        if not dims or min(dims) < 1:
            raise ValueError("block dimensions must be positive")
        if self.direction not in (FORWARD, BACKWARD):
            raise ValueError(f"direction must be 'forward' or 'backward', got {self.direction!r}")
        for g in gammas:
            if not 0.0 <= g <= 1.0:
                raise ValueError(f"discount {g} outside [0, 1]")
            if g == 1.0 and not self.allow_unit_discount:
                raise ValueError("unit discount requires allow_unit_discount=True")
        n = self.num_pairs
        signals = []
        for i, (b, d) in enumerate(zip(self.signals, dims)):
            b = np.array(b, dtype=float).reshape(-1)
            if b.size != d * n:
                raise ValueError(f"signal block {i} has length {b.size}, expected {d * n}")
            if not np.all(np.isfinite(b)):
                raise ValueError(f"signal block {i} is not finite")
            b.setflags(write=False)
            signals.append(b)
        couplings = {}
        for (i, j), a in dict(self.couplings).items():
            if not 0 <= j < i < len(dims):
                raise ValueError(f"coupling ({i}, {j}) is not strictly lower-triangular")
            a = np.array(a, dtype=float)
            if a.shape != (dims[i] * n, dims[j] * n):
                raise ValueError(f"coupling ({i}, {j}) has shape {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"coupling ({i}, {j}) is not finite")
            a.setflags(write=False)
            couplings[(i, j)] = a
        factors = {}
        for i, f in dict(self.left_factors).items():
            f = np.array(f, dtype=float)
            if f.shape != (dims[i] * n, dims[i] * n):
                raise ValueError(f"left factor {i} has shape {f.shape}")
            f.setflags(write=False)
            factors[int(i)] = f
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "discounts", gammas)
        object.__setattr__(self, "signals", tuple(signals))
        object.__setattr__(self, "couplings", couplings)
        object.__setattr__(self, "left_factors", factors)

    @property
    def k(self) -> int:
        return len(self.dims)

    @property
    def gamma_max(self) -> float:
        return max(self.discounts)

    @property
    def total_dim(self) -> int:
        return sum(self.dims) * self.num_pairs

    def offsets(self) -> np.ndarray:
        return block_offsets(self.dims, self.num_pairs)

    def stacked_signal(self) -> np.ndarray:
        return np.concatenate(self.signals)


@dataclass(frozen=True)
class AssembledOperator:
    matrix: np.ndarray
    offset: np.ndarray
    dims: Tuple[int, ...]
    discounts: Tuple[float, ...]
    num_pairs: int
    direction: str
    diagonal_blocks: Tuple[np.ndarray, ...]

    @property
    def gamma_max(self) -> float:
        return max(self.discounts)

    def offsets(self) -> np.ndarray:
        return block_offsets(self.dims, self.num_pairs)

    def split(self, v: np.ndarray):
        o = self.offsets()
        return [v[..., o[i]:o[i + 1]] for i in range(len(self.dims))]


def backward_lift(kernel: StateActionKernel, mu: StationaryDistribution) -> np.ndarray:
    """Bayes-reversed kernel U^{-1} P^T U; row j is the law of the predecessor of j."""
    m = mu.mu
    if np.any(m <= 0):
        raise ValueError("backward lift needs a strictly positive stationary distribution")
    return kernel.matrix.T * m[None, :] / m[:, None]


def assemble(spec: GvfBlockSpec, kernel: StateActionKernel, mu: Optional[StationaryDistribution] = None) -> AssembledOperator:
    n = spec.num_pairs
    if kernel.num_pairs != n:
        raise ValueError(f"kernel has {kernel.num_pairs} pairs, spec expects {n}")
    if spec.direction == BACKWARD:
        if mu is None:
            raise ValueError("backward assembly needs the stationary distribution")
        base = backward_lift(kernel, mu)
    else:
        base = kernel.matrix
    off = spec.offsets()
    M = np.zeros((off[-1], off[-1]))
    diag = []
    for i, (d, g) in enumerate(zip(spec.dims, spec.discounts)):
        blk = g * np.kron(base, np.eye(d))
        if i in spec.left_factors:
            blk = spec.left_factors[i] @ blk
        M[off[i]:off[i + 1], off[i]:off[i + 1]] = blk
        diag.append(blk)
    for (i, j), a in spec.couplings.items():
        M[off[i]:off[i + 1], off[j]:off[j + 1]] = a
    M.setflags(write=False)
    B = spec.stacked_signal().copy()
    B.setflags(write=False)
    return AssembledOperator(M, B, spec.dims, spec.discounts, n, spec.direction, tuple(diag))


def spectral_radius(op: AssembledOperator, iters: int = 200, seed: int = 0) -> float:
    """Spectral radius of M by power iteration on each diagonal block.

    M is block lower-triangular, so its spectrum is the union of the diagonal
    block spectra; iterating per block avoids the polynomial transient that the
    couplings would otherwise add.
    """
    rng = np.random.default_rng(seed)
    rho = 0.0
    for blk in op.diagonal_blocks:
        v = np.abs(rng.standard_normal(blk.shape[0])) + 1.0
        v /= np.linalg.norm(v)
        est = 0.0
        for _ in range(iters):
            w = blk @ v
            nrm = np.linalg.norm(w)
            if nrm == 0.0:
                est = 0.0
                break
            est = nrm
            v = w / nrm
        rho = max(rho, est)
    return rho


def _unit_blocks(op: AssembledOperator):
    return [i for i, g in enumerate(op.discounts) if g >= 1.0]


def solve_ground_truth(op: AssembledOperator, tol: float = 1e-8) -> np.ndarray:
    """Unique fixed point of v -> B + Mv.

    For unit-discount blocks the fixed point is defined up to constants; the
    representative returned is the one whose unit-discount blocks have, for
    each coordinate, entries summing to zero over pairs (Euclidean orthogonal
    to per-block constant vectors).
    """
    size = op.matrix.shape[0]
    lhs = np.eye(size) - op.matrix
    unit = _unit_blocks(op)
    if not unit:
        rho = spectral_radius(op)
        if rho >= 1.0 - 1e-6:
            raise SingularOperatorError(f"spectral radius {rho:.8f} too close to 1 for a direct solve")
        g = np.linalg.solve(lhs, op.offset)
    else:
        off = op.offsets()
        rows = []
        for i in unit:
            d = op.dims[i]
            for c in range(d):
                r = np.zeros(size)
                r[off[i] + c:off[i + 1]:d] = 1.0
                rows.append(r)
        pin = np.array(rows)
        sys = np.vstack([lhs, pin])
        rhs = np.concatenate([op.offset, np.zeros(len(rows))])
        g, _, rank, _ = np.linalg.lstsq(sys, rhs, rcond=None)
        if rank < size:
            raise SingularOperatorError("pinned system is still singular")
    resid = np.max(np.abs(g - op.offset - op.matrix @ g)) if size else 0.0
    if resid > tol * max(1.0, np.max(np.abs(g))):
        raise SingularOperatorError(f"ground-truth residual {resid:.3g} exceeds tolerance")
    return g


def apply_gbo(op: AssembledOperator, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != op.matrix.shape[0]:
        raise ValueError(f"vector length {v.shape[-1]} does not match operator size {op.matrix.shape[0]}")
    return op.offset + v @ op.matrix.T


def _mu_norm_matrix(a: np.ndarray, mu: np.ndarray, d_out: int, d_in: int) -> float:
    left = np.sqrt(np.repeat(mu, d_out))
    right = 1.0 / np.sqrt(np.repeat(mu, d_in))
    return float(np.linalg.norm(left[:, None] * a * right[None, :], 2))


def coupling_bound(spec: GvfBlockSpec, mu: StationaryDistribution, inflate: float = 1.01, floor: float = 1.0) -> float:
    """Upper bound on the mu-induced norms of all couplings.

    The exact induced norm (largest singular value of U^{1/2} A U^{-1/2}) is
    inflated by 1% and floored at ``floor``; any valid bound keeps the
    contraction argument intact, and the floor keeps the weights well away
    from zero when the couplings are tiny or absent.
    """
    best = 0.0
    for (i, j), a in spec.couplings.items():
        best = max(best, _mu_norm_matrix(a, mu.mu, spec.dims[i], spec.dims[j]))
    return max(inflate * best, floor)


@dataclass(frozen=True)
class ContractionWeights:
    alpha: np.ndarray
    coupling_bound: float
    gamma_g: float

    def __post_init__(self):
        a = np.array(self.alpha, dtype=float)
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)


def _weight_system(k: int, gamma_max: float, c_a: float):
    F = np.zeros((k, k))
    for r in range(k - 1):
        F[r, r] = -(1.0 - gamma_max) / 2.0
        F[r, r + 1:] = c_a
    F[-1, :] = 1.0
    f = np.zeros(k)
    f[-1] = 1.0
    return F, f


def contraction_weights(spec_or_k, coupling_bound: float, gamma_max: Optional[float] = None) -> ContractionWeights:
    """Block weights under which the general Bellman operator contracts.

    Accepts a :class:`GvfBlockSpec` or a block count plus ``gamma_max``.
    """
    if isinstance(spec_or_k, GvfBlockSpec):
        k, gmax = spec_or_k.k, spec_or_k.gamma_max
    else:
        k, gmax = int(spec_or_k), gamma_max
        if gmax is None:
            raise ValueError("gamma_max is required when passing a block count")
    if gmax >= 1.0:
        raise ValueError("contraction weights need gamma_max < 1")
    F, f = _weight_system(k, gmax, coupling_bound)
    alpha = np.linalg.solve(F, f)
    if np.any(alpha <= 0) or np.linalg.norm(F @ alpha - f) > 1e-10:
        raise ValueError(f"weight system has no positive solution (alpha={alpha})")
    return ContractionWeights(alpha, float(coupling_bound), (1.0 + gmax) / 2.0)


def block_mu_norm(v: np.ndarray, mu: np.ndarray, d: int) -> np.ndarray:
    """sqrt(sum_pairs mu(pair) * ||v(pair)||^2); batched over leading axes."""
    v = np.asarray(v, dtype=float)
    sq = (v.reshape(v.shape[:-1] + (mu.size, d)) ** 2).sum(axis=-1)
    return np.sqrt(sq @ mu)


def alpha_norm(v, weights, mu, dims: Sequence[int]):
    """Weighted sum of per-block mu-norms.

    ``weights`` may be a :class:`ContractionWeights` or a plain array.
    """
    alpha = weights.alpha if isinstance(weights, ContractionWeights) else np.asarray(weights, dtype=float)
    m = mu.mu if isinstance(mu, StationaryDistribution) else np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    off = block_offsets(dims, m.size)
    if v.shape[-1] != off[-1]:
        raise ValueError(f"vector length {v.shape[-1]} does not match dims {tuple(dims)}")
    if len(alpha) != len(dims):
        raise ValueError("one weight per block is required")
    total = 0.0
    for i, d in enumerate(dims):
        total = total + alpha[i] * block_mu_norm(v[..., off[i]:off[i + 1]], m, d)
    return total


def monotonicity_constant(features, mu: StationaryDistribution, spec) -> Tuple[float, Tuple[float, ...]]:
    """Returns (lambda_G, zetas) with zeta_i the smallest eigenvalue of Phi_i^T U Phi_i."""
    zetas = []
    for i, base in enumerate(features.blocks):
        gram = base.T @ (mu.mu[:, None] * base)
        z = float(np.linalg.eigvalsh(gram)[0])
        scale = float(np.max(np.abs(gram))) if gram.size else 1.0
        if z <= 1e-12 * max(scale, 1e-300):
            raise RankDeficientError(f"feature block {i} is rank deficient under mu")
        zetas.append(z)
    gmax = spec.gamma_max
    return (1.0 - gmax) * min(zetas), tuple(zetas)


def _weighted_lift(features, mu: StationaryDistribution) -> Tuple[np.ndarray, np.ndarray]:
    phi = features.matrix()
    u = np.concatenate([mu.lift(d) for d in features.dims])
    return phi, u


def monotonicity_matrix(op: AssembledOperator, features, mu: StationaryDistribution) -> np.ndarray:
    """Phi^T U (M - I) Phi, whose negative-definiteness drives convergence."""
    phi, u = _weighted_lift(features, mu)
    return phi.T @ (u[:, None] * (op.matrix @ phi - phi))


def population_update(op: AssembledOperator, features, mu: StationaryDistribution, theta) -> np.ndarray:
    """Mean update direction Phi^T U (Phi theta - B - M Phi theta)."""
    phi, u = _weighted_lift(features, mu)
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != phi.shape[1]:
        raise ValueError(f"theta has length {theta.shape[-1]}, expected {phi.shape[1]}")
    val = theta @ phi.T
    resid = val - apply_gbo(op, val)
    return (resid * u) @ phi


def projected_fixed_point(op: AssembledOperator, features, mu: StationaryDistribution) -> np.ndarray:
    """Root of population_update (ball constraint inactive)."""
    phi, u = _weighted_lift(features, mu)
    gmat = monotonicity_matrix(op, features, mu)
    return np.linalg.solve(gmat, -(phi.T @ (u * op.offset)))
