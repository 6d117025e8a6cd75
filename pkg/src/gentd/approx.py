"""Linear function approximation for stacked GVFs."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .gvf import RankDeficientError

__all__ = [
    "DEFAULT_RADIUS",
    "FeatureMap",
    "project_weighted",
    "project_ball",
    "complete_basis",
    "baird_features",
    "nonconstant_basis",
    "nonconstant_features",
    "ones_angle",
    "save_basis_csv",
    "load_basis_csv",
]

DEFAULT_RADIUS = 1e3


def _check_rank(base: np.ndarray, i: int) -> None:
    if base.shape[1] > base.shape[0] or np.linalg.matrix_rank(base) < base.shape[1]:
        raise RankDeficientError(f"feature block {i} does not have full column rank")


@dataclass(frozen=True)
class FeatureMap:
    """Block-diagonal features diag(Phi_i kron I_{d_i}).

    The parameters of block ``i`` form a ``K_i x d_i`` matrix stored row-major,
    so that block ``i`` of the estimate at pair ``p`` is ``Phi_i[p] @ theta_i``.
    Each base is rescaled at construction so that no row exceeds unit norm;
    the applied factors are kept in ``scales``.
    """

    blocks: Tuple[np.ndarray, ...]
    dims: Tuple[int, ...]
    scales: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        if len(self.blocks) != len(self.dims):
            raise ValueError("one feature base per block is required")
        n = None
        bases, scales = [], []
        for i, b in enumerate(self.blocks):
            b = np.array(b, dtype=float)
            if b.ndim != 2:
                raise ValueError("feature bases must be matrices")
            if n is None:
                n = b.shape[0]
            elif b.shape[0] != n:
                raise ValueError("all feature bases must cover the same pairs")
            _check_rank(b, i)
            top = float(np.max(np.linalg.norm(b, axis=1)))
            scale = 1.0 / top if top > 1.0 + 1e-12 else 1.0
            b = b * scale
            b.setflags(write=False)
            bases.append(b)
            scales.append(scale)
        object.__setattr__(self, "blocks", tuple(bases))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "scales", tuple(scales))
        sizes = [b.shape[1] * d for b, d in zip(bases, self.dims)]
        object.__setattr__(self, "_param_offsets", np.concatenate([[0], np.cumsum(sizes)]).astype(int))
        out = [d * n for d in self.dims]
        object.__setattr__(self, "_out_offsets", np.concatenate([[0], np.cumsum(out)]).astype(int))

    @classmethod
    def shared(cls, base: np.ndarray, dims: Sequence[int]) -> "FeatureMap":
        return cls(tuple(base for _ in dims), tuple(dims))

    @property
    def num_pairs(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def num_params(self) -> int:
        return int(self._param_offsets[-1])

    @property
    def out_dim(self) -> int:
        return int(sum(self.dims))

    def param_slices(self):
        o = self._param_offsets
        return [slice(o[i], o[i + 1]) for i in range(len(self.dims))]

    def matrix(self) -> np.ndarray:
        """Dense lifted feature matrix of shape (sum_i d_i N, num_params)."""
        out = np.zeros((self._out_offsets[-1], self.num_params))
        po, oo = self._param_offsets, self._out_offsets
        for i, (b, d) in enumerate(zip(self.blocks, self.dims)):
            out[oo[i]:oo[i + 1], po[i]:po[i + 1]] = np.kron(b, np.eye(d))
        return out

    def values(self, theta: np.ndarray) -> np.ndarray:
        """Stacked estimate Phi theta (batched over leading axes)."""
        theta = np.asarray(theta, dtype=float)
        parts = []
        for sl, b, d in zip(self.param_slices(), self.blocks, self.dims):
            th = theta[..., sl].reshape(theta.shape[:-1] + (b.shape[1], d))
            parts.append(np.einsum("nk,...kd->...nd", b, th).reshape(theta.shape[:-1] + (-1,)))
        return np.concatenate(parts, axis=-1)

    def evaluate(self, idx: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Per-sample estimate G(theta; pair) for a batch.

        ``idx`` has shape (n,) and ``theta`` shape (n, num_params); returns the
        (n, sum_i d_i) concatenation of block values.
        """
        parts = []
        for sl, b, d in zip(self.param_slices(), self.blocks, self.dims):
            th = theta[:, sl].reshape(theta.shape[0], b.shape[1], d)
            parts.append(np.einsum("nk,nkd->nd", b[idx], th))
        return np.concatenate(parts, axis=1)

    def transpose_apply(self, idx: np.ndarray, delta: np.ndarray) -> np.ndarray:
        """phi(pair)^T delta for a batch: per-block outer(phi_i, delta_i) flattened."""
        parts = []
        start = 0
        for b, d in zip(self.blocks, self.dims):
            dl = delta[:, start:start + d]
            start += d
            parts.append((b[idx][:, :, None] * dl[:, None, :]).reshape(idx.shape[0], -1))
        return np.concatenate(parts, axis=1)

    def row_matrix(self, idx: int) -> np.ndarray:
        """phi(pair) as a (sum_i d_i, num_params) matrix."""
        out = np.zeros((self.out_dim, self.num_params))
        r = 0
        for sl, b, d in zip(self.param_slices(), self.blocks, self.dims):
            out[r:r + d, sl] = np.kron(b[idx], np.eye(d))
            r += d
        return out

    def block_of_pairs(self, v: np.ndarray) -> np.ndarray:
        """Reorder a stacked vector to (N, sum_i d_i), one row per pair."""
        oo = self._out_offsets
        n = self.num_pairs
        return np.concatenate(
            [v[..., oo[i]:oo[i + 1]].reshape(v.shape[:-1] + (n, d)) for i, d in enumerate(self.dims)],
            axis=-1,
        )


def _lifted_weights(features: FeatureMap, xi: np.ndarray) -> np.ndarray:
    return np.concatenate([np.repeat(xi, d) for d in features.dims])


def project_weighted(features: FeatureMap, xi, target) -> Tuple[np.ndarray, np.ndarray]:
    """xi-weighted least-squares fit of ``target`` onto the feature span."""
    xi = np.asarray(getattr(xi, "probs", getattr(xi, "mu", xi)), dtype=float)
    if np.any(xi < 0) or abs(xi.sum() - 1.0) > 1e-10:
        raise ValueError("xi must be a probability vector")
    phi = features.matrix()
    w = np.sqrt(_lifted_weights(features, xi))
    target = np.asarray(target, dtype=float)
    theta, _, rank, _ = np.linalg.lstsq(w[:, None] * phi, w * target, rcond=None)
    if rank < phi.shape[1]:
        raise RankDeficientError("weighted projection is rank deficient")
    return theta, phi @ theta


def project_ball(theta, radius: float = DEFAULT_RADIUS) -> np.ndarray:
    """Euclidean projection onto the ball of the given radius (row-wise for batches)."""
    theta = np.asarray(theta, dtype=float)
    nrm = np.linalg.norm(theta, axis=-1, keepdims=True)
    factor = np.where(nrm > radius, radius / np.maximum(nrm, 1e-300), 1.0)
    return theta * factor


def complete_basis(n: int, kind: str = "complete", drop: Optional[int] = None) -> np.ndarray:
    """Identity basis; the incomplete variant drops one column (the last by default)."""
    base = np.eye(n)
    if kind == "complete":
        return base
    if kind != "incomplete":
        raise ValueError(f"unknown feature kind {kind!r}")
    col = n - 1 if drop is None else drop
    return np.delete(base, col, axis=1)


def baird_features(kind: str = "complete", dims: Sequence[int] = (1,), num_pairs: int = 14, drop: Optional[int] = None) -> FeatureMap:
    return FeatureMap.shared(complete_basis(num_pairs, kind, drop), dims)


def nonconstant_basis(n: int, kind: str = "complete", drop: Optional[int] = None) -> np.ndarray:
    """Orthonormal basis of the complement of the all-ones vector, from an SVD."""
    if n < 2:
        raise ValueError("need at least two pairs")
    centering = np.eye(n) - np.full((n, n), 1.0 / n)
    u, s, _ = np.linalg.svd(centering)
    base = u[:, s > 0.5]
    if kind == "complete":
        return base
    if kind != "incomplete":
        raise ValueError(f"unknown feature kind {kind!r}")
    col = base.shape[1] - 1 if drop is None else drop
    return np.delete(base, col, axis=1)


def nonconstant_features(n: int, kind: str = "complete", dims: Sequence[int] = (1,), drop: Optional[int] = None) -> FeatureMap:
    return FeatureMap.shared(nonconstant_basis(n, kind, drop), dims)


def ones_angle(base: np.ndarray) -> float:
    """Angle (radians) between the all-ones vector and the column span of ``base``."""
    ones = np.ones(base.shape[0]) / np.sqrt(base.shape[0])
    q, _ = np.linalg.qr(base)
    c = min(1.0, float(np.linalg.norm(q.T @ ones)))
    return float(np.arccos(c))


def save_basis_csv(path, base: np.ndarray) -> None:
    np.savetxt(Path(path), np.asarray(base, dtype=float), delimiter=",", fmt="%.17g")


def load_basis_csv(path) -> np.ndarray:
    return np.loadtxt(Path(path), delimiter=",", dtype=float, ndmin=2)
