from typing import List, Tuple
import logging

import numpy as np

from app.exceptions import ConfigError, DimensionError, FactorizationError
from app.models import (
    BlockSymmetricCovariance,
    DenseCovariance,
    MixtureModel,
    ScaledIdentityCovariance,
    SpectralMeasureCovariance,
)

logger = logging.getLogger(__name__)


def atom_counts(weights: np.ndarray, p: int) -> np.ndarray:
    """Largest-remainder rounding of p * weights to integers summing to p."""
    raw = np.asarray(weights, dtype=float) * p
    counts = np.floor(raw).astype(int)
    remainder = p - counts.sum()
    if remainder > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def _block_diagonal(cov: BlockSymmetricCovariance, p: int, k: int) -> np.ndarray:
    size = p // k
    d1, d2 = np.asarray(cov.d1, dtype=float), np.asarray(cov.d2, dtype=float)
    if d1.shape[0] != size or d2.shape[0] != size:
        raise DimensionError(f"block_symmetric blocks must have size p/k={size}")
    if cov.position >= k:
        raise DimensionError(f"block position {cov.position} out of range for k={k}")
    blocks = [d2 if a == cov.position else d1 for a in range(k)]
    if cov.is_diagonal:
        return np.concatenate(blocks)
    dense = np.zeros((p, p))
    for a, block in enumerate(blocks):
        block = np.diag(block) if block.ndim == 1 else block
        dense[a * size:(a + 1) * size, a * size:(a + 1) * size] = block
    return dense


def realize_covariance(cov, p: int, k: int) -> np.ndarray:
    """
    Diagonal of the covariance (1-D) when the covariance is diagonal, else the dense p x p matrix
    """
    if isinstance(cov, ScaledIdentityCovariance):
        try:
            return np.full(p, cov.resolve_beta(p))
        except ValueError as e:
            raise ConfigError(str(e)) from e
    if isinstance(cov, SpectralMeasureCovariance):
        atoms = np.array([u for u, _ in cov.atoms])
        counts = atom_counts(np.array([w for _, w in cov.atoms]), p)
        return np.repeat(atoms, counts)
    if isinstance(cov, BlockSymmetricCovariance):
        if p % k != 0:
            raise DimensionError(f"block_symmetric covariance needs p divisible by k (p={p}, k={k})")
        return _block_diagonal(cov, p, k)
    if isinstance(cov, DenseCovariance):
        matrix = np.asarray(cov.matrix, dtype=float)
        if matrix.shape != (p, p):
            raise DimensionError(f"dense covariance has shape {matrix.shape}, expected ({p}, {p})")
        if not np.allclose(matrix, matrix.T, atol=1e-12 * max(1.0, np.abs(matrix).max())):
            raise ConfigError("dense covariance must be symmetric")
        return matrix
    raise ConfigError(f"Unsupported covariance: {cov!r}")


def realize_mean(mean, p: int) -> np.ndarray:
    if isinstance(mean, dict):
        vector = np.zeros(p)
        for index, value in mean.items():
            if not 0 <= index < p:
                raise DimensionError(f"mean coordinate {index} outside [0, {p})")
            vector[index] = value
        return vector
    vector = np.asarray(mean, dtype=float)
    if vector.shape != (p,):
        raise DimensionError(f"mean has length {vector.shape[0]}, expected p={p}")
    return vector


class CovarianceFrame:
    """
    Class covariances C_1..C_k seen through the traces and quadratic forms the
    deterministic equivalents need.

    In diagonal mode only the p x k matrix of diagonals is stored, grouped into
    distinct rows with their frequencies, so resolvents are never materialized.
    Dense mode keeps the full matrices.
    """

    def __init__(self, covariances: List[np.ndarray], p: int):
        self.p = p
        self.k = len(covariances)
        self.diagonal = all(C.ndim == 1 for C in covariances)
        if self.diagonal:
            self.diag = np.column_stack(covariances)
            self.levels, self.inverse, counts = np.unique(
                self.diag, axis=0, return_inverse=True, return_counts=True
            )
            self.inverse = np.asarray(self.inverse).reshape(-1)
            self.weights = counts / p
            self.dense = None
        else:
            self.dense = [np.diag(C) if C.ndim == 1 else C for C in covariances]
            self.diag = np.column_stack([np.diag(C) for C in self.dense])
        logger.debug(f"Covariance frame: p={p}, k={self.k}, diagonal={self.diagonal}")

    @classmethod
    def from_model(cls, model: MixtureModel) -> "CovarianceFrame":
        covariances = [realize_covariance(cls.covariance, model.p, model.k) for cls in model.classes]
        return cls(covariances, model.p)

    # -- plain traces -------------------------------------------------------

    def traces(self) -> np.ndarray:
        """(1/p) tr C_a"""
        return self.diag.mean(axis=0)

    def cross_traces(self) -> np.ndarray:
        """(1/p) tr C_a C_b"""
        if self.diagonal:
            return (self.levels * self.weights[:, None]).T @ self.levels
        return np.array([[np.sum(Ca * Cb.T) for Cb in self.dense] for Ca in self.dense]) / self.p

    def diag_squares(self) -> np.ndarray:
        """(1/p) tr diag(C_a)^2"""
        return (self.diag ** 2).mean(axis=0)

    def operator_norms(self) -> np.ndarray:
        if self.diagonal:
            return np.abs(self.levels).max(axis=0)
        return np.array([np.linalg.norm(C, 2) for C in self.dense])

    def class_atoms(self, a: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.diagonal:
            atoms, index = np.unique(self.levels[:, a], return_inverse=True)
            return atoms, np.bincount(np.asarray(index).reshape(-1), weights=self.weights)
        return np.linalg.eigvalsh(self.dense[a]), np.full(self.p, 1.0 / self.p)

    def is_equal(self, tol: float = 1e-12) -> bool:
        if self.diagonal:
            return bool(np.all(np.abs(self.diag - self.diag[:, :1]) <= tol))
        return all(np.allclose(C, self.dense[0], atol=tol) for C in self.dense)

    # -- resolvent traces ----------------------------------------------------

    def _inverse_diag(self, z: complex, v: np.ndarray) -> np.ndarray:
        """Diagonal of Q~ = -(1/z)(I + sum_b v_b C_b)^{-1} per distinct level."""
        return -1.0 / (z * (1.0 + self.levels @ v))

    def _resolvent(self, z: complex, v: np.ndarray) -> np.ndarray:
        A = np.eye(self.p, dtype=complex) + sum(vb * C for vb, C in zip(v, self.dense))
        return -np.linalg.inv(A) / z

    def trace_q(self, z: complex, v: np.ndarray) -> np.ndarray:
        """(1/p) tr C_a Q~_z with v = c * g(z)."""
        if self.diagonal:
            q = self._inverse_diag(z, v)
            return (self.levels * (self.weights * q)[:, None]).sum(axis=0)
        Q = self._resolvent(z, v)
        return np.array([np.sum(C * Q.T) for C in self.dense]) / self.p

    def cross_trace_q(self, z1: complex, v1: np.ndarray, z2: complex, v2: np.ndarray) -> np.ndarray:
        """(1/p) tr C_a Q~_{z1} C_b Q~_{z2}"""
        if self.diagonal:
            q = self._inverse_diag(z1, v1) * self._inverse_diag(z2, v2) * self.weights
            return (self.levels * q[:, None]).T @ self.levels
        Q1, Q2 = self._resolvent(z1, v1), self._resolvent(z2, v2)
        left = [C @ Q1 for C in self.dense]
        right = [C @ Q2 for C in self.dense]
        return np.array([[np.sum(X * Y.T) for Y in right] for X in left]) / self.p

    def mean_form(self, z: complex, v: np.ndarray, M: np.ndarray) -> np.ndarray:
        """M^T Q~_z M"""
        if self.diagonal:
            q = self._inverse_diag(z, v)[self.inverse]
            return (M * q[:, None]).T @ M
        return M.T @ self._resolvent(z, v) @ M

    def mean_sandwich(
        self,
        z1: complex,
        v1: np.ndarray,
        z2: complex,
        v2: np.ndarray,
        M: np.ndarray,
        weights: np.ndarray,
    ) -> np.ndarray:
        """M^T Q~_{z1} (sum_b weights_b C_b) Q~_{z2} M"""
        if self.diagonal:
            q1 = self._inverse_diag(z1, v1)[self.inverse]
            q2 = self._inverse_diag(z2, v2)[self.inverse]
            middle = self.diag @ weights
            return (M * (q1 * middle * q2)[:, None]).T @ M
        middle = sum(w * C for w, C in zip(weights, self.dense))
        return M.T @ self._resolvent(z1, v1) @ middle @ self._resolvent(z2, v2) @ M

    # -- sampling ----------------------------------------------------------------

    def square_root(self, a: int) -> np.ndarray:
        """C_a^{1/2}; a vector in diagonal mode."""
        if self.diagonal:
            if np.any(self.diag[:, a] < 0):
                raise FactorizationError(f"class {a} covariance has negative diagonal entries")
            return np.sqrt(self.diag[:, a])
        values, vectors = np.linalg.eigh(self.dense[a])
        if values.min() < -1e-10 * max(1.0, abs(values).max()):
            raise FactorizationError(
                f"class {a} covariance is not positive semidefinite (min eigenvalue {values.min():.3e})"
            )
        return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T

    def class_matrix(self, a: int) -> np.ndarray:
        if self.diagonal:
            return np.diag(self.diag[:, a])
        return self.dense[a]
