from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np

from app.exceptions import DegenerateSpikeError, DimensionError, PoleError
from app.models import (
    BlockSymmetricCovariance,
    Branch,
    KernelProfile,
    SpecialCaseResult,
    SpikeLocation,
    SpikeReport,
)
from app.services.model_service import MixtureSystem
from app.services.spike_service import map_to_L

logger = logging.getLogger(__name__)

EQUAL_COVARIANCE = "equal_covariance"
SCALED_COVARIANCE = "scaled_covariance"
TRACE_CONSTANT = "trace_constant"


@dataclass
class InverseStieltjesCurve:
    """
    x(g) = -1/(c0 g) + sum_u w_u u / (1 + g u) for a discrete measure nu = sum_u w_u delta_u.

    The image of {g : x'(g) > 0} is the complement of the limiting support.
    """
    atoms: np.ndarray
    weights: np.ndarray
    c0: float

    @classmethod
    def from_measure(cls, atoms: Sequence[float], weights: Optional[Sequence[float]], c0: float) -> "InverseStieltjesCurve":
        atoms = np.asarray(atoms, dtype=float)
        if weights is None:
            weights = np.full(atoms.shape, 1.0 / atoms.size)
        values, index = np.unique(atoms, return_inverse=True)
        merged = np.bincount(np.asarray(index).reshape(-1), weights=np.asarray(weights, dtype=float))
        return cls(atoms=values, weights=merged, c0=float(c0))

    def scaled(self, factor: float) -> "InverseStieltjesCurve":
        return InverseStieltjesCurve(atoms=self.atoms * factor, weights=self.weights, c0=self.c0)

    def _check(self, g: float) -> np.ndarray:
        if g == 0:
            raise PoleError("x(g) has a pole at g = 0")
        denominators = 1.0 + g * self.atoms
        if np.any(np.abs(denominators) < 1e-14):
            raise PoleError(f"x(g) has a pole at g = {g}: g = -1/u for an atom u")
        return denominators

    def value(self, g: float) -> float:
        denominators = self._check(g)
        return float(-1.0 / (self.c0 * g) + np.sum(self.weights * self.atoms / denominators))

    def derivative(self, g: float) -> float:
        denominators = self._check(g)
        return float(1.0 / (self.c0 * g * g) - np.sum(self.weights * self.atoms ** 2 / denominators ** 2))

    def first_moment(self) -> float:
        return float(self.weights @ self.atoms)

    def second_moment(self) -> float:
        return float(self.weights @ self.atoms ** 2)

    def separability(self, ell: float) -> float:
        """1 - c0 int u^2 nu(du) / (u - ell)^2; positive iff x'(-1/ell) > 0"""
        gaps = self.atoms - ell
        if np.any(np.abs(gaps) < 1e-14):
            raise PoleError(f"ell = {ell} coincides with an atom of nu")
        return float(1.0 - self.c0 * np.sum(self.weights * self.atoms ** 2 / gaps ** 2))

    def rho(self, ell: float) -> float:
        """x(-1/ell) = ell (1/c0 - int u nu(du) / (u - ell))"""
        if ell == 0:
            raise PoleError("ell = 0 maps to the pole of x at infinity")
        return self.value(-1.0 / ell)

    def location(self, ell: float) -> SpikeLocation:
        if ell > self.atoms.max():
            return SpikeLocation.ABOVE
        if ell < self.atoms.min():
            return SpikeLocation.BELOW
        return SpikeLocation.BETWEEN


def x_of_g(curve: InverseStieltjesCurve, g: float) -> Tuple[float, bool]:
    return curve.value(g), curve.derivative(g) > 0


def _unique_eigenpairs(values: np.ndarray, vectors: np.ndarray, tol: float) -> List[Tuple[float, np.ndarray]]:
    groups: List[Tuple[float, np.ndarray]] = []
    order = np.argsort(values)
    start = 0
    for i in range(1, len(order) + 1):
        if i == len(order) or values[order[i]] - values[order[i - 1]] > tol * (1.0 + abs(values[order[i]])):
            block = order[start:i]
            groups.append((float(values[block].mean()), vectors[:, block]))
            start = i
    return groups


def _fix_sign(vector: np.ndarray) -> np.ndarray:
    nonzero = np.flatnonzero(np.abs(vector) > 1e-12)
    if nonzero.size and vector[nonzero[0]] < 0:
        return -vector
    return vector


class ClosedFormService:
    """
    Explicit special cases: equal covariances, covariances scaled by
    (1 + gamma_a / sqrt(p)), and the block model with constant means and traces
    """

    def __init__(self, edge_fraction: float = 1e-4, degeneracy_tolerance: float = 1e-10):
        self.edge_fraction = edge_fraction
        self.degeneracy_tolerance = degeneracy_tolerance

    x_of_g = staticmethod(x_of_g)

    # ------------------------------------------------------------------
    # Equal covariances
    # ------------------------------------------------------------------

    def _population_spikes(self, M: np.ndarray, c: np.ndarray, C: np.ndarray):
        C = np.diag(C) if C.ndim == 1 else C
        values, vectors = np.linalg.eigh(C + M @ np.diag(c) @ M.T)
        atoms = np.unique(np.round(np.linalg.eigvalsh(C), 12))
        scale = max(1.0, float(np.abs(atoms).max()))
        groups = []
        for ell, block in _unique_eigenpairs(values, vectors, self.degeneracy_tolerance):
            distance = np.min(np.abs(atoms - ell))
            if distance <= 1e-10 * scale:
                continue
            if distance <= self.edge_fraction * scale:
                logger.warning(f"ell={ell:.6g} is within {distance:.2e} of an atom of nu")
            groups.append((ell, block))
        return groups, C

    def equal_cov_spikes(
        self,
        M: np.ndarray,
        c: np.ndarray,
        c0: float,
        C: np.ndarray,
        kernel: KernelProfile,
        psi: Optional[float] = None,
    ) -> SpecialCaseResult:
        """
        Isolated eigenvalues when C_a = C: rho = x(-1/ell) for each eigenvalue ell of
        C + M diag(c) M^T away from the spectrum of C, kept when 1 > c0 int u^2 nu/(u - ell)^2
        """
        if not kernel.generic:
            raise ValueError("equal_cov_spikes needs f'(tau) away from zero")
        groups, C = self._population_spikes(np.asarray(M, dtype=float), np.asarray(c, dtype=float), np.asarray(C))
        curve = InverseStieltjesCurve.from_measure(np.linalg.eigvalsh(C), None, c0)
        result = SpecialCaseResult(regime=EQUAL_COVARIANCE)
        for ell, block in groups:
            separable = curve.separability(ell) > 0
            result.ell.append(ell)
            result.separable.append(separable)
            if not separable:
                continue
            rho = curve.rho(ell)
            result.spikes.append(
                SpikeReport(
                    rho=rho,
                    lambda_l=map_to_L(kernel, rho),
                    multiplicity=block.shape[1],
                    informative=True,
                    branch=Branch.GENERIC,
                    location=curve.location(ell),
                )
            )

        psi = 2.0 * curve.second_moment() if psi is None else psi
        ell_plus = kernel.q * psi
        result.stats["ell_plus"] = ell_plus
        if ell_plus != 0 and curve.separability(ell_plus) > 0:
            rho_plus = curve.rho(ell_plus)
            result.spikes.append(
                SpikeReport(
                    rho=rho_plus,
                    lambda_l=map_to_L(kernel, rho_plus),
                    multiplicity=1,
                    informative=False,
                    branch=Branch.GENERIC,
                    location=curve.location(ell_plus),
                )
            )
        result.spikes.sort(key=lambda s: s.lambda_l, reverse=True)
        return result

    def equal_cov_spikes_scaled_identity(self, beta: float, c0: float, ell: float) -> Optional[float]:
        """C = beta I: rho = ell/c0 + beta ell/(ell - beta) when |ell - beta| > beta sqrt(c0)"""
        if abs(ell - beta) <= beta * np.sqrt(c0):
            return None
        return ell / c0 + beta * ell / (ell - beta)

    def equal_cov_clustering(
        self,
        M: np.ndarray,
        c: np.ndarray,
        c0: float,
        C: np.ndarray,
    ) -> SpecialCaseResult:
        """
        Class-wise means, fluctuations and cross-fluctuations of the informative
        eigenvectors when C_a = C
        """
        M, c = np.asarray(M, dtype=float), np.asarray(c, dtype=float)
        groups, C = self._population_spikes(M, c, np.asarray(C))
        curve = InverseStieltjesCurve.from_measure(np.linalg.eigvalsh(C), None, c0)
        result = SpecialCaseResult(regime=EQUAL_COVARIANCE)

        kept = []
        for ell, block in groups:
            factor = curve.separability(ell)
            if factor <= 0:
                continue
            if block.shape[1] > 1:
                raise DegenerateSpikeError(f"ell={ell:.6g} has multiplicity {block.shape[1]}; unit multiplicity is required")
            upsilon = _fix_sign(block[:, 0])
            projection = upsilon @ M
            alpha2 = c * projection ** 2 * factor / ell
            sigma2 = c * (1.0 - float(projection ** 2 @ c) * factor / ell)
            weighted = np.diag(c) @ M.T @ upsilon
            P = factor / (c0 * ell) * np.outer(weighted, weighted)
            result.ell.append(ell)
            result.separable.append(True)
            kept.append((ell, factor, upsilon))
            result.stats.setdefault("alpha2", []).append(alpha2)
            result.stats.setdefault("sigma2", []).append(sigma2)
            result.stats.setdefault("projection", []).append(P)

        cross = {}
        for i, (ell_i, factor_i, ups_i) in enumerate(kept):
            for j, (ell_j, factor_j, ups_j) in enumerate(kept):
                if i >= j:
                    continue
                coupling = float(ups_i @ C @ ups_j)
                cross[(i, j)] = c ** 2 / (ell_i * ell_j) * factor_i * factor_j * coupling ** 2
        result.stats["cross2"] = cross
        return result

    # ------------------------------------------------------------------
    # Scaled covariances C_a = (1 + gamma_a / sqrt(p)) C
    # ------------------------------------------------------------------

    @staticmethod
    def _gamma_terms(gamma: np.ndarray, c: np.ndarray, curve: InverseStieltjesCurve, psi: Optional[float]):
        gamma = np.asarray(gamma, dtype=float)
        drift = float(c @ gamma)
        if abs(drift) > 1e-12:
            logger.info(f"Centering gamma (c^T gamma = {drift:.3g}) so that C° = C")
            gamma = gamma - drift
        psi = 2.0 * curve.second_moment() if psi is None else psi
        spread = curve.first_moment() ** 2 * float(c @ gamma ** 2)
        return gamma, psi, spread

    def scaled_cov_spikes(
        self,
        gamma: np.ndarray,
        c: np.ndarray,
        c0: float,
        curve: InverseStieltjesCurve,
        kernel: KernelProfile,
        psi: Optional[float] = None,
    ) -> SpecialCaseResult:
        """
        At most one informative spike; generic: ell = q [psi + (int u)^2 c^T gamma^2],
        zero-derivative: rho0 = (b/c0) [psi + (int u)^2 c^T gamma^2]
        """
        c = np.asarray(c, dtype=float)
        gamma, psi, spread = self._gamma_terms(gamma, c, curve, psi)
        result = SpecialCaseResult(regime=SCALED_COVARIANCE)

        if not kernel.generic:
            rho0 = kernel.b / c0 * (psi + spread)
            result.stats["rho0"] = rho0
            if spread > 0:
                result.separable.append(True)
                result.spikes.append(
                    SpikeReport(
                        rho=rho0,
                        lambda_l=map_to_L(kernel, rho0, Branch.ZERO_DERIVATIVE),
                        multiplicity=1,
                        informative=True,
                        branch=Branch.ZERO_DERIVATIVE,
                        location=SpikeLocation.ABOVE if rho0 > 0 else SpikeLocation.BELOW,
                    )
                )
            return result

        # spread = 0 collapses onto the zero of h, which is not an isolated eigenvalue
        ell = kernel.q * (psi + spread)
        result.ell.append(ell)
        if spread == 0 or ell == 0:
            result.separable.append(False)
            return result
        separable = curve.separability(ell) > 0
        result.separable.append(separable)
        if separable:
            rho = curve.rho(ell)
            result.spikes.append(
                SpikeReport(
                    rho=rho,
                    lambda_l=map_to_L(kernel, rho),
                    multiplicity=1,
                    informative=True,
                    branch=Branch.GENERIC,
                    location=curve.location(ell),
                )
            )
        return result

    def scaled_cov_clustering(
        self,
        gamma: np.ndarray,
        c: np.ndarray,
        c0: float,
        curve: InverseStieltjesCurve,
        kernel: KernelProfile,
        p: int,
        psi: Optional[float] = None,
    ) -> SpecialCaseResult:
        """
        Statistics of u1 = D^{1/2}1/|D^{1/2}1| and of the single informative u2
        """
        c = np.asarray(c, dtype=float)
        gamma, psi, spread = self._gamma_terms(gamma, c, curve, psi)
        result = self.scaled_cov_spikes(gamma, c, c0, curve, kernel, psi)
        if kernel.generic:
            ell = result.ell[0]
            factor = curve.separability(ell) if ell != 0 and result.separable[0] else 0.0
        else:
            factor = 1.0

        ratio = kernel.half_ratio
        share = curve.first_moment() ** 2 / (psi + spread)
        stats = {
            "alpha1_sq": c * (1.0 + ratio * curve.first_moment() * gamma / np.sqrt(p)) ** 2,
            "sigma1_sq": c * ratio ** 2 * psi / p,
            "alpha2_sq": c * share * gamma ** 2 * factor,
            "sigma2_sq": c * (1.0 - share * float(c @ gamma ** 2) * factor),
            "cross12_sq": c ** 2 / p * ratio ** 2 * psi ** 2 / (psi + spread) * factor,
        }
        result.stats.update(stats)
        return result

    # ------------------------------------------------------------------
    # Constant means and traces, block-symmetric covariances
    # ------------------------------------------------------------------

    @staticmethod
    def _block_spectrum(D1: np.ndarray, D2: np.ndarray, k: int, p: Optional[int] = None):
        """Atoms of (k-1)D1 + D2 and the (1/p)-normalized traces of the block model."""
        D1, D2 = np.asarray(D1, dtype=float), np.asarray(D2, dtype=float)
        if D1.shape != D2.shape:
            raise DimensionError(f"D1 and D2 must share a shape, got {D1.shape} and {D2.shape}")
        if p is not None and (p % k != 0 or p // k != D1.shape[0]):
            raise DimensionError(f"block model needs p divisible by k with blocks of size p/k (p={p}, k={k})")
        p = D1.shape[0] * k

        def trace_sq(X):
            return float(np.sum(X ** 2))

        def diag(X):
            return X if X.ndim == 1 else np.diag(X)

        combined = (k - 1) * D1 + D2
        atoms = combined if combined.ndim == 1 else np.linalg.eigvalsh(combined)
        tau_d = trace_sq(D1 - D2) / p
        second = ((k - 1) * trace_sq(D1) + trace_sq(D2)) / p
        diag_second = ((k - 1) * np.sum(diag(D1) ** 2) + np.sum(diag(D2) ** 2)) / p
        return atoms, tau_d, second, float(diag_second)

    def trace_const_curve(self, D1: np.ndarray, D2: np.ndarray, k: int, c0: float) -> InverseStieltjesCurve:
        """Curve of C° = blockdiag((k-1)D1 + D2)/k: atoms of nu scaled by 1/k."""
        atoms = self._block_spectrum(D1, D2, k)[0]
        return InverseStieltjesCurve.from_measure(atoms, None, c0).scaled(1.0 / k)

    def trace_const_spikes(
        self,
        D1: np.ndarray,
        D2: np.ndarray,
        k: int,
        c0: float,
        kernel: KernelProfile,
        kappa: float = 0.0,
        p: Optional[int] = None,
    ) -> SpecialCaseResult:
        """
        Generic: ell = -(s/k) tau_D with multiplicity k - 1 and ell_+ = q psi;
        zero-derivative: rho0 = 2 b tau_D / (c0 k) and rho0_+ = b psi / c0
        """
        atoms, tau_d, second, diag_second = self._block_spectrum(D1, D2, k, p)
        curve = InverseStieltjesCurve.from_measure(atoms, None, c0).scaled(1.0 / k)
        psi = 2.0 * second + kappa * diag_second
        result = SpecialCaseResult(regime=TRACE_CONSTANT, stats={"tau_d": tau_d, "psi": psi})

        if not kernel.generic:
            rho0 = 2.0 * kernel.b * tau_d / (c0 * k)
            rho0_plus = kernel.b * psi / c0
            for rho, multiplicity, informative in ((rho0, k - 1, True), (rho0_plus, 1, False)):
                if rho == 0:
                    continue
                result.spikes.append(
                    SpikeReport(
                        rho=rho,
                        lambda_l=map_to_L(kernel, rho, Branch.ZERO_DERIVATIVE),
                        multiplicity=multiplicity,
                        informative=informative,
                        branch=Branch.ZERO_DERIVATIVE,
                        location=SpikeLocation.ABOVE if rho > 0 else SpikeLocation.BELOW,
                    )
                )
            result.separable = [rho0 != 0, rho0_plus != 0]
            result.spikes.sort(key=lambda s: s.lambda_l, reverse=True)
            return result

        ell = -kernel.s * tau_d / k
        ell_plus = kernel.q * psi
        result.ell = [ell, ell_plus]
        for value, multiplicity, informative in ((ell, k - 1, True), (ell_plus, 1, False)):
            valid = value != 0 and curve.derivative(-1.0 / value) > 0
            result.separable.append(valid)
            if not valid:
                continue
            rho = curve.rho(value)
            result.spikes.append(
                SpikeReport(
                    rho=rho,
                    lambda_l=map_to_L(kernel, rho),
                    multiplicity=multiplicity,
                    informative=informative,
                    branch=Branch.GENERIC,
                    location=curve.location(value),
                )
            )
        result.spikes.sort(key=lambda s: s.lambda_l, reverse=True)
        return result

    def trace_const_projection(
        self,
        k: int,
        c0: float,
        curve: InverseStieltjesCurve,
        ell: Optional[float],
        informative: bool = True,
    ) -> Tuple[np.ndarray, float]:
        """
        (1/p) J^T Pi J = (1/(k c0)) (1 - c0 int v^2/(v - ell)^2) [I - 11^T/k] with v the
        atoms of C°; ell=None is the zero-derivative branch where the factor is 1.
        Returns the matrix and its alignment metric (k - 1) * factor.
        """
        if not informative:
            return np.zeros((k, k)), 0.0
        factor = 1.0 if ell is None else curve.separability(ell)
        centering = np.eye(k) - np.ones((k, k)) / k
        return factor / (k * c0) * centering, (k - 1) * factor

    # ------------------------------------------------------------------
    # Regime detection on a mixture
    # ------------------------------------------------------------------

    def detect_regime(self, system: MixtureSystem, tol: float = 1e-10) -> Optional[str]:
        if system.k < 2:
            return None
        if system.frame.is_equal(tol):
            return EQUAL_COVARIANCE
        if np.abs(system.stats.M).max() > tol:
            return None
        specs = [cls.covariance for cls in system.model.classes]
        if all(isinstance(s, BlockSymmetricCovariance) for s in specs):
            same_blocks = all(
                np.allclose(s.d1, specs[0].d1) and np.allclose(s.d2, specs[0].d2) for s in specs
            )
            positions = [s.position for s in specs] == list(range(system.k))
            sizes = {cls.size for cls in system.model.classes}
            if same_blocks and positions and len(sizes) == 1:
                return TRACE_CONSTANT
        if self._scale_factors(system, tol) is not None:
            return SCALED_COVARIANCE
        return None

    @staticmethod
    def _scale_factors(system: MixtureSystem, tol: float) -> Optional[np.ndarray]:
        base = system.frame.class_matrix(0)
        traces = system.frame.traces()
        if traces[0] == 0:
            return None
        ratios = traces / traces[0]
        for a in range(1, system.k):
            if not np.allclose(system.frame.class_matrix(a), ratios[a] * base, atol=tol * max(1.0, np.abs(base).max())):
                return None
        return ratios

    def analyze(self, system: MixtureSystem, kernel: KernelProfile) -> Optional[SpecialCaseResult]:
        """Closed-form spikes for the detected special case, or None outside them."""
        regime = self.detect_regime(system)
        if regime is None:
            return None
        logger.info(f"Closed-form regime detected: {regime}")
        c, c0, psi = system.c, system.c0, float(system.c @ system.stats.psi_var)

        if regime == EQUAL_COVARIANCE:
            C = system.frame.class_matrix(0)
            if kernel.generic:
                return self.equal_cov_spikes(system.stats.M, c, c0, C, kernel, psi)
            result = SpecialCaseResult(regime=regime)
            rho = kernel.b * system.psi_scale
            result.spikes.append(
                SpikeReport(
                    rho=rho,
                    lambda_l=map_to_L(kernel, rho, Branch.ZERO_DERIVATIVE),
                    multiplicity=1,
                    informative=False,
                    branch=Branch.ZERO_DERIVATIVE,
                    location=SpikeLocation.ABOVE if rho > 0 else SpikeLocation.BELOW,
                )
            )
            return result

        if regime == TRACE_CONSTANT:
            blocks = system.model.classes[0].covariance
            return self.trace_const_spikes(blocks.d1, blocks.d2, system.k, c0, kernel, system.kappa, system.p)

        ratios = self._scale_factors(system, 1e-10)
        scale = float(c @ ratios)
        gamma = np.sqrt(system.p) * (ratios / scale - 1.0)
        atoms, weights = system.frame.class_atoms(0)
        curve = InverseStieltjesCurve.from_measure(atoms * scale, weights, c0)
        return self.scaled_cov_clustering(gamma, c, c0, curve, kernel, system.p, psi)
