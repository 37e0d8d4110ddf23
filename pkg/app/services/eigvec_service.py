from typing import List, Optional, Tuple
import logging

import numpy as np

from app.exceptions import DegenerateSpikeError, ExtractionError, NonInformativeError
from app.models import Branch, EigvecStats, KernelProfile, ProjectionEstimate, SpikeReport
from app.services.model_service import MixtureSystem
from app.services.rmt_service import RMTService

logger = logging.getLogger(__name__)


def _null_vectors(G: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Right and left (approximate) null vectors of G from its m smallest singular values."""
    U, _, Vh = np.linalg.svd(G)
    return Vh[-m:].T, U[:, -m:]


class EigvecService:
    """
    Asymptotic statistics of the isolated eigenvectors of L: projections on the
    class indicators, class-wise means and fluctuations, and the first eigenvector
    """

    def __init__(self, rmt: Optional[RMTService] = None, tolerance: float = 1e-8):
        self.rmt = rmt or RMTService()
        self.tolerance = tolerance

    # ------------------------------------------------------------------
    # Projections
    # ------------------------------------------------------------------

    def _bundle(self, system: MixtureSystem, kernel: KernelProfile, spike: SpikeReport):
        if spike.branch == Branch.GENERIC:
            solution = self.rmt.solve_g(system, spike.rho)
            bundle = self.rmt.G_z(system, kernel, spike.rho, solution)
            derivative = self.rmt.G_prime(system, kernel, spike.rho, solution)
        else:
            bundle = self.rmt.G0_z(system, kernel, spike.rho)
            derivative = self.rmt.G0_prime(system, kernel, spike.rho)
        return bundle, derivative

    def projection_matrix(self, system: MixtureSystem, kernel: KernelProfile, spike: SpikeReport) -> ProjectionEstimate:
        """
        (1/p) J^T Pi_rho J = -h Gamma Xi with Xi = Vr (Vl^T G' Vr)^{-1} Vl^T
        """
        bundle, derivative = self._bundle(system, kernel, spike)
        m = spike.multiplicity
        Vr, Vl = _null_vectors(bundle.G, m)
        denominator = Vl.T @ derivative @ Vr
        if np.linalg.svd(denominator, compute_uv=False).min() < 1e-12:
            raise DegenerateSpikeError(f"Vl^T G' Vr is singular at rho={spike.rho:.10g}")
        Xi = Vr @ np.linalg.solve(denominator, Vl.T)
        P = -bundle.h * bundle.gamma @ Xi
        P = 0.5 * (P + P.T)

        estimate = ProjectionEstimate(
            rho=spike.rho, P=P, Xi=Xi, Vr=Vr, Vl=Vl, multiplicity=m, informative=spike.informative
        )
        if spike.near_degenerate:
            estimate.warnings.append(f"rho={spike.rho:.10g} is close to another spike; the projection may mix both")
            logger.warning(estimate.warnings[-1])
        return estimate

    def alpha_from_projection(self, estimate: ProjectionEstimate, c: np.ndarray, c0: float) -> np.ndarray:
        """
        Class-wise means alpha_a = sqrt(c0 P_aa / c_a) with signs read off the
        first row whose diagonal entry is nonzero; that entry's alpha is made nonnegative
        """
        if estimate.multiplicity != 1:
            raise DegenerateSpikeError("class-wise means need a spike of unit multiplicity")
        P = estimate.P
        diagonal = np.diag(P)
        admissible = np.flatnonzero(diagonal > 1e-12)
        if admissible.size == 0:
            raise NonInformativeError(f"projection at rho={estimate.rho:.10g} has no nonzero diagonal entry")
        reference = admissible[0]
        magnitude = np.sqrt(np.clip(c0 * diagonal / c, 0.0, None))
        signs = np.where(P[reference] < 0, -1.0, 1.0)
        signs[reference] = 1.0
        return signs * magnitude

    def alignment_metric(self, estimate: ProjectionEstimate, c: np.ndarray, n: int, p: int) -> float:
        """tr(diag(c)^{-1} (1/n) J^T Pi J), in [0, multiplicity]"""
        value = float(p / n * np.sum(np.diag(estimate.P) / c))
        upper = float(estimate.multiplicity)
        if value < -self.tolerance or value > upper + self.tolerance:
            estimate.warnings.append(f"alignment {value:.6g} outside [0, {upper:g}], clipped")
            logger.warning(estimate.warnings[-1])
        return float(np.clip(value, 0.0, upper))

    # ------------------------------------------------------------------
    # Fluctuations
    # ------------------------------------------------------------------

    def _cross_blocks_E(self, system, kernel, spike_i, spike_j, est_i, est_j) -> List[np.ndarray]:
        """h h~ Xi^T E_a Xi~ for every class a"""
        c, c0, stats = system.c, system.c0, system.stats
        if spike_i.branch == Branch.GENERIC:
            s_i = self.rmt.solve_g(system, spike_i.rho)
            s_j = self.rmt.solve_g(system, spike_j.rho)
            b_i = self.rmt.G_z(system, kernel, spike_i.rho, s_i)
            b_j = self.rmt.G_z(system, kernel, spike_j.rho, s_j)
            blocks = self.rmt.cross_blocks(system, spike_i.rho, spike_j.rho, s_i, s_j)
            trend = b_i.gamma @ np.outer(stats.t, stats.t) @ b_j.gamma
            E = [
                blocks.EJ[a] + b_i.gamma @ blocks.EM[a] @ b_j.gamma + kernel.q ** 2 * blocks.Epsi[a] * trend
                for a in range(system.k)
            ]
        else:
            b_i = self.rmt.G0_z(system, kernel, spike_i.rho)
            b_j = self.rmt.G0_z(system, kernel, spike_j.rho)
            scale = 1.0 / (spike_i.rho * spike_j.rho)
            trend = b_i.gamma @ np.outer(stats.t, stats.t) @ b_j.gamma
            E = []
            for a in range(system.k):
                EJ = np.zeros((system.k, system.k))
                EJ[a, a] = c[a] / c0 * scale
                Epsi = c[a] / c0 * stats.psi_var[a] * scale
                E.append(EJ + kernel.b ** 2 * Epsi * trend)
        return [b_i.h * b_j.h * est_i.Xi.T @ Ea @ est_j.Xi for Ea in E]

    def fluctuations(
        self,
        system: MixtureSystem,
        kernel: KernelProfile,
        spike_i: SpikeReport,
        spike_j: SpikeReport,
        est_i: Optional[ProjectionEstimate] = None,
        est_j: Optional[ProjectionEstimate] = None,
    ) -> np.ndarray:
        """
        sigma_a^{ij} per class, from (1/p) J^T Pi_i D_a Pi_j J; on the diagonal i = j
        this is the class-wise variance sigma_a^2
        """
        if not (spike_i.informative and spike_j.informative):
            raise NonInformativeError("fluctuations need two informative spikes")
        c, c0 = system.c, system.c0
        est_i = est_i or self.projection_matrix(system, kernel, spike_i)
        est_j = est_j or self.projection_matrix(system, kernel, spike_j)
        alpha_i = self.alpha_from_projection(est_i, c, c0)
        alpha_j = self.alpha_from_projection(est_j, c, c0)

        first_i = np.flatnonzero(np.abs(alpha_i) > 1e-8)
        first_j = np.flatnonzero(np.abs(alpha_j) > 1e-8)
        if first_i.size == 0 or first_j.size == 0:
            raise ExtractionError("no class with a nonzero mean to extract fluctuations from")
        b, d = first_i[0], first_j[0]

        Y = self._cross_blocks_E(system, kernel, spike_i, spike_j, est_i, est_j)
        return np.array([
            c0 * Y[a][b, d] / (np.sqrt(c[b] * c[d]) * alpha_i[b] * alpha_j[d]) - alpha_i[a] * alpha_j[a]
            for a in range(system.k)
        ])

    # ------------------------------------------------------------------
    # First eigenvector D^{1/2} 1
    # ------------------------------------------------------------------

    def u1_statistics(self, system: MixtureSystem, kernel: KernelProfile) -> Tuple[np.ndarray, np.ndarray]:
        """
        Class-wise entry mean and standard deviation of D^{1/2}1 / |D^{1/2}1|
        """
        n, c0, stats = system.n, system.c0, system.stats
        ratio = kernel.half_ratio
        means = 1.0 / np.sqrt(n) + stats.t * ratio / (n * np.sqrt(c0))
        stds = np.sqrt(stats.psi_var) * abs(ratio) / (n * np.sqrt(c0))
        return means, stds

    def cross_fluct_u1(
        self,
        system: MixtureSystem,
        kernel: KernelProfile,
        spike: SpikeReport,
        estimate: Optional[ProjectionEstimate] = None,
    ) -> np.ndarray:
        """sigma_a^{1,j} between D^{1/2}1 and an informative eigenvector, per class"""
        c, c0, stats = system.c, system.c0, system.stats
        estimate = estimate or self.projection_matrix(system, kernel, spike)
        alpha = self.alpha_from_projection(estimate, c, c0)
        admissible = np.flatnonzero(np.abs(alpha) > 1e-8)
        if admissible.size == 0:
            raise ExtractionError("no class with a nonzero mean to extract u1 cross-fluctuations from")
        d = admissible[0]

        if spike.branch == Branch.GENERIC:
            solution = self.rmt.solve_g(system, spike.rho)
            gamma = self.rmt.gamma_z(system, spike.rho, solution)
            weights = c * solution.g.real * stats.psi_var * kernel.q
        else:
            gamma = self.rmt.G0_z(system, kernel, spike.rho).gamma
            weights = c / (c0 * spike.rho) * stats.psi_var * kernel.b
        row = stats.t @ gamma @ estimate.Xi
        X = weights[:, None] * row[None, :]
        prefactor = np.sqrt(system.p) / system.n * kernel.half_ratio
        return prefactor * X[:, d] / (np.sqrt(c[d]) * alpha[d])

    # ------------------------------------------------------------------

    def statistics(
        self,
        system: MixtureSystem,
        kernel: KernelProfile,
        spikes: List[SpikeReport],
    ) -> Tuple[EigvecStats, List[ProjectionEstimate]]:
        """
        alpha, sigma^2 and cross-fluctuations for every informative spike of unit multiplicity
        """
        usable = [s for s in spikes if s.informative and s.excluded_reason is None and s.multiplicity == 1]
        estimates = [self.projection_matrix(system, kernel, s) for s in usable]
        flags: List[str] = []
        k = system.k
        alpha = np.zeros((len(usable), k))
        sigma2 = np.zeros((len(usable), k))
        cross = np.zeros((len(usable), len(usable), k))

        for i, estimate in enumerate(estimates):
            alpha[i] = self.alpha_from_projection(estimate, system.c, system.c0)
        for i in range(len(usable)):
            for j in range(i, len(usable)):
                values = self.fluctuations(system, kernel, usable[i], usable[j], estimates[i], estimates[j])
                cross[i, j] = cross[j, i] = values
            if np.any(cross[i, i] < -self.tolerance):
                flags.append(f"negative variance clipped for spike {i} (rho={usable[i].rho:.6g})")
                logger.warning(flags[-1])
            sigma2[i] = np.clip(cross[i, i], 0.0, None)
            total = float(np.sum(alpha[i] ** 2) + np.sum(sigma2[i]))
            if total > 1.0 + 0.1:
                flags.append(f"alpha^2 + sigma^2 = {total:.4f} exceeds one for spike {i}")
                logger.warning(flags[-1])

        for i in range(len(usable)):
            for j in range(i + 1, len(usable)):
                bound = sigma2[i] * sigma2[j] * (1.0 + 1e-6)
                if np.any(cross[i, j] ** 2 > bound + self.tolerance):
                    flags.append(f"Cauchy-Schwarz violated between spikes {i} and {j}")
                    logger.warning(flags[-1])

        return EigvecStats(alpha=alpha, sigma2=sigma2, cross=cross, flags=flags), estimates
