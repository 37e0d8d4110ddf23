from dataclasses import replace
from typing import List, Optional, Tuple
import logging

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import brentq, minimize_scalar

from app.config import settings
from app.exceptions import PoleError, SolverDivergence
from app.models import Branch, KernelProfile, SpectralSupport, SpikeLocation, SpikeReport
from app.services.model_service import MixtureSystem
from app.services.rmt_service import RMTService

logger = logging.getLogger(__name__)


def map_to_L(kernel: KernelProfile, rho: float, branch: Optional[Branch] = None) -> float:
    """
    Generic: -2(f'/f) rho + 2(f'/f) F(tau); zero-derivative: rho + (f(0) - f(tau))/f(tau)
    """
    branch = branch or kernel.branch
    if branch == Branch.GENERIC:
        slope = 2.0 * kernel.f1 / kernel.ftau
        return -slope * rho + slope * kernel.F
    return rho + kernel.shift0


class Segment:
    """An off-support search interval with the end the real solves start from."""

    def __init__(self, lo: float, hi: float, location: SpikeLocation, gap_index: Optional[int] = None):
        self.lo, self.hi = lo, hi
        self.location = location
        self.gap_index = gap_index

    def grid(self, points: int) -> np.ndarray:
        xs = np.linspace(self.lo, self.hi, points)
        # walk in from the side away from the bulk so warm starts stay on the right branch
        return xs[::-1] if self.location == SpikeLocation.ABOVE else xs


class SpikeService:
    def __init__(self, rmt: Optional[RMTService] = None):
        self.rmt = rmt or RMTService()
        self.grid_points = settings.root_grid_points
        self.exterior_factor = settings.exterior_factor
        self.root_tolerance = settings.root_tolerance
        self.multiplicity_tolerance = settings.multiplicity_tolerance
        self.window = settings.exclusion_window
        self.edge_tolerance = settings.edge_tolerance

    def map_to_L(self, kernel: KernelProfile, rho: float, branch: Optional[Branch] = None) -> float:
        return map_to_L(kernel, rho, branch)

    # ------------------------------------------------------------------
    # Search geometry
    # ------------------------------------------------------------------

    def search_bound(self, system: MixtureSystem, kernel: KernelProfile, support: SpectralSupport) -> float:
        stats, c = system.stats, system.c
        ell = (
            system.frame.operator_norms().max()
            + float(c @ np.sum(stats.M ** 2, axis=0))
            + abs(kernel.s) * np.linalg.norm(stats.T, 2)
            + abs(kernel.q) * (stats.t @ stats.t + c @ stats.psi_var)
        )
        edge = max(abs(support.right_edge), abs(support.left_edge), 1.0)
        return float(max(self.exterior_factor * edge, 2.0 * ell * (1.0 / system.c0 + 2.0) + edge))

    def segments(self, system: MixtureSystem, kernel: KernelProfile, support: SpectralSupport) -> List[Segment]:
        bound = self.search_bound(system, kernel, support)
        intervals = sorted(support.intervals)
        if not intervals:
            raw = [Segment(-bound, bound, SpikeLocation.ABOVE)]
        else:
            raw = [Segment(-bound, intervals[0][0], SpikeLocation.BELOW)]
            for index, ((_, right), (left, _)) in enumerate(zip(intervals, intervals[1:])):
                raw.append(Segment(right, left, SpikeLocation.BETWEEN, index))
            raw.append(Segment(intervals[-1][1], bound, SpikeLocation.ABOVE))

        # trim bulk edges and cut out the isolated points of G
        result = []
        for segment in raw:
            margin = max(10.0 * self.edge_tolerance, 1e-6 * (1.0 + abs(segment.lo) + abs(segment.hi)))
            cuts = [x for x in support.isolated if segment.lo < x < segment.hi]
            bounds = [segment.lo] + cuts + [segment.hi]
            for lo, hi in zip(bounds, bounds[1:]):
                lo_trim = lo + (margin if lo != -bound else 0.0)
                hi_trim = hi - (margin if hi != bound else 0.0)
                if hi_trim - lo_trim > 10.0 * margin:
                    result.append(Segment(lo_trim, hi_trim, segment.location, segment.gap_index))
        return result

    # ------------------------------------------------------------------
    # Generic branch
    # ------------------------------------------------------------------

    @staticmethod
    def _complement_basis(c: np.ndarray) -> np.ndarray:
        """Orthonormal basis of {x : c^T x = 0}; G maps it into itself."""
        return null_space(c[None, :])

    def _reduced(self, system, kernel, x, basis, warm=None):
        solution = self.rmt.solve_g(system, x, initial=warm)
        bundle = self.rmt.G_z(system, kernel, x, solution)
        reduced = basis.T @ bundle.G @ basis
        eigenvalues = np.linalg.eigvals(reduced) if reduced.size else np.zeros(0)
        return bundle, np.sort(eigenvalues.real), eigenvalues

    def _min_modulus(self, eigenvalues: np.ndarray) -> float:
        return float(np.min(np.abs(eigenvalues))) if eigenvalues.size else np.inf

    def _scan(self, system, kernel, segment, basis):
        xs = segment.grid(self.grid_points)
        records = []
        warm = None
        for x in xs:
            try:
                bundle, reals, eigenvalues = self._reduced(system, kernel, x, basis, warm)
            except (SolverDivergence, PoleError):
                records.append(None)
                warm = None
                continue
            warm = bundle.solution.g
            records.append((x, bundle, reals, eigenvalues))
        order = np.argsort(xs)
        return [records[i] for i in order]

    def find_h_zeros(self, system: MixtureSystem, kernel: KernelProfile, support: SpectralSupport) -> List[float]:
        """Real off-support zeros of h(tau, .)"""
        if not kernel.generic or kernel.q == 0:
            return []
        zeros = []
        for segment in self.segments(system, kernel, support):
            xs = np.sort(segment.grid(self.grid_points))
            solutions = self.rmt.solve_path(system, xs[::-1] if segment.location == SpikeLocation.ABOVE else xs)
            if segment.location == SpikeLocation.ABOVE:
                solutions = solutions[::-1]
            values = [None if s is None else self.rmt.h_tau(system, kernel, x, s) for x, s in zip(xs, solutions)]
            for i in range(len(xs) - 1):
                if values[i] is None or values[i + 1] is None or np.sign(values[i]) == np.sign(values[i + 1]):
                    continue
                warm = solutions[i].g
                try:
                    root = brentq(
                        lambda x: self.rmt.h_tau(system, kernel, x, self.rmt.solve_g(system, x, initial=warm)),
                        xs[i],
                        xs[i + 1],
                        xtol=self.root_tolerance,
                    )
                except (ValueError, SolverDivergence, PoleError) as e:
                    logger.warning(f"Skipping the h sign change on [{xs[i]:.6g}, {xs[i + 1]:.6g}]: {e}")
                    continue
                zeros.append(float(root))
        return zeros

    def _exclusion(self, kernel: KernelProfile, rho: float, h_zeros: List[float]) -> Optional[str]:
        width = self.window * (1.0 + abs(rho))
        if abs(rho - kernel.F) < width:
            return "within the exclusion window of F(tau)"
        for zero in h_zeros:
            if abs(rho - zero) < width:
                return f"within the exclusion window of the h-zero {zero:.6g}"
        return None

    def find_spikes_generic(
        self,
        system: MixtureSystem,
        kernel: KernelProfile,
        support: SpectralSupport,
    ) -> List[SpikeReport]:
        """
        Real roots of det G_rho = 0 off the support, with multiplicities
        """
        if not kernel.generic:
            raise ValueError("find_spikes_generic needs a generic-branch kernel")
        if system.k < 2:
            return []
        basis = self._complement_basis(system.c)
        h_zeros = support.h_zeros or self.find_h_zeros(system, kernel, support)
        roots: List[Tuple[float, Segment, np.ndarray]] = []

        for segment in self.segments(system, kernel, support):
            records = self._scan(system, kernel, segment, basis)
            for left, right in zip(records, records[1:]):
                if left is None or right is None:
                    continue
                x0, bundle0, reals0, _ = left
                x1, _, reals1, _ = right
                warm = bundle0.solution.g
                crossed = np.nonzero(np.sign(reals0) != np.sign(reals1))[0]
                for j in crossed:
                    def branch_value(x, j=j):
                        return self._reduced(system, kernel, x, basis, warm)[1][j]
                    try:
                        root = brentq(branch_value, x0, x1, xtol=self.root_tolerance * 1e-2)
                    except (ValueError, SolverDivergence, PoleError):
                        continue
                    roots.append((float(root), segment, warm))

            # tangent zeros: local minima of the smallest modulus without a sign change
            moduli = [np.inf if r is None else self._min_modulus(r[3]) for r in records]
            for i in range(1, len(records) - 1):
                if records[i] is None or not (moduli[i] < moduli[i - 1] and moduli[i] < moduli[i + 1]):
                    continue
                if np.any(np.sign(records[i][2]) != np.sign(records[i - 1][2])) or np.any(
                    np.sign(records[i][2]) != np.sign(records[i + 1][2])
                ):
                    continue
                warm = records[i][1].solution.g
                try:
                    result = minimize_scalar(
                        lambda x: self._min_modulus(self._reduced(system, kernel, x, basis, warm)[2]),
                        bracket=(records[i - 1][0], records[i][0], records[i + 1][0]),
                        method="golden",
                        tol=1e-12,
                    )
                except (ValueError, SolverDivergence, PoleError):
                    continue
                norm = np.linalg.norm(records[i][1].G, 2)
                if result.fun < self.multiplicity_tolerance * (1.0 + norm):
                    roots.append((float(result.x), segment, warm))

        reports = self._assemble(system, kernel, roots, basis, h_zeros)
        logger.info(f"Found {len(reports)} informative spike(s) on the generic branch")
        return reports

    def _assemble(self, system, kernel, roots, basis, h_zeros) -> List[SpikeReport]:
        roots = sorted(roots, key=lambda r: r[0])
        merged: List[Tuple[float, Segment, np.ndarray]] = []
        for root in roots:
            if merged and abs(root[0] - merged[-1][0]) <= 1e-8 * (1.0 + abs(root[0])):
                continue
            merged.append(root)

        reports = []
        for rho, segment, warm in merged:
            bundle, _, eigenvalues = self._reduced(system, kernel, rho, basis, warm)
            norm = np.linalg.norm(bundle.G, 2)
            modulus = self._min_modulus(eigenvalues)
            # a sign change of a complex pair's real part or across a pole is not a root
            if modulus > 1e-6 * (1.0 + norm):
                continue
            multiplicity = int(np.sum(np.abs(eigenvalues) < self.multiplicity_tolerance * (1.0 + norm)))
            reports.append(
                SpikeReport(
                    rho=rho,
                    lambda_l=self.map_to_L(kernel, rho),
                    multiplicity=max(1, multiplicity),
                    informative=True,
                    branch=Branch.GENERIC,
                    location=segment.location,
                    gap_index=segment.gap_index,
                    h_value=bundle.h,
                    residual=modulus,
                    excluded_reason=self._exclusion(kernel, rho, h_zeros),
                )
            )
        self._flag_near_degenerate(reports)
        return sorted(reports, key=lambda r: r.lambda_l, reverse=True)

    def _flag_near_degenerate(self, reports: List[SpikeReport]) -> None:
        for first, second in zip(reports, reports[1:]):
            if abs(first.rho - second.rho) < 10.0 * self.root_tolerance * (1.0 + abs(first.rho)):
                first.near_degenerate = second.near_degenerate = True
                logger.warning(f"Spikes at {first.rho:.10g} and {second.rho:.10g} are nearly degenerate")

    def find_spikes_noninformative(
        self,
        system: MixtureSystem,
        kernel: KernelProfile,
        support: SpectralSupport,
    ) -> List[SpikeReport]:
        """
        Roots of det H_z = 0 in a neighborhood of each off-support zero of h(tau, .)
        """
        if not kernel.generic:
            raise ValueError("find_spikes_noninformative needs a generic-branch kernel")
        h_zeros = support.h_zeros or self.find_h_zeros(system, kernel, support)
        reports = []
        for zero in h_zeros:
            delta = max(1e-3 * (1.0 + abs(zero)), 100.0 * self.window)
            warm = self.rmt.solve_g(system, zero).g

            def det_h(x):
                solution = self.rmt.solve_g(system, x, initial=warm)
                return float(np.linalg.det(self.rmt.H_z(system, kernel, x, solution)))

            xs = np.linspace(zero - delta, zero + delta, 41)
            values = []
            for x in xs:
                try:
                    values.append(det_h(x))
                except (SolverDivergence, PoleError):
                    values.append(np.nan)
            values = np.asarray(values)
            scale = np.nanmax(np.abs(values)) if np.any(np.isfinite(values)) else 1.0

            candidates = []
            for i in range(len(xs) - 1):
                if not (np.isfinite(values[i]) and np.isfinite(values[i + 1])):
                    continue
                if values[i] == 0.0:
                    candidates.append(xs[i])
                elif np.sign(values[i]) != np.sign(values[i + 1]):
                    try:
                        root = brentq(det_h, xs[i], xs[i + 1], xtol=self.root_tolerance)
                        if abs(det_h(root)) <= 1e-6 * max(scale, 1e-300):
                            candidates.append(root)
                    except (ValueError, SolverDivergence, PoleError) as e:
                        logger.warning(f"Skipping the det H sign change on [{xs[i]:.6g}, {xs[i + 1]:.6g}]: {e}")
            if not candidates:
                logger.info(f"No root of det H near h-zero {zero:.6g}; it does not map to an isolated eigenvalue")
                continue
            rho = float(min(candidates, key=lambda r: abs(r - zero)))
            location = SpikeLocation.ABOVE if rho > support.right_edge else (
                SpikeLocation.BELOW if rho < support.left_edge else SpikeLocation.BETWEEN
            )
            reports.append(
                SpikeReport(
                    rho=rho,
                    lambda_l=self.map_to_L(kernel, rho),
                    multiplicity=1,
                    informative=False,
                    branch=Branch.GENERIC,
                    location=location,
                    h_value=self.rmt.h_tau(system, kernel, rho, self.rmt.solve_g(system, rho, initial=warm)),
                    residual=abs(det_h(rho)),
                )
            )
        return reports

    # ------------------------------------------------------------------
    # Zero-derivative branch
    # ------------------------------------------------------------------

    def zero_derivative_matrix(self, system: MixtureSystem, kernel: KernelProfile) -> Tuple[np.ndarray, np.ndarray]:
        """
        Symmetric (k+1) x (k+1) pencil whose nonzero eigenvalues are the rho0 of
        det G0_rho = 0, and the trivial null direction it carries
        """
        k, c, c0, stats, b = system.k, system.c, system.c0, system.stats, kernel.b
        weights = np.sqrt(np.concatenate([c / c0, [system.psi_scale]]))
        B0 = np.zeros((k + 1, k + 1))
        B0[:k, :k] = b * (2.0 * stats.T + np.outer(stats.t, stats.t))
        B0[:k, k] = b * stats.t
        B0[k, :k] = b * stats.t
        B0[k, k] = b
        S = weights[:, None] * B0 * weights[None, :]
        trivial = np.concatenate([np.sqrt(c / c0), [0.0]])
        return 0.5 * (S + S.T), trivial / np.linalg.norm(trivial)

    def find_spikes_zero_derivative(self, system: MixtureSystem, kernel: KernelProfile) -> List[SpikeReport]:
        S, trivial = self.zero_derivative_matrix(system, kernel)
        basis = null_space(trivial[None, :])
        values = np.linalg.eigvalsh(basis.T @ S @ basis)
        scale = 1.0 + np.abs(values).max(initial=0.0)
        values = values[np.abs(values) > 1e-10 * scale]

        plus = kernel.b * system.psi_scale
        groups: List[List[float]] = []
        for value in np.sort(values):
            if groups and abs(value - groups[-1][-1]) <= self.multiplicity_tolerance * (1.0 + abs(value)):
                groups[-1].append(value)
            else:
                groups.append([value])

        reports = []
        for group in groups:
            rho = float(np.mean(group))
            reports.append(
                SpikeReport(
                    rho=rho,
                    lambda_l=self.map_to_L(kernel, rho, Branch.ZERO_DERIVATIVE),
                    multiplicity=len(group),
                    informative=abs(rho - plus) > self.window * (1.0 + abs(rho)),
                    branch=Branch.ZERO_DERIVATIVE,
                    location=SpikeLocation.ABOVE if rho > 0 else SpikeLocation.BELOW,
                    h_value=1.0 - plus / rho,
                )
            )
        return sorted(reports, key=lambda r: r.lambda_l, reverse=True)

    # ------------------------------------------------------------------

    def find_spikes(
        self,
        system: MixtureSystem,
        kernel: KernelProfile,
        support: Optional[SpectralSupport] = None,
    ) -> Tuple[List[SpikeReport], Optional[SpectralSupport]]:
        if not kernel.generic:
            return self.find_spikes_zero_derivative(system, kernel), support
        support = support or self.rmt.scan_support(system)
        support = replace(support, h_zeros=self.find_h_zeros(system, kernel, support), exclusion_f=kernel.F)
        spikes = self.find_spikes_generic(system, kernel, support) + self.find_spikes_noninformative(
            system, kernel, support
        )
        return sorted(spikes, key=lambda r: r.lambda_l, reverse=True), support
