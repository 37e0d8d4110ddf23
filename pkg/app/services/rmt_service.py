from typing import Callable, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.optimize import brentq

from app.config import settings
from app.exceptions import PoleError, SolverDivergence, SpectralRadiusError
from app.models import (
    Branch,
    GMatrixBundle,
    KernelProfile,
    ResolventCrossBlocks,
    SpectralSupport,
    StieltjesSolution,
)
from app.services.model_service import MixtureSystem
from app.utils.retry import solver_attempts

logger = logging.getLogger(__name__)

# Heights of the continuation ladder, relative to 1 + |x|
LADDER = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5)


def _gamma(c: np.ndarray, g: np.ndarray) -> np.ndarray:
    cg = c * g
    total = cg.sum()
    if abs(total) < 1e-14:
        raise PoleError("sum_a c_a g_a(z) vanishes: z is a zero of g°")
    return np.diag(cg) - np.outer(cg, cg) / total


# Class-block algebra: (alpha, S) stands for diag(alpha per class) + (1/n) J S J^T
def _block_mul(x, y, c):
    ax, Sx = x
    ay, Sy = y
    return ax * ay, ax[:, None] * Sy + Sx * ay[None, :] + Sx @ np.diag(c) @ Sy


def _block_project(x, c, c0):
    """(1/p) J^T X J"""
    alpha, S = x
    return (np.diag(alpha * c) + np.diag(c) @ S @ np.diag(c)) / c0


class RMTService:
    """
    Deterministic equivalents of the kernel Laplacian: Stieltjes fixed point,
    bulk support, and the z-dependent small matrices built on top of them
    """

    def __init__(
        self,
        tolerance: Optional[float] = None,
        max_iterations: Optional[int] = None,
        damping: Optional[float] = None,
        patience: Optional[int] = None,
        retry_attempts: Optional[int] = None,
    ):
        self.tolerance = settings.solver_tolerance if tolerance is None else tolerance
        self.max_iterations = settings.solver_max_iterations if max_iterations is None else max_iterations
        self.damping = settings.solver_damping if damping is None else damping
        self.patience = settings.solver_patience if patience is None else patience
        self.retry_attempts = settings.solver_retry_attempts if retry_attempts is None else retry_attempts
        self.epsilon = settings.support_epsilon
        self.density_threshold = settings.density_threshold
        self.edge_tolerance = settings.edge_tolerance
        self.resolution = settings.support_resolution
        self.fd_step = settings.finite_difference_step

    # ------------------------------------------------------------------
    # Fixed point
    # ------------------------------------------------------------------

    def _map(self, system: MixtureSystem, z: complex, g: np.ndarray) -> np.ndarray:
        """c0 g_a = -1/z (1 + (1/p) tr C_a Q~_z)^{-1}"""
        trace = system.frame.trace_q(z, system.c * g)
        return -1.0 / (z * system.c0 * (1.0 + trace))

    def _jacobian(self, system: MixtureSystem, z: complex, g: np.ndarray, mapped: np.ndarray) -> np.ndarray:
        v = system.c * g
        X = system.frame.cross_trace_q(z, v, z, v)
        return (z * z * system.c0) * (mapped ** 2)[:, None] * X * system.c[None, :]

    @staticmethod
    def _admissible(z: complex, g: np.ndarray) -> bool:
        if not np.all(np.isfinite(g)):
            return False
        if z.imag > 0:
            return bool(np.all(g.imag > 0))
        if z.imag < 0:
            return bool(np.all(g.imag < 0))
        return True

    def _iterate(
        self,
        system: MixtureSystem,
        z: complex,
        g: np.ndarray,
        damping: float,
        max_iterations: int,
    ) -> Tuple[np.ndarray, float, int]:
        """
        Damped fixed-point iteration with a backtracking Newton step on g - F(g)
        """
        g = np.array(g, dtype=complex)
        theta, stalls, previous = 1.0, 0, np.inf
        residual = np.inf
        identity = np.eye(system.k)
        for iteration in range(max_iterations):
            mapped = self._map(system, z, g)
            if not np.all(np.isfinite(mapped)):
                err = SolverDivergence(f"non-finite iterate at z={z}", residual)
                err.last = g
                raise err
            residual = float(np.max(np.abs(mapped - g)))
            if residual < self.tolerance * max(1.0, float(np.max(np.abs(g)))):
                return g, residual, iteration

            try:
                step = np.linalg.solve(identity - self._jacobian(system, z, g, mapped), mapped - g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                lam = 1.0
                while lam >= 1.0 / 64:
                    candidate = g + lam * step
                    if self._admissible(z, candidate):
                        trial = self._map(system, z, candidate)
                        if np.all(np.isfinite(trial)) and np.max(np.abs(trial - candidate)) < residual:
                            g = candidate
                            break
                    lam /= 2.0
                else:
                    step = None
            if step is None:
                if residual >= previous:
                    stalls += 1
                if stalls >= self.patience:
                    theta = damping
                g = theta * mapped + (1.0 - theta) * g
            previous = residual

        err = SolverDivergence(f"fixed point did not converge at z={z} after {max_iterations} iterations", residual)
        err.last = g
        raise err

    def _solve(
        self,
        system: MixtureSystem,
        z: complex,
        start: np.ndarray,
        max_iterations: Optional[int] = None,
    ) -> StieltjesSolution:
        state = {"g": np.array(start, dtype=complex)}
        cap = self.max_iterations if max_iterations is None else max_iterations
        for attempt in solver_attempts(self.retry_attempts):
            with attempt:
                damping = self.damping * 0.5 ** (attempt.retry_state.attempt_number - 1)
                try:
                    g, residual, iterations = self._iterate(system, z, state["g"], damping, cap)
                except SolverDivergence as e:
                    state["g"] = getattr(e, "last", state["g"])
                    raise
        if z.imag == 0:
            g = g.real.astype(complex)
        return StieltjesSolution(
            z=z,
            g=g,
            g_circ=complex(system.c0 * np.sum(system.c * g)),
            residual=residual,
            iterations=iterations,
        )

    def _continuation(self, system: MixtureSystem, x: float, height: float) -> StieltjesSolution:
        scale = 1.0 + abs(x)
        z = complex(x, scale)
        g = -np.ones(system.k, dtype=complex) / (system.c0 * z)
        solution = None
        for eta in [scale * r for r in LADDER if scale * r > height] + [height]:
            z = complex(x, eta)
            solution = self._solve(system, z, g)
            g = solution.g
        return solution

    def solve_at_height(
        self,
        system: MixtureSystem,
        x: float,
        height: float,
        initial: Optional[np.ndarray] = None,
    ) -> StieltjesSolution:
        if initial is not None:
            try:
                solution = self._solve(system, complex(x, height), initial, max_iterations=200)
                if self._admissible(solution.z, solution.g):
                    return solution
            except SolverDivergence:
                pass
        return self._continuation(system, x, height)

    def solve_g(
        self,
        system: MixtureSystem,
        z: complex,
        initial: Optional[np.ndarray] = None,
    ) -> StieltjesSolution:
        """
        Vector (g_1(z), ..., g_k(z)) of Stieltjes transforms.

        Off the real axis the fixed point is solved directly. On the real axis the
        point is first approached from z + i*epsilon; a non-negligible density
        there means z lies in the bulk and the call fails.
        """
        z = complex(z)
        if z.imag != 0:
            start = initial if initial is not None else -np.ones(system.k) / (system.c0 * z)
            return self._solve(system, z, start)

        if initial is not None:
            try:
                return self._solve(system, z, np.real(initial), max_iterations=200)
            except SolverDivergence:
                logger.debug(f"Warm start failed at x={z.real}, falling back to continuation")

        lifted = self._continuation(system, z.real, self.epsilon)
        if lifted.g_circ.imag > self.density_threshold:
            raise SolverDivergence(f"z={z.real} lies inside the bulk support", float(lifted.g_circ.imag))
        return self._solve(system, z, lifted.g.real)

    def solve_path(
        self,
        system: MixtureSystem,
        xs: Sequence[float],
    ) -> List[Optional[StieltjesSolution]]:
        """Real solves along an ordered path, warm-starting from the previous point."""
        solutions: List[Optional[StieltjesSolution]] = []
        previous = None
        for x in xs:
            try:
                solution = self.solve_g(system, x, initial=None if previous is None else previous.g)
            except SolverDivergence:
                solution = None
            solutions.append(solution)
            previous = solution
        return solutions

    def g_circ(self, system: MixtureSystem, z: complex) -> complex:
        return self.solve_g(system, z).g_circ

    # ------------------------------------------------------------------
    # Support
    # ------------------------------------------------------------------

    def default_interval(self, system: MixtureSystem) -> Tuple[float, float]:
        edge = float(system.frame.operator_norms().max()) * (1.0 + np.sqrt(1.0 / system.c0)) ** 2
        return -0.1 * edge - 0.1, 1.2 * edge + 0.1

    def _in_support(self, solution: StieltjesSolution) -> bool:
        return solution.g_circ.imag > self.density_threshold

    def scan_support(
        self,
        system: MixtureSystem,
        interval: Optional[Tuple[float, float]] = None,
        resolution: Optional[int] = None,
    ) -> SpectralSupport:
        """
        Bulk intervals of the limiting spectrum of PW^TWP, the isolated points G
        (0 and the zeros of g° between bulk components)
        """
        lo, hi = interval or self.default_interval(system)
        resolution = resolution or self.resolution
        xs = np.linspace(lo, hi, resolution)
        step = xs[1] - xs[0]

        inside = np.zeros(resolution, dtype=bool)
        solutions: List[StieltjesSolution] = []
        previous = None
        for i, x in enumerate(xs):
            solution = self.solve_at_height(system, x, self.epsilon, None if previous is None else previous.g)
            inside[i] = self._in_support(solution)
            solutions.append(solution)
            previous = solution

        intervals: List[Tuple[float, float]] = []
        warnings: List[str] = []
        i = 0
        while i < resolution:
            if not inside[i]:
                i += 1
                continue
            j = i
            while j + 1 < resolution and inside[j + 1]:
                j += 1
            left = xs[i] if i == 0 else self._refine_edge(system, xs[i - 1], xs[i], solutions[i].g)
            right = xs[j] if j == resolution - 1 else self._refine_edge(system, xs[j + 1], xs[j], solutions[j].g)
            intervals.append((float(left), float(right)))
            if j - i < 2:
                warnings.append(f"bulk component near {xs[i]:.4g} spans at most two grid points")
            i = j + 1

        # The atom at zero of PW^TWP shows as a narrow bump, not a bulk component
        atom_width = 2.0 * np.sqrt(self.epsilon / self.density_threshold) + 4.0 * step
        intervals = [(a, b) for a, b in intervals if not (a <= 0.0 <= b and b - a < atom_width)]

        for (_, right), (left, _) in zip(intervals, intervals[1:]):
            if left - right < 2.0 * step:
                warnings.append(f"gap ({right:.4g}, {left:.4g}) is below the grid resolution; components may be merged")

        isolated = [0.0] + self._circ_zeros(system, intervals)
        for message in warnings:
            logger.warning(f"Support scan: {message}")
        logger.info(f"Support scan found {len(intervals)} bulk component(s): {intervals}")
        return SpectralSupport(
            intervals=intervals,
            isolated=sorted(set(isolated)),
            search_interval=(float(lo), float(hi)),
            warnings=warnings,
        )

    def _refine_edge(self, system: MixtureSystem, outside: float, inside: float, warm: np.ndarray) -> float:
        """Bisection on the support indicator."""
        while abs(inside - outside) > self.edge_tolerance:
            middle = 0.5 * (inside + outside)
            solution = self.solve_at_height(system, middle, self.epsilon, warm)
            if self._in_support(solution):
                inside, warm = middle, solution.g
            else:
                outside = middle
        return 0.5 * (inside + outside)

    def _circ_zeros(self, system: MixtureSystem, intervals: List[Tuple[float, float]]) -> List[float]:
        zeros = []
        for (_, right), (left, _) in zip(intervals, intervals[1:]):
            width = left - right
            xs = np.linspace(right + 0.01 * width, left - 0.01 * width, 41)
            values = [None if s is None else s.g_circ.real for s in self.solve_path(system, xs)]
            for a, b, va, vb in zip(xs, xs[1:], values, values[1:]):
                if va is None or vb is None or np.sign(va) == np.sign(vb):
                    continue
                try:
                    root = brentq(lambda x: self.solve_g(system, x).g_circ.real, a, b, xtol=self.edge_tolerance)
                except (ValueError, SolverDivergence):
                    continue
                # reject the pole of g° at an atom
                if abs(self.solve_g(system, root).g_circ) < 1e-6 * (1.0 + abs(va) + abs(vb)):
                    zeros.append(float(root))
        return zeros

    def density(self, system: MixtureSystem, xs: Sequence[float]) -> np.ndarray:
        """Limiting eigenvalue density Im g°(x + i*epsilon) / pi of PW^TWP."""
        values, previous = [], None
        for x in xs:
            solution = self.solve_at_height(system, x, self.epsilon, None if previous is None else previous.g)
            values.append(solution.g_circ.imag / np.pi)
            previous = solution
        return np.asarray(values)

    def limiting_cdf(self, system: MixtureSystem, support: SpectralSupport, points: int = 400) -> Callable:
        """Distribution function of the limiting spectral measure, atom at zero included."""
        atom = max(0.0, 1.0 - system.c0)
        if not support.intervals:
            return lambda x: np.where(np.asarray(x, dtype=float) >= 0, 1.0, 0.0)
        xs_all, cumulative, offset = [], [], 0.0
        for lo, hi in support.intervals:
            xs = np.linspace(lo, hi, points)
            dens = self.density(system, xs)
            mass = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(xs))])
            xs_all.append(xs)
            cumulative.append(offset + mass)
            offset += mass[-1]
        xs_all, cumulative = np.concatenate(xs_all), np.concatenate(cumulative)
        total = offset + atom

        def cdf(x):
            x = np.asarray(x, dtype=float)
            continuous = np.interp(x, xs_all, cumulative, left=0.0, right=offset)
            return (continuous + atom * (x >= 0)) / total

        return cdf

    # ------------------------------------------------------------------
    # Small matrices of the isolated-eigenvalue equations
    # ------------------------------------------------------------------

    def _solution(self, system: MixtureSystem, z: float, solution: Optional[StieltjesSolution]) -> StieltjesSolution:
        return solution if solution is not None else self.solve_g(system, z)

    def h_tau(
        self,
        system: MixtureSystem,
        kernel: KernelProfile,
        z: float,
        solution: Optional[StieltjesSolution] = None,
    ) -> float:
        """h(tau, z) = 1 + q sum_a c_a g_a(z) psiVar_a"""
        g = self._solution(system, z, solution).g.real
        return float(1.0 + kernel.q * np.sum(system.c * g * system.stats.psi_var))

    def gamma_z(self, system: MixtureSystem, z: float, solution: Optional[StieltjesSolution] = None) -> np.ndarray:
        return _gamma(system.c, self._solution(system, z, solution).g.real)

    def D_tau_z(
        self,
        system: MixtureSystem,
        kernel: KernelProfile,
        z: float,
        solution: Optional[StieltjesSolution] = None,
    ) -> np.ndarray:
        solution = self._solution(system, z, solution)
        stats = system.stats
        h = self.h_tau(system, kernel, z, solution)
        quad = system.frame.mean_form(z, system.c * solution.g, stats.M).real
        return -z * h * quad - h * kernel.s * stats.T + kernel.q * np.outer(stats.t, stats.t)

    def G_z(
        self,
        system: MixtureSystem,
        kernel: KernelProfile,
        z: float,
        solution: Optional[StieltjesSolution] = None,
    ) -> GMatrixBundle:
        """
        G_z = h(tau, z) I_k + D_{tau,z} Gamma_z; isolated eigenvalues solve det G_rho = 0
        """
        if not kernel.generic:
            raise ValueError("G_z is defined on the generic branch; use G0_z")
        solution = self._solution(system, z, solution)
        gamma = self.gamma_z(system, z, solution)
        h = self.h_tau(system, kernel, z, solution)
        D = self.D_tau_z(system, kernel, z, solution)
        G = h * np.eye(system.k) + D @ gamma
        return GMatrixBundle(z=z, branch=Branch.GENERIC, gamma=gamma, h=h, D=D, G=G, solution=solution)

    def G_prime(
        self,
        system: MixtureSystem,
        kernel: KernelProfile,
        z: float,
        solution: Optional[StieltjesSolution] = None,
    ) -> np.ndarray:
        """Derivative of G_z in z, from the analytic g'."""
        solution = self._solution(system, z, solution)
        c, stats = system.c, system.stats
        g = solution.g.real
        dg = self.g_derivative(system, z, solution=solution)
        h = self.h_tau(system, kernel, z, solution)
        dh = kernel.q * np.sum(c * dg * stats.psi_var)

        cg, cdg = c * g, c * dg
        total, dtotal = cg.sum(), cdg.sum()
        gamma = np.diag(cg) - np.outer(cg, cg) / total
        dgamma = (
            np.diag(cdg)
            - (np.outer(cdg, cg) + np.outer(cg, cdg)) / total
            + np.outer(cg, cg) * dtotal / total ** 2
        )

        v = c * solution.g
        zquad = z * system.frame.mean_form(z, v, stats.M).real
        dzquad = (z * z * system.frame.mean_sandwich(z, v, z, v, stats.M, c * dg)).real
        D = -h * zquad - h * kernel.s * stats.T + kernel.q * np.outer(stats.t, stats.t)
        dD = -dh * zquad - h * dzquad - dh * kernel.s * stats.T
        return dh * np.eye(system.k) + dD @ gamma + D @ dgamma

    def G0_z(self, system: MixtureSystem, kernel: KernelProfile, z: float) -> GMatrixBundle:
        """
        Zero-derivative counterpart: Gamma0 = -diag(c)/(c0 z), h0 = 1 - b s0 / z,
        D0 = 2 b h0 T + b t t^T
        """
        if z == 0:
            raise PoleError("G0_z has a pole at z = 0")
        c, c0, stats = system.c, system.c0, system.stats
        gamma = -np.diag(c) / (c0 * z)
        h = 1.0 - kernel.b * system.psi_scale / z
        D = 2.0 * kernel.b * h * stats.T + kernel.b * np.outer(stats.t, stats.t)
        G = h * np.eye(system.k) + D @ gamma
        return GMatrixBundle(z=z, branch=Branch.ZERO_DERIVATIVE, gamma=gamma, h=h, D=D, G=G)

    def G0_prime(self, system: MixtureSystem, kernel: KernelProfile, z: float) -> np.ndarray:
        bundle = self.G0_z(system, kernel, z)
        c, c0, stats = system.c, system.c0, system.stats
        dh = kernel.b * system.psi_scale / z ** 2
        dgamma = np.diag(c) / (c0 * z ** 2)
        dD = 2.0 * kernel.b * dh * stats.T
        return dh * np.eye(system.k) + dD @ bundle.gamma + bundle.D @ dgamma

    def equivalent_B(self, system: MixtureSystem, kernel: KernelProfile) -> np.ndarray:
        """
        The (2k+1) x (2k+1) coefficient matrix of the low-rank part of the equivalent of L'
        """
        k, c, stats = system.k, system.c, system.stats
        ones = np.ones(k)
        B11 = (
            stats.M.T @ stats.M
            + kernel.q * np.outer(stats.t, stats.t)
            - kernel.s * stats.T
            + system.c0 * kernel.F * np.outer(ones, ones)
        )
        B = np.zeros((2 * k + 1, 2 * k + 1))
        B[:k, :k] = B11
        B[:k, k:2 * k] = np.eye(k) - np.outer(ones, c)
        B[k:2 * k, :k] = np.eye(k) - np.outer(c, ones)
        B[:k, 2 * k] = kernel.q * stats.t
        B[2 * k, :k] = kernel.q * stats.t
        B[2 * k, 2 * k] = kernel.q
        return B

    def H_z(
        self,
        system: MixtureSystem,
        kernel: KernelProfile,
        z: float,
        solution: Optional[StieltjesSolution] = None,
    ) -> np.ndarray:
        """
        H_z = I + B Lambda_z with Lambda_z = blockdiag(Gamma_z - cc^T/(z c0),
        M^T M + z M^T Q~_z M, (h - 1)/q); det H_z = 0 at isolated eigenvalues
        """
        solution = self._solution(system, z, solution)
        k, c, stats = system.k, system.c, system.stats
        g = solution.g.real
        Lam = np.zeros((2 * k + 1, 2 * k + 1))
        Lam[:k, :k] = _gamma(c, g) - np.outer(c, c) / (z * system.c0)
        Lam[k:2 * k, k:2 * k] = stats.M.T @ stats.M + z * system.frame.mean_form(z, c * solution.g, stats.M).real
        Lam[2 * k, 2 * k] = np.sum(c * g * stats.psi_var)
        return np.eye(2 * k + 1) + self.equivalent_B(system, kernel) @ Lam

    def H0_z(self, system: MixtureSystem, kernel: KernelProfile, z: float) -> np.ndarray:
        """
        H0_z = -(z / h0) G0_z = -z I + (2b/c0) T diag(c) + (b / (h0 c0)) t t^T diag(c)
        """
        if z == 0:
            raise PoleError("H0_z has a pole at z = 0")
        c, c0, stats = system.c, system.c0, system.stats
        H = -z * np.eye(system.k) + (2.0 * kernel.b / c0) * stats.T @ np.diag(c)
        if np.any(stats.t != 0):
            h0 = 1.0 - kernel.b * system.psi_scale / z
            if abs(h0) < 1e-14:
                raise PoleError(f"h0 vanishes at z={z}")
            H = H + (kernel.b / (h0 * c0)) * np.outer(stats.t, stats.t) @ np.diag(c)
        return H

    # ------------------------------------------------------------------
    # Second-order equivalents
    # ------------------------------------------------------------------

    def cross_blocks(
        self,
        system: MixtureSystem,
        z1: complex,
        z2: complex,
        solution1: Optional[StieltjesSolution] = None,
        solution2: Optional[StieltjesSolution] = None,
    ) -> ResolventCrossBlocks:
        """
        Omega, R = (I - Omega)^{-1} Omega and the E^J, E^M, E^psi blocks at (z1, z2)
        """
        s1 = solution1 if solution1 is not None else self.solve_g(system, z1)
        s2 = solution2 if solution2 is not None else self.solve_g(system, z2)
        k, c, c0, stats = system.k, system.c, system.c0, system.stats
        g1, g2 = s1.g, s2.g
        v1, v2 = c * g1, c * g2

        X = system.frame.cross_trace_q(z1, v1, z2, v2)
        omega = z1 * z2 * c0 * (c * g1 * g2)[:, None] * X
        shifted = np.eye(k) - omega
        if np.linalg.cond(shifted) > 1e12:
            raise SpectralRadiusError(f"I - Omega is singular at ({z1}, {z2}); too close to the support")
        inverse = np.linalg.inv(shifted)
        R = inverse @ omega

        # Q-bar of PW^TWP as class blocks
        def resolvent_block(z, g):
            total = np.sum(c * g)
            return c0 * g, -(1.0 / z + c0 * np.outer(g, g) / total)

        Q1, Q2 = resolvent_block(z1, g1), resolvent_block(z2, g2)
        ones = np.ones(k)
        projector = (ones.astype(complex), -np.outer(ones, ones).astype(complex))
        sandwiched = []
        for b in range(k):
            Db = (np.eye(k)[b].astype(complex), np.zeros((k, k), dtype=complex))
            sandwiched.append(_block_mul(_block_mul(projector, Db, c), projector, c))

        EJ, EM = [], []
        for a in range(k):
            alpha = np.eye(k)[a].astype(complex) + sum(R[a, b] * sandwiched[b][0] for b in range(k))
            S = sum(R[a, b] * sandwiched[b][1] for b in range(k))
            inner = (alpha, S)
            EJ.append(_block_project(_block_mul(_block_mul(Q1, inner, c), Q2, c), c, c0))
            factor = z1 * z2 * c0 * c[a] * g1[a] * g2[a]
            EM.append(factor * system.frame.mean_sandwich(z1, v1, z2, v2, stats.M, inverse[:, a]))
        Epsi = c0 * inverse @ (c * g1 * g2 * stats.psi_var)

        real = complex(z1).imag == 0 and complex(z2).imag == 0
        if real:
            omega, R = omega.real, R.real
            EJ, EM, Epsi = [e.real for e in EJ], [e.real for e in EM], Epsi.real
        return ResolventCrossBlocks(z1=z1, z2=z2, omega=omega, R=R, EJ=EJ, EM=EM, Epsi=Epsi)

    def g_derivative(
        self,
        system: MixtureSystem,
        z: complex,
        method: str = "analytic",
        solution: Optional[StieltjesSolution] = None,
    ) -> np.ndarray:
        """
        g'(z) from diag(c) g' = c0 (I - Omega)^{-1} diag(c) g^2, or by central differences
        """
        if method == "finite_difference":
            step = self.fd_step * max(1.0, abs(z))
            base = self._solution(system, z, solution).g
            up = self.solve_g(system, z + step, initial=base).g
            down = self.solve_g(system, z - step, initial=base).g
            derivative = (up - down) / (2.0 * step)
        else:
            solution = self._solution(system, z, solution)
            blocks = self.cross_blocks(system, z, z, solution, solution)
            c, g = system.c, solution.g
            shifted = np.eye(system.k) - blocks.omega
            derivative = system.c0 * np.linalg.solve(shifted, c * g ** 2) / c
        if complex(z).imag == 0:
            return np.real(derivative)
        return derivative
