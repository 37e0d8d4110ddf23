from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union
import logging

import numpy as np
from scipy import linalg, stats as scistats
from scipy.optimize import linear_sum_assignment
from scipy.sparse.linalg import eigsh
from sklearn.metrics import pairwise_distances

from app.config import settings
from app.exceptions import DegreeError, DimensionError
from app.models import (
    Branch,
    EigvecStats,
    EquivalentBundle,
    KernelProfile,
    LaplacianBundle,
    MixtureModel,
    SampleSet,
    SpectralSupport,
    SpikeReport,
)
from app.services.kernels import KernelFunction, kernel_profile_from_closure
from app.services.model_service import MixtureSystem, ModelService
from app.services.rmt_service import RMTService
from app.services.spike_service import SpikeService, map_to_L
from app.utils.concurrency import bounded_map

logger = logging.getLogger(__name__)

T = TypeVar("T")


def standardized_entries(rng: np.random.Generator, name: str, shape: Tuple[int, int], df: Optional[float] = None):
    """Zero-mean unit-variance i.i.d. entries of the requested law."""
    if name == "gaussian":
        return rng.standard_normal(shape)
    if name == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=shape)
    if name == "uniform":
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=shape)
    if name == "student_t":
        return rng.standard_t(df, size=shape) * np.sqrt((df - 2.0) / df)
    raise DimensionError(f"Unknown entry distribution: {name}")


def class_indicators(labels: np.ndarray, k: int) -> np.ndarray:
    """J = [j_1, ..., j_k] as an n x k 0/1 matrix."""
    return (labels[:, None] == np.arange(k)[None, :]).astype(float)


def zero_derivative_B(system: MixtureSystem, kernel: KernelProfile) -> np.ndarray:
    """(k+1) x (k+1) coefficient matrix of the equivalent when f'(tau) vanishes."""
    k, c0, stats = system.k, system.c0, system.stats
    b = kernel.b
    B = np.zeros((k + 1, k + 1))
    B[:k, :k] = b * np.outer(stats.t, stats.t) + 2.0 * b * stats.T - c0 * kernel.shift0 * np.ones((k, k))
    B[:k, k] = b * stats.t
    B[k, :k] = b * stats.t
    B[k, k] = b
    return B


def pair_spikes(values: Sequence[float], targets: Sequence[float]) -> Dict[int, int]:
    """
    One-to-one matching of observed eigenvalues to predicted ones under squared
    distance; on the line the optimal matching preserves order. Returns value
    position -> target position, leaving the surplus on either side unmatched.
    """
    if len(values) == 0 or len(targets) == 0:
        return {}
    cost = (np.asarray(values, dtype=float)[:, None] - np.asarray(targets, dtype=float)[None, :]) ** 2
    rows, cols = linear_sum_assignment(cost)
    return {int(i): int(j) for i, j in zip(rows, cols)}


def expand_spikes(spikes: Sequence[SpikeReport]) -> List[Tuple[int, SpikeReport]]:
    """(position, spike) for every spike outside the exclusion windows, repeated by multiplicity."""
    return [(j, s) for j, s in enumerate(spikes) if s.excluded_reason is None for _ in range(s.multiplicity)]


class EmpiricalService:
    """
    Monte Carlo side: sampling, kernel matrices, Laplacians and their random
    matrix equivalents, plus empirical spike and eigenvector statistics
    """

    def __init__(self, rmt: Optional[RMTService] = None, max_workers: Optional[int] = None):
        self.rmt = rmt or RMTService()
        self.model_service = ModelService()
        self.max_workers = max_workers or settings.max_workers
        self.spikes = SpikeService(self.rmt)
        self._margins: Dict[Tuple, Tuple[float, float]] = {}

    # ------------------------------------------------------------------
    # Sampling
    # ------------------------------------------------------------------

    def sample_mixture(self, model: Union[MixtureModel, MixtureSystem], seed: int) -> SampleSet:
        """
        x_i = mu_a + sqrt(p) w_i with w_i = C_a^{1/2} z_i / sqrt(p), classes in config order
        """
        system = self.model_service.system(model)
        p, entries = system.p, system.model.entries
        rng = np.random.default_rng(seed)
        sizes = [cls.size for cls in system.model.classes]
        labels = np.repeat(np.arange(system.k), sizes)

        blocks = []
        for a, size in enumerate(sizes):
            Z = standardized_entries(rng, entries.name, (p, size), entries.df)
            root = system.frame.square_root(a)
            blocks.append(root[:, None] * Z if root.ndim == 1 else root @ Z)
        scaled = np.hstack(blocks)
        X = system.means[:, labels] + scaled
        logger.debug(f"Sampled {system.n} points in dimension {p} with seed {seed} ({entries.name} entries)")
        return SampleSet(X=X, W=scaled / np.sqrt(p), labels=labels, seed=seed)

    # ------------------------------------------------------------------
    # Kernel matrix and Laplacian
    # ------------------------------------------------------------------

    def build_kernel_laplacian(self, samples: Union[SampleSet, np.ndarray], f: KernelFunction) -> LaplacianBundle:
        """
        K = f(|x_i - x_j|^2 / p), L = n D^{-1/2} K D^{-1/2} and
        L' = L - n D^{1/2} 1 1^T D^{1/2} / (1^T D 1), with the spectrum of L'
        """
        X = samples.X if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
        p, n = X.shape
        distances = pairwise_distances(X.T, metric="sqeuclidean") / p
        K = np.asarray(f(distances), dtype=float)
        np.fill_diagonal(K, float(np.asarray(f(0.0)).reshape(-1)[0]))
        K = 0.5 * (K + K.T)

        degrees = K.sum(axis=1)
        bad = np.flatnonzero(degrees <= 0)
        if bad.size:
            raise DegreeError(int(bad[0]), float(degrees[bad[0]]))

        inv_root = 1.0 / np.sqrt(degrees)
        L = n * inv_root[:, None] * K * inv_root[None, :]
        root = np.sqrt(degrees)
        Lprime = L - n * np.outer(root, root) / degrees.sum()
        Lprime = 0.5 * (Lprime + Lprime.T)

        values, vectors = linalg.eigh(Lprime)
        order = np.argsort(values)[::-1]
        return LaplacianBundle(
            K=K, degrees=degrees, L=L, Lprime=Lprime, eigenvalues=values[order], eigenvectors=vectors[:, order]
        )

    def build_equivalent(
        self,
        samples: SampleSet,
        system: MixtureSystem,
        kernel: KernelProfile,
        laplacian: Optional[LaplacianBundle] = None,
    ) -> EquivalentBundle:
        """
        The random matrix equivalent of L' built from the W of a synthetic sample
        """
        W, labels = samples.W, samples.labels
        p, n = W.shape
        J = class_indicators(labels, system.k)
        expected = system.stats.traces[labels]
        psi = np.sum(W ** 2, axis=0) - expected

        if kernel.branch == Branch.GENERIC:
            WP = W - W.mean(axis=1, keepdims=True)
            Phi = WP.T @ system.stats.M
            U = np.hstack([J / np.sqrt(p), Phi, psi[:, None]])
            B = self.rmt.equivalent_B(system, kernel)
            slope = 2.0 * kernel.f1 / kernel.ftau
            Lhat = -slope * (WP.T @ WP + U @ B @ U.T) + slope * kernel.F * np.eye(n)
        else:
            U = np.hstack([J / np.sqrt(p), psi[:, None]])
            B = zero_derivative_B(system, kernel)
            Lhat = U @ B @ U.T + kernel.shift0 * np.eye(n)
        Lhat = 0.5 * (Lhat + Lhat.T)
        eigenvalues = np.sort(linalg.eigvalsh(Lhat))[::-1]

        bundle = EquivalentBundle(U=U, B=B, psi=psi, Lhat=Lhat, eigenvalues=eigenvalues)
        if laplacian is not None:
            bundle.operator_gap = self.operator_gap(laplacian.Lprime, Lhat)
            bundle.eigenvalue_gap = float(np.max(np.abs(laplacian.eigenvalues - eigenvalues)))
            logger.info(
                f"Seed {samples.seed}: |L' - Lhat| = {bundle.operator_gap:.4g}, "
                f"max eigenvalue gap {bundle.eigenvalue_gap:.4g}"
            )
        return bundle

    @staticmethod
    def operator_gap(A: np.ndarray, B: np.ndarray) -> float:
        """Spectral norm of the symmetric difference A - B (Lanczos, tol 1e-8)."""
        difference = A - B
        if difference.shape[0] < 3:
            return float(np.max(np.abs(linalg.eigvalsh(difference))))
        value = eigsh(difference, k=1, which="LM", tol=1e-8, return_eigenvectors=False)
        return float(abs(value[0]))

    def bulk_ks_distance(self, samples: SampleSet, system: MixtureSystem, support: SpectralSupport) -> float:
        """Kolmogorov-Smirnov distance between the spectrum of PW^TWP and its deterministic equivalent."""
        WP = samples.W - samples.W.mean(axis=1, keepdims=True)
        eigenvalues = linalg.eigvalsh(WP.T @ WP)
        cdf = self.rmt.limiting_cdf(system, support)
        return float(scistats.kstest(eigenvalues, cdf).statistic)

    # ------------------------------------------------------------------
    # Empirical spikes and eigenvector statistics
    # ------------------------------------------------------------------

    def bulk_in_L(self, kernel: KernelProfile, support: SpectralSupport) -> List[Tuple[float, float]]:
        """Bulk intervals mapped to the eigenvalue scale of L'."""
        if kernel.branch == Branch.ZERO_DERIVATIVE:
            return [(kernel.shift0, kernel.shift0)]
        mapped = []
        for lo, hi in support.intervals:
            a, b = map_to_L(kernel, lo), map_to_L(kernel, hi)
            mapped.append((min(a, b), max(a, b)))
        return mapped

    def default_margin(self, kernel: KernelProfile, n: int) -> float:
        scale = 1.0 if kernel.branch == Branch.ZERO_DERIVATIVE else abs(2.0 * kernel.f1 / kernel.ftau)
        return 3.0 * scale * n ** (-2.0 / 3.0)

    def empirical_spikes(
        self,
        laplacian: LaplacianBundle,
        kernel: KernelProfile,
        support: SpectralSupport,
        theory: Sequence[SpikeReport] = (),
        margin: Union[None, float, Tuple[float, float]] = None,
    ) -> List[Tuple[float, int, Optional[int]]]:
        """
        (eigenvalue, index, paired theory spike) for eigenvalues of L' outside the
        mapped bulk by more than the edge margin; the deterministic zero is skipped.

        margin is one width for both edges or (below, above): how far under a lower
        edge and over an upper edge a value must lie. Within each gap of the bulk,
        detections and predicted spikes (by multiplicity) are matched one-to-one in
        order, so surplus detections stay unpaired.
        """
        if margin is None:
            margin = self.default_margin(kernel, laplacian.n)
        below, above = margin if isinstance(margin, tuple) else (margin, margin)
        bulk = sorted(self.bulk_in_L(kernel, support))
        trivial = laplacian.trivial_index

        def region(value: float) -> int:
            return sum(1 for _, hi in bulk if hi < value)

        found = []
        for index, value in enumerate(laplacian.eigenvalues):
            if index == trivial:
                continue
            if any(lo - below <= value <= hi + above for lo, hi in bulk):
                continue
            found.append((float(value), index))

        paired: Dict[int, int] = {}
        targets = expand_spikes(theory)
        for gap in {region(value) for value, _ in found}:
            rows = [i for i, (value, _) in enumerate(found) if region(value) == gap]
            candidates = [(j, s) for j, s in targets if region(s.lambda_l) == gap]
            matching = pair_spikes([found[i][0] for i in rows], [s.lambda_l for _, s in candidates])
            for row, column in matching.items():
                paired[rows[row]] = candidates[column][0]

        detections = [(value, index, paired.get(i)) for i, (value, index) in enumerate(found)]
        logger.debug(
            f"Detected {len(detections)} isolated eigenvalues of L' (margins {below:.3g} below, {above:.3g} above), "
            f"{len(paired)} paired"
        )
        return detections

    def empirical_eigvec_stats(
        self,
        laplacian: LaplacianBundle,
        labels: np.ndarray,
        indices: Sequence[int],
        reference_alpha: Optional[np.ndarray] = None,
    ) -> EigvecStats:
        """
        Class-wise sqrt(n_a) * mean, n_a * variance and n_a * covariance of the
        selected eigenvectors; signs are aligned with reference_alpha when given,
        otherwise with a nonnegative mean on the first class
        """
        labels = np.asarray(labels)
        k = int(labels.max()) + 1 if labels.size else 0
        sizes = np.array([np.sum(labels == a) for a in range(k)], dtype=float)
        vectors = laplacian.eigenvectors[:, list(indices)].copy()

        for column in range(vectors.shape[1]):
            means = np.array([vectors[labels == a, column].mean() for a in range(k)]) * np.sqrt(sizes)
            if reference_alpha is not None and column < len(reference_alpha):
                flip = float(means @ reference_alpha[column]) < 0
            else:
                flip = means[0] < 0
            if flip:
                vectors[:, column] *= -1.0

        m = vectors.shape[1]
        alpha = np.zeros((m, k))
        sigma2 = np.zeros((m, k))
        cross = np.zeros((m, m, k))
        for a in range(k):
            block = vectors[labels == a]
            alpha[:, a] = block.mean(axis=0) * np.sqrt(sizes[a])
            centered = block - block.mean(axis=0)
            covariance = centered.T @ centered / max(block.shape[0], 1)
            cross[:, :, a] = covariance * sizes[a]
            sigma2[:, a] = np.diag(covariance) * sizes[a]
        return EigvecStats(alpha=alpha, sigma2=sigma2, cross=cross)

    def u1_class_moments(self, laplacian: LaplacianBundle, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Raw class-wise mean and standard deviation of the entries of D^{1/2}1/|D^{1/2}1|."""
        u1 = laplacian.first_eigenvector
        k = int(labels.max()) + 1
        means = np.array([u1[labels == a].mean() for a in range(k)])
        stds = np.array([u1[labels == a].std() for a in range(k)])
        return means, stds

    # ------------------------------------------------------------------
    # Trials
    # ------------------------------------------------------------------

    async def run_trials(self, seeds: Sequence[int], trial: Callable[[int], T]) -> List[T]:
        """Runs trial(seed) for every seed in worker threads; results come back in seed order."""
        logger.info(f"Running {len(seeds)} trials on up to {self.max_workers} workers")
        return await bounded_map(trial, seeds, self.max_workers, label="trial with seed")

    def calibrate_edge_margin(
        self,
        system: MixtureSystem,
        f: KernelFunction,
        kernel: KernelProfile,
        seeds: Sequence[int] = tuple(range(20)),
        key: Optional[str] = None,
    ) -> Tuple[float, float]:
        """
        (below, above) edge margins from a null model: means removed, every class
        drawn with the first class covariance. On each side the margin is the mean
        overshoot of the extreme bulk eigenvalue of L' past its mapped edge plus three
        standard deviations, never below the default n^{-2/3} margin. Isolated
        eigenvalues the null model itself predicts are stepped over. Cached per key.
        """
        cache_key = (key, tuple(seeds)) if key is not None else None
        if cache_key is not None and cache_key in self._margins:
            return self._margins[cache_key]

        model = system.model.model_copy(deep=True)
        for cls in model.classes:
            cls.mean = {}
            cls.covariance = model.classes[0].covariance
        null_system = self.model_service.system(model)
        null_kernel = kernel_profile_from_closure(f, null_system.stats.tau, branch=kernel.branch)
        null_spikes, null_support = self.spikes.find_spikes(null_system, null_kernel)
        bulk = self.bulk_in_L(null_kernel, null_support or SpectralSupport([], []))
        floor = self.default_margin(kernel, system.n)
        if not bulk:
            return floor, floor
        lower, upper = min(lo for lo, _ in bulk), max(hi for _, hi in bulk)
        expanded = [s for _, s in expand_spikes(null_spikes)]
        skip_above = sum(1 for s in expanded if s.lambda_l > upper)
        skip_below = sum(1 for s in expanded if s.lambda_l < lower)

        over, under = [], []
        for seed in seeds:
            laplacian = self.build_kernel_laplacian(self.sample_mixture(null_system, seed), f)
            values = np.delete(laplacian.eigenvalues, laplacian.trivial_index)
            if skip_above + skip_below >= values.size:
                continue
            over.append(values[skip_above] - upper)
            under.append(lower - values[values.size - 1 - skip_below])
        if not over:
            return floor, floor

        def side(deviations: List[float]) -> float:
            return max(max(0.0, float(np.mean(deviations))) + 3.0 * float(np.std(deviations)), floor)

        margins = side(under), side(over)
        logger.info(
            f"Calibrated edge margins {margins[0]:.4g} below, {margins[1]:.4g} above over {len(over)} null seeds"
        )
        if cache_key is not None:
            self._margins[cache_key] = margins
        return margins
