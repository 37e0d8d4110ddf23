from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from app.config import settings
from app.exceptions import (
    ConfigError,
    DegreeError,
    InsufficientDataError,
    KernelAssumptionError,
    ShortfallError,
    SpectralError,
    UndefinedScoreError,
)
from app.models import ClusteringResult, Embedding, GridConfig, LaplacianBundle, SpikeReport
from app.services.empirical_service import EmpiricalService, expand_spikes, pair_spikes
from app.services.kernels import KernelFunction, realize_triple
from app.utils.concurrency import bounded_map

logger = logging.getLogger(__name__)

SpikeTheory = Callable[[KernelFunction], Sequence[SpikeReport]]


@dataclass
class GridPoint:
    triple: Tuple[float, float, float]
    feasible: bool
    ratio_cut: Optional[float] = None
    misclassification: Optional[float] = None
    reason: Optional[str] = None
    result: Optional[ClusteringResult] = None

    def summary(self) -> Dict[str, Any]:
        return {
            "ftau": self.triple[0],
            "f1": self.triple[1],
            "f2": self.triple[2],
            "feasible": self.feasible,
            "ratio_cut": self.ratio_cut,
            "misclassification": self.misclassification,
            "reason": self.reason,
        }


@dataclass
class GridSearchResult:
    best: Optional[GridPoint]
    table: List[GridPoint] = field(default_factory=list)


def preprocess(data: np.ndarray) -> np.ndarray:
    """
    Rows are samples. Returns the p x n matrix with the empirical mean removed and
    scaled so that the mean squared norm equals p
    """
    data = np.asarray(data, dtype=float)
    n, p = data.shape
    if n < 2:
        raise InsufficientDataError(f"clustering needs at least 2 samples, got {n}")
    centered = data - data.mean(axis=0)
    mean_square = np.mean(np.sum(centered ** 2, axis=1))
    if mean_square == 0:
        raise InsufficientDataError("all samples are identical")
    return (centered * np.sqrt(p / mean_square)).T


class ClusterService:
    def __init__(self, empirical: Optional[EmpiricalService] = None):
        self.empirical = empirical or EmpiricalService()
        self.restarts = settings.kmeans_restarts
        self.max_iter = settings.kmeans_max_iter
        self.tol = settings.kmeans_tol
        self.max_workers = settings.max_workers

    # ------------------------------------------------------------------
    # Embedding
    # ------------------------------------------------------------------

    def spectral_embed(
        self,
        laplacian: LaplacianBundle,
        l: int,
        spikes: Optional[Sequence[SpikeReport]] = None,
        alignments: Optional[Mapping[int, float]] = None,
        include_u1: bool = False,
        fallback: bool = False,
    ) -> Embedding:
        """
        Rows y_i of the n x l embedding. With theory spikes, the columns are the
        eigenvectors of L' paired with informative spikes, by decreasing predicted
        alignment; without, the dominant eigenvectors of L'. D^{1/2}1 comes first
        when include_u1 is set.

        Every predicted spike outside an exclusion window, informative or not, is
        matched one-to-one and in order with the non-trivial eigenvalues, so an
        eigenvector sitting at a non-informative spike is never taken for an
        informative one. With fallback set, columns the theory cannot supply are
        filled with the remaining dominant eigenvectors instead of raising.
        """
        if l < 1:
            raise ConfigError(f"embedding dimension must be at least 1, got {l}")
        trivial = laplacian.trivial_index
        columns: List[np.ndarray] = []
        indices: List[int] = []
        provenance: List[str] = []
        if include_u1:
            columns.append(laplacian.first_eigenvector)
            indices.append(trivial)
            provenance.append("u1")

        dominant = [(i, f"eigenvalue {v:.6g}") for i, v in enumerate(laplacian.eigenvalues) if i != trivial]
        if spikes is None:
            candidates = dominant
        else:
            order = [i for i, _ in dominant]
            targets = expand_spikes(spikes)
            matching = pair_spikes(laplacian.eigenvalues[order], [s.lambda_l for _, s in targets])
            chosen = [
                (order[row], targets[column][0], targets[column][1])
                for row, column in matching.items()
                if targets[column][1].informative and targets[column][1].multiplicity == 1
            ]
            weights = alignments or {}
            chosen.sort(key=lambda item: -weights.get(item[1], 0.0))
            candidates = [(index, f"rho={spike.rho:.6g}") for index, _, spike in chosen]
            if fallback:
                taken = {index for index, _ in candidates}
                candidates += [(i, origin) for i, origin in dominant if i not in taken]

        for index, origin in candidates:
            if len(columns) == l:
                break
            columns.append(laplacian.eigenvectors[:, index])
            indices.append(index)
            provenance.append(origin)

        if len(columns) < l:
            raise ShortfallError(l, len(columns))
        Y = np.column_stack(columns)
        # first nonzero entry of each column made positive
        for j in range(Y.shape[1]):
            nonzero = np.flatnonzero(np.abs(Y[:, j]) > 1e-12)
            if nonzero.size and Y[nonzero[0], j] < 0:
                Y[:, j] *= -1.0
        return Embedding(Y=Y, selected_indices=indices, provenance=provenance)

    # ------------------------------------------------------------------
    # Clustering and scores
    # ------------------------------------------------------------------

    def kmeans(self, Y: np.ndarray, k: int, seed: int = 0) -> ClusteringResult:
        """
        Best of `restarts` k-means++ runs; empty clusters are re-seeded from the
        farthest points by the solver
        """
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if k < 1 or Y.shape[0] < k:
            raise InsufficientDataError(f"k-means needs 1 <= k <= n, got k={k}, n={Y.shape[0]}")
        model = KMeans(
            n_clusters=k,
            n_init=self.restarts,
            max_iter=self.max_iter,
            tol=self.tol,
            random_state=seed,
        )
        assignment = model.fit_predict(Y)
        result = ClusteringResult(assignment=assignment, centroids=model.cluster_centers_, inertia=float(model.inertia_))
        counts = np.bincount(assignment, minlength=k)
        for cluster in np.flatnonzero(counts == 0):
            result.flags.append(f"cluster {cluster} is empty")
            logger.warning(result.flags[-1])
        return result

    @staticmethod
    def ratio_cut(K: np.ndarray, assignment: np.ndarray, k: Optional[int] = None) -> float:
        """sum_a sum_{i in C_a, j not in C_a} K_ij / |C_a|"""
        assignment = np.asarray(assignment)
        k = int(assignment.max()) + 1 if k is None else k
        total = 0.0
        for a in range(k):
            members = assignment == a
            size = int(members.sum())
            if size == 0:
                raise UndefinedScoreError(f"cluster {a} is empty")
            total += float(K[np.ix_(members, ~members)].sum()) / size
        return total

    @staticmethod
    def misclassification(assignment: np.ndarray, labels: np.ndarray) -> float:
        """Error rate under the best matching of clusters to labels."""
        assignment, labels = np.asarray(assignment), np.asarray(labels)
        if assignment.shape != labels.shape:
            raise ConfigError("assignment and labels must have the same length")
        _, clusters = np.unique(assignment, return_inverse=True)
        _, classes = np.unique(labels, return_inverse=True)
        size = max(clusters.max(), classes.max()) + 1
        confusion = np.zeros((size, size))
        np.add.at(confusion, (clusters, classes), 1.0)
        rows, cols = linear_sum_assignment(confusion, maximize=True)
        return 1.0 - confusion[rows, cols].sum() / labels.size

    def cluster(
        self,
        laplacian: LaplacianBundle,
        k: int,
        l: int,
        seed: int = 0,
        labels: Optional[np.ndarray] = None,
        spikes: Optional[Sequence[SpikeReport]] = None,
        alignments: Optional[Mapping[int, float]] = None,
        include_u1: bool = False,
        fallback: bool = False,
    ) -> Tuple[Embedding, ClusteringResult]:
        embedding = self.spectral_embed(laplacian, l, spikes, alignments, include_u1, fallback)
        result = self.kmeans(embedding.Y, k, seed)
        try:
            result.ratio_cut = self.ratio_cut(laplacian.K, result.assignment, k)
        except UndefinedScoreError as e:
            result.flags.append(str(e))
        if labels is not None:
            result.misclassification = self.misclassification(result.assignment, labels)
        return embedding, result

    # ------------------------------------------------------------------
    # Kernel selection
    # ------------------------------------------------------------------

    def evaluate_triple(
        self,
        X: np.ndarray,
        tau_hat: float,
        triple: Tuple[float, float, float],
        k: int,
        l: int,
        family: str = "quadratic",
        seed: int = 0,
        labels: Optional[np.ndarray] = None,
        include_u1: bool = False,
        theory: Optional[SpikeTheory] = None,
    ) -> GridPoint:
        """
        Cluster with the kernel realizing `triple` at tau_hat. The RatioCut is taken on
        K divided by its mean off-diagonal entry so that triples differing by scale compare equally.
        When `theory` maps the kernel to its predicted spikes, the embedding follows them.
        """
        try:
            f = realize_triple(tau_hat, *triple, family=family)
            laplacian = self.empirical.build_kernel_laplacian(X, f)
            spikes = None
            if theory is not None:
                try:
                    spikes = theory(f)
                except SpectralError as e:
                    logger.warning(f"No spike prediction for grid point {triple}, using the dominant eigenvectors: {e}")
            _, result = self.cluster(laplacian, k, l, seed, labels, spikes, include_u1=include_u1, fallback=True)
        except (DegreeError, KernelAssumptionError, ShortfallError) as e:
            logger.warning(f"Grid point {triple} infeasible: {e}")
            return GridPoint(triple=triple, feasible=False, reason=str(e))

        n = laplacian.n
        level = (laplacian.K.sum() - np.trace(laplacian.K)) / (n * (n - 1))
        if result.ratio_cut is None or level == 0:
            return GridPoint(triple=triple, feasible=False, reason="undefined RatioCut", result=result)
        score = result.ratio_cut / abs(level)
        return GridPoint(
            triple=triple,
            feasible=True,
            ratio_cut=score,
            misclassification=result.misclassification,
            result=result,
        )

    async def kernel_grid_search(
        self,
        X: np.ndarray,
        tau_hat: float,
        grid: GridConfig,
        k: int,
        l: int,
        seed: int = 0,
        labels: Optional[np.ndarray] = None,
        include_u1: bool = False,
        theory: Optional[SpikeTheory] = None,
    ) -> GridSearchResult:
        """
        Scores every (f(tau), f'(tau), f''(tau)) of the grid and keeps the smallest
        normalized RatioCut; infeasible points stay in the table
        """
        triples = grid.triples()
        logger.info(f"Evaluating {len(triples)} kernel profiles at tau_hat={tau_hat:.6g}")

        def evaluate(triple):
            return self.evaluate_triple(X, tau_hat, triple, k, l, grid.family, seed, labels, include_u1, theory)

        table = await bounded_map(evaluate, triples, self.max_workers, label="grid point")
        feasible = [point for point in table if point.feasible]
        if not feasible:
            logger.warning("No feasible kernel profile on the grid")
            return GridSearchResult(best=None, table=table)
        best = min(feasible, key=lambda point: point.ratio_cut)
        logger.info(f"Best kernel profile {best.triple} with RatioCut {best.ratio_cut:.6g}")
        return GridSearchResult(best=best, table=table)
