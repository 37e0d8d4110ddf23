from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from app import __version__
from app.config import settings
from app.exceptions import ConfigError, SpectralError
from app.models import (
    ComparisonEntry,
    EigvecStats,
    ExperimentConfig,
    KernelProfile,
    Provenance,
    Report,
    SpectralSupport,
    SpikeReport,
)
from app.services.closedform_service import EQUAL_COVARIANCE, TRACE_CONSTANT, ClosedFormService
from app.services.cluster_service import ClusterService, SpikeTheory, preprocess
from app.services.eigvec_service import EigvecService
from app.services.empirical_service import EmpiricalService, class_indicators
from app.services.kernels import KernelFunction, build_kernel, kernel_profile_from_closure
from app.services.model_service import MixtureSystem, ModelService
from app.services.rmt_service import RMTService
from app.services.spike_service import SpikeService
from app.utils.config_io import config_hash, read_dataset, to_jsonable, write_csv

logger = logging.getLogger(__name__)


@dataclass
class TheoryBundle:
    system: MixtureSystem
    f: KernelFunction
    kernel: KernelProfile
    support: Optional[SpectralSupport]
    spikes: List[SpikeReport]
    stats: Optional[EigvecStats]
    alignments: Dict[int, float]
    u1: Tuple[np.ndarray, np.ndarray]


def usable_spikes(spikes: Sequence[SpikeReport]) -> List[SpikeReport]:
    """Informative spikes of unit multiplicity outside every exclusion window."""
    return [s for s in spikes if s.informative and s.excluded_reason is None and s.multiplicity == 1]


def comparison(name: str, reference: str, theory: float, empirical: float, tolerance: float) -> ComparisonEntry:
    discrepancy = abs(empirical - theory) if np.isfinite(empirical) and np.isfinite(theory) else float("inf")
    return ComparisonEntry(
        name=name,
        reference=reference,
        theory=float(theory),
        empirical=float(empirical) if np.isfinite(empirical) else float("nan"),
        discrepancy=discrepancy,
        tolerance=tolerance,
        passed=bool(discrepancy <= tolerance),
    )


class ExperimentService:
    """Runs the analyze, simulate, cluster, optimize-kernel and plotdata commands."""

    def __init__(self):
        self.rmt = RMTService()
        self.models = ModelService()
        self.spikes = SpikeService(self.rmt)
        self.eigvecs = EigvecService(self.rmt)
        self.closed_form = ClosedFormService()
        self.empirical = EmpiricalService(self.rmt)
        self.clusters = ClusterService(self.empirical)

    def _provenance(self, config: ExperimentConfig, command: str, seeds: Sequence[int] = ()) -> Provenance:
        return Provenance(config_hash=config_hash(config), seeds=list(seeds), version=__version__, command=command)

    def _system(self, config: ExperimentConfig) -> MixtureSystem:
        if config.model is None:
            raise ConfigError("this command needs a model section")
        return self.models.system(config.model)

    # ------------------------------------------------------------------
    # Theory
    # ------------------------------------------------------------------

    def theory(self, config: ExperimentConfig) -> Tuple[TheoryBundle, Dict[str, Any]]:
        system = self._system(config)
        growth = self.models.growth_check(system)
        tau = system.stats.tau
        f = build_kernel(config.kernel, tau)
        kernel = kernel_profile_from_closure(f, tau, branch=config.kernel.branch)
        logger.info(f"tau = {tau:.6g}, kernel triple ({kernel.ftau:.6g}, {kernel.f1:.6g}, {kernel.f2:.6g}), {kernel.branch.value}")

        support = None
        if kernel.generic:
            support = self.rmt.scan_support(system)
        spikes, support = self.spikes.find_spikes(system, kernel, support)

        block: Dict[str, Any] = {
            "tau": tau,
            "kernel": kernel.model_dump(mode="json"),
            "growth": growth,
            "support": support,
            "spikes": [s.model_dump(mode="json") for s in spikes],
            "k": system.k,
            "trivial_eigenvalue": system.n,
        }

        alignments: Dict[int, float] = {}
        projections = []
        for index, spike in enumerate(spikes):
            if spike.excluded_reason is not None:
                continue
            try:
                estimate = self.eigvecs.projection_matrix(system, kernel, spike)
                alignments[index] = self.eigvecs.alignment_metric(estimate, system.c, system.n, system.p)
                projections.append(
                    {"rho": spike.rho, "P": estimate.P, "alignment": alignments[index], "warnings": estimate.warnings}
                )
            except SpectralError as e:
                logger.warning(f"No projection for rho={spike.rho:.6g}: {e}")
                projections.append({"rho": spike.rho, "error": str(e)})
        block["projections"] = projections

        stats = None
        try:
            stats, _ = self.eigvecs.statistics(system, kernel, spikes)
            block["eigvec_stats"] = stats
        except SpectralError as e:
            logger.warning(f"Eigenvector statistics unavailable: {e}")
            block["eigvec_stats"] = {"error": str(e)}

        u1 = self.eigvecs.u1_statistics(system, kernel)
        block["u1"] = {"mean": u1[0], "std": u1[1]}
        cross_u1 = []
        for spike in usable_spikes(spikes):
            try:
                cross_u1.append(self.eigvecs.cross_fluct_u1(system, kernel, spike))
            except SpectralError as e:
                logger.warning(f"u1 cross-fluctuation unavailable at rho={spike.rho:.6g}: {e}")
        block["u1"]["cross"] = cross_u1

        theory = TheoryBundle(system, f, kernel, support, spikes, stats, alignments, u1)
        block["closed_form"] = self._closed_form_block(theory)
        block["ellipses"] = self._ellipses(theory)
        return theory, block

    def _closed_form_block(self, theory: TheoryBundle) -> Dict[str, Any]:
        try:
            special = self.closed_form.analyze(theory.system, theory.kernel)
        except SpectralError as e:
            logger.warning(f"Closed-form path failed: {e}")
            return {"error": str(e)}
        if special is None:
            return {}
        closed = sorted((s.rho for s in special.spikes if s.informative), reverse=True)
        generic = sorted((s.rho for s in theory.spikes if s.informative and s.excluded_reason is None), reverse=True)
        paired = min(len(closed), len(generic))
        discrepancy = [
            abs(a - b) / max(1.0, abs(b)) for a, b in zip(closed[:paired], generic[:paired])
        ]
        return {
            "regime": special.regime,
            "exact": special.regime in (EQUAL_COVARIANCE, TRACE_CONSTANT),
            "ell": special.ell,
            "separable": special.separable,
            "spikes": [s.model_dump(mode="json") for s in special.spikes],
            "stats": special.stats,
            "closed_rho": closed,
            "generic_rho": generic,
            "relative_discrepancy": discrepancy,
        }

    def _ellipses(self, theory: TheoryBundle) -> List[Dict[str, Any]]:
        """
        Class centers and covariances of the entries of the first two usable
        eigenvectors, on the scale of the eigenvector entries
        """
        stats = theory.stats
        if stats is None or stats.alpha.shape[0] < 2:
            return []
        sizes = theory.system.c * theory.system.n
        rows = []
        for a in range(theory.system.k):
            root = np.sqrt(sizes[a])
            rows.append({
                "class": a,
                "center_x": stats.alpha[0, a] / root,
                "center_y": stats.alpha[1, a] / root,
                "cov_xx": stats.sigma2[0, a] / sizes[a],
                "cov_xy": stats.cross[0, 1, a] / sizes[a],
                "cov_yy": stats.sigma2[1, a] / sizes[a],
            })
        return rows

    def analyze(self, config: ExperimentConfig) -> Report:
        theory, block = self.theory(config)
        report = Report(provenance=self._provenance(config, "analyze"), theory=to_jsonable(block))
        report.comparison.extend(self._closed_form_comparisons(block["closed_form"], config))
        return report

    @staticmethod
    def _closed_form_comparisons(closed: Dict[str, Any], config: ExperimentConfig) -> List[ComparisonEntry]:
        if not closed.get("exact"):
            return []
        entries = []
        for a, b in zip(closed["closed_rho"], closed["generic_rho"]):
            entry = comparison(
                f"closed form rho ({closed['regime']})",
                "closed-form spike location vs isolated eigenvalue equation",
                b,
                a,
                config.run.tolerances.closed_form * max(1.0, abs(b)),
            )
            entries.append(entry)
        return entries

    # ------------------------------------------------------------------
    # Simulation
    # ------------------------------------------------------------------

    def _trial(
        self,
        theory: TheoryBundle,
        cdf_support: Optional[SpectralSupport],
        margin: Tuple[float, float],
        seed: int,
    ) -> Dict[str, Any]:
        system, kernel = theory.system, theory.kernel
        samples = self.empirical.sample_mixture(system, seed)
        laplacian = self.empirical.build_kernel_laplacian(samples, theory.f)
        equivalent = self.empirical.build_equivalent(samples, system, kernel, laplacian)
        detections = self.empirical.empirical_spikes(laplacian, kernel, theory.support or SpectralSupport([], []),
                                                     theory.spikes, margin)

        usable = usable_spikes(theory.spikes)
        paired_indices = []
        for spike in usable:
            candidates = [d for d in detections if d[2] is not None and theory.spikes[d[2]] is spike]
            paired_indices.append(candidates[0][1] if candidates else None)
        found = [i for i in paired_indices if i is not None]
        reference = None
        if theory.stats is not None:
            reference = np.array([theory.stats.alpha[j] for j, i in enumerate(paired_indices) if i is not None])
        vector_stats = self.empirical.empirical_eigvec_stats(laplacian, samples.labels, found, reference)

        J = class_indicators(samples.labels, system.k)
        projection_norms = {}
        for value, index, paired in detections:
            if paired is not None and not theory.spikes[paired].informative:
                u = laplacian.eigenvectors[:, index]
                P = np.outer(J.T @ u, J.T @ u) / system.p
                projection_norms[paired] = float(np.linalg.norm(P, "fro"))
        sizes = J.sum(axis=0)
        alignments = {
            index: float(np.sum((J.T @ laplacian.eigenvectors[:, index]) ** 2 / sizes)) for _, index, _ in detections
        }

        ks = None
        if cdf_support is not None:
            ks = self.empirical.bulk_ks_distance(samples, system, cdf_support)

        u1_mean, u1_std = self.empirical.u1_class_moments(laplacian, samples.labels)
        return {
            "seed": seed,
            "detections": detections,
            "paired_indices": paired_indices,
            "operator_gap": equivalent.operator_gap,
            "eigenvalue_gap": equivalent.eigenvalue_gap,
            "alpha": vector_stats.alpha,
            "sigma2": vector_stats.sigma2,
            "cross": vector_stats.cross,
            "u1_mean": u1_mean,
            "u1_std": u1_std,
            "ks": ks,
            "projection_norms": projection_norms,
            "alignments": alignments,
            "plot": {
                "lprime": laplacian.eigenvalues,
                "lhat": equivalent.eigenvalues,
                "labels": samples.labels,
                "vectors": laplacian.eigenvectors[:, found] if found else np.zeros((system.n, 0)),
            },
        }

    async def simulate(self, config: ExperimentConfig, seeds: Optional[Sequence[int]] = None) -> Report:
        seeds = list(seeds or config.run.seeds)
        theory, block = self.theory(config)
        system, kernel = theory.system, theory.kernel
        margin = self.empirical.calibrate_edge_margin(
            system, theory.f, kernel, seeds=tuple(range(settings.margin_null_seeds)), key=config_hash(config)
        )
        cdf_support = theory.support if theory.support is not None and theory.support.intervals else None

        trials = await self.empirical.run_trials(seeds, lambda seed: self._trial(theory, cdf_support, margin, seed))
        report = Report(provenance=self._provenance(config, "simulate", seeds), theory=to_jsonable(block))
        report.comparison.extend(self._closed_form_comparisons(block["closed_form"], config))
        report.comparison.extend(self._simulation_comparisons(theory, trials, config))

        first = trials[0]
        report.empirical = to_jsonable({
            "margin": margin,
            "trials": [{key: value for key, value in trial.items() if key != "plot"} for trial in trials],
            "plot": first["plot"],
        })
        failed = [entry.name for entry in report.comparison if not entry.passed]
        if failed:
            logger.warning(f"{len(failed)} comparison(s) outside tolerance: {failed}")
        return report

    def _simulation_comparisons(self, theory: TheoryBundle, trials: List[Dict[str, Any]], config: ExperimentConfig):
        system, tolerances = theory.system, config.run.tolerances
        n, S = system.n, len(trials)
        location_tol = tolerances.spike_location / np.sqrt(n)
        sizes = system.c * n
        entries: List[ComparisonEntry] = []

        for index, spike in enumerate(theory.spikes):
            if spike.excluded_reason is not None:
                continue
            values = [d[0] for trial in trials for d in trial["detections"] if d[2] == index]
            empirical = float(np.mean(values)) if len(values) * 2 >= S else float("nan")
            entries.append(comparison(
                f"spike location rho={spike.rho:.6g}",
                "isolated eigenvalue equation" if spike.informative else "zero of h (non-informative spike)",
                spike.lambda_l,
                empirical,
                location_tol,
            ))
            if not spike.informative:
                norms = [t["projection_norms"][index] for t in trials if index in t["projection_norms"]]
                if norms:
                    entries.append(comparison(
                        f"projection norm rho={spike.rho:.6g}",
                        "vanishing class projection of the non-informative eigenvector",
                        0.0,
                        float(np.mean(norms)),
                        tolerances.projection_noninformative,
                    ))

        gaps = [t["eigenvalue_gap"] for t in trials if t["eigenvalue_gap"] is not None]
        if gaps:
            entries.append(comparison(
                "equivalent eigenvalue gap",
                "random matrix equivalent of L'",
                0.0,
                float(np.mean(gaps)),
                location_tol,
            ))

        u1_mean, u1_std = theory.u1
        observed = np.mean([t["u1_mean"] for t in trials], axis=0)
        for a in range(system.k):
            error = u1_std[a] / np.sqrt(sizes[a] * S)
            entries.append(comparison(
                f"u1 class {a} mean",
                "first eigenvector D^{1/2}1 class means",
                u1_mean[a],
                observed[a],
                tolerances.standard_errors * error + n ** -1.5,
            ))
        observed = np.mean([t["u1_std"] for t in trials], axis=0)
        for a in range(system.k):
            error = u1_std[a] / np.sqrt(2.0 * sizes[a] * S)
            entries.append(comparison(
                f"u1 class {a} std",
                "first eigenvector D^{1/2}1 class fluctuations",
                u1_std[a],
                observed[a],
                tolerances.standard_errors * error + n ** -1.5,
            ))

        if theory.stats is not None:
            entries.extend(self._eigvec_comparisons(theory, trials, config))

        ks = [t["ks"] for t in trials if t["ks"] is not None]
        if ks:
            entries.append(comparison(
                "bulk KS distance",
                "limiting spectral measure of PW^TWP",
                0.0,
                float(np.mean(ks)),
                tolerances.ks_distance,
            ))
        return entries

    @staticmethod
    def _eigvec_comparisons(theory: TheoryBundle, trials: List[Dict[str, Any]], config: ExperimentConfig):
        """
        |alpha|, sigma^2 and signed cross terms of the eigenvectors paired with usable
        spikes; a trial's statistics rows follow the eigenvectors it found
        """
        system, stats = theory.system, theory.stats
        n = system.n
        sizes = system.c * n
        limit = config.run.tolerances.standard_errors
        usable = usable_spikes(theory.spikes)
        entries: List[ComparisonEntry] = []

        def row(trial: Dict[str, Any], j: int) -> int:
            return sum(1 for i in trial["paired_indices"][:j] if i is not None)

        for j, spike in enumerate(usable):
            found = [t for t in trials if t["paired_indices"][j] is not None]
            if not found:
                continue
            alpha = np.mean([np.abs(t["alpha"][row(t, j)]) for t in found], axis=0)
            sigma2 = np.mean([t["sigma2"][row(t, j)] for t in found], axis=0)
            for a in range(system.k):
                error = np.sqrt(stats.sigma2[j, a] / (sizes[a] * len(found)))
                entries.append(comparison(
                    f"|alpha| class {a} rho={spike.rho:.6g}",
                    "class-wise eigenvector means",
                    abs(stats.alpha[j, a]),
                    alpha[a],
                    limit * error + 1.0 / np.sqrt(n),
                ))
            for a in range(system.k):
                error = stats.sigma2[j, a] * np.sqrt(2.0 / (sizes[a] * len(found)))
                entries.append(comparison(
                    f"sigma^2 class {a} rho={spike.rho:.6g}",
                    "class-wise eigenvector fluctuations",
                    stats.sigma2[j, a],
                    sigma2[a],
                    limit * error + 1.0 / np.sqrt(n),
                ))

        for j, first in enumerate(usable):
            for jj in range(j + 1, len(usable)):
                found = [t for t in trials if None not in (t["paired_indices"][j], t["paired_indices"][jj])]
                if not found:
                    continue
                cross = np.mean([t["cross"][row(t, j), row(t, jj)] for t in found], axis=0)
                for a in range(system.k):
                    expected = stats.cross[j, jj, a]
                    spread = stats.sigma2[j, a] * stats.sigma2[jj, a] + expected ** 2
                    error = np.sqrt(spread / (sizes[a] * len(found)))
                    entries.append(comparison(
                        f"sigma cross class {a} rho={first.rho:.6g}/{usable[jj].rho:.6g}",
                        "class-wise eigenvector cross-fluctuations",
                        expected,
                        cross[a],
                        limit * error + 1.0 / np.sqrt(n),
                    ))
        return entries

    # ------------------------------------------------------------------
    # Data clustering
    # ------------------------------------------------------------------

    def _dataset(self, config: ExperimentConfig, dataset: Optional[str], seed: int):
        if dataset is not None:
            data, labels = read_dataset(dataset, config.run.label_column)
            return preprocess(data), labels
        system = self._system(config)
        samples = self.empirical.sample_mixture(system, seed)
        return samples.X, samples.labels

    def _cluster_count(self, config: ExperimentConfig, labels: Optional[np.ndarray]) -> int:
        if config.model is not None:
            return config.model.k
        if labels is not None:
            return int(np.unique(labels).size)
        raise ConfigError("the number of clusters needs a model section or a label column")

    def _include_u1(self, config: ExperimentConfig, dataset: Optional[str]) -> bool:
        """u1 joins the embedding when the model has trace differences t != 0, unless the config says otherwise."""
        if config.run.include_u1 is not None:
            return config.run.include_u1
        if dataset is not None or config.model is None:
            return False
        t = self._system(config).stats.t
        return bool(np.abs(t).max() > 1e-12)

    def _embedding_theory(
        self, config: ExperimentConfig, dataset: Optional[str]
    ) -> Tuple[Optional[List[SpikeReport]], Optional[Dict[int, float]]]:
        """Predicted spikes and alignments of the model the samples were drawn from, if any."""
        if dataset is not None or config.model is None:
            return None, None
        try:
            theory, _ = self.theory(config)
        except SpectralError as e:
            logger.warning(f"No spike prediction for the embedding, using the dominant eigenvectors: {e}")
            return None, None
        return theory.spikes, theory.alignments

    def _grid_theory(self, config: ExperimentConfig, dataset: Optional[str]) -> Optional[SpikeTheory]:
        """Maps a grid kernel to the spikes it is predicted to produce on the model."""
        if dataset is not None or config.model is None:
            return None
        system = self._system(config)
        tau = system.stats.tau
        try:
            support = self.rmt.scan_support(system)
        except SpectralError as e:
            logger.warning(f"No bulk support for the grid search, using the dominant eigenvectors: {e}")
            return None

        def predict(f: KernelFunction) -> List[SpikeReport]:
            kernel = kernel_profile_from_closure(f, tau)
            spikes, _ = self.spikes.find_spikes(system, kernel, support if kernel.generic else None)
            return spikes

        return predict

    def cluster(self, config: ExperimentConfig, dataset: Optional[str] = None) -> Report:
        seed = config.run.seeds[0]
        X, labels = self._dataset(config, dataset, seed)
        k = self._cluster_count(config, labels)
        tau_hat = self.models.estimate_tau_hat(X)
        f = build_kernel(config.kernel, tau_hat)
        kernel = kernel_profile_from_closure(f, tau_hat, branch=config.kernel.branch)
        include_u1 = self._include_u1(config, dataset)
        l = config.run.embed_dim or max(1, k - 1) + int(include_u1)

        laplacian = self.empirical.build_kernel_laplacian(X, f)
        spikes, alignments = self._embedding_theory(config, dataset)
        embedding, result = self.clusters.cluster(
            laplacian, k, l, seed, labels, spikes, alignments, include_u1=include_u1, fallback=True
        )
        logger.info(
            f"Clustered {laplacian.n} samples into {k} groups, RatioCut {result.ratio_cut}, "
            f"misclassification {result.misclassification}"
        )
        report = Report(provenance=self._provenance(config, "cluster", [seed]))
        report.clustering = to_jsonable({
            "tau_hat": tau_hat,
            "kernel": kernel.model_dump(mode="json"),
            "embedding": {"indices": embedding.selected_indices, "provenance": embedding.provenance},
            "assignment": result.assignment,
            "ratio_cut": result.ratio_cut,
            "misclassification": result.misclassification,
            "inertia": result.inertia,
            "flags": result.flags,
        })
        return report

    async def optimize_kernel(self, config: ExperimentConfig, dataset: Optional[str] = None) -> Report:
        seed = config.run.seeds[0]
        X, labels = self._dataset(config, dataset, seed)
        k = self._cluster_count(config, labels)
        tau_hat = self.models.estimate_tau_hat(X)
        include_u1 = self._include_u1(config, dataset)
        l = config.run.embed_dim or max(1, k - 1) + int(include_u1)
        search = await self.clusters.kernel_grid_search(
            X, tau_hat, config.run.grid, k, l, seed, labels, include_u1, self._grid_theory(config, dataset)
        )
        report = Report(provenance=self._provenance(config, "optimize-kernel", [seed]))
        report.clustering = to_jsonable({
            "tau_hat": tau_hat,
            "best": None if search.best is None else search.best.summary(),
            "table": [point.summary() for point in search.table],
        })
        return report

    # ------------------------------------------------------------------
    # Plot data
    # ------------------------------------------------------------------

    def plotdata(self, report: Dict[str, Any], out: Path, bins: Any = "fd") -> List[Path]:
        """
        Histogram CSVs of L' and its equivalent on a shared binning, eigenvector
        scatter with theoretical class moments, and class ellipses
        """
        out = Path(out)
        plot = (report.get("empirical") or {}).get("plot") or {}
        theory = report.get("theory") or {}
        written = []

        spectra = {name: np.asarray(plot.get(name) or [], dtype=float) for name in ("lprime", "lhat")}
        pooled = np.concatenate(list(spectra.values()))
        edges = np.histogram_bin_edges(pooled, bins=bins) if pooled.size else np.zeros(0)
        for name, values in spectra.items():
            if edges.size:
                counts, _ = np.histogram(values, bins=edges)
                frame = pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})
            else:
                frame = pd.DataFrame(columns=["bin_left", "bin_right", "count"])
            written.append(write_csv(out / f"histogram_{name}.csv", frame))

        labels = np.asarray(plot.get("labels") or [], dtype=int)
        vectors = np.asarray(plot.get("vectors") or np.zeros((labels.size, 0)), dtype=float)
        stats = theory.get("eigvec_stats") or {}
        alpha = np.asarray(stats.get("alpha") or [], dtype=float)
        sigma2 = np.asarray(stats.get("sigma2") or [], dtype=float)
        rows = []
        if labels.size and vectors.ndim == 2:
            sizes = np.bincount(labels)
            for column in range(vectors.shape[1]):
                for i, value in enumerate(vectors[:, column]):
                    a = labels[i]
                    mean = alpha[column, a] / np.sqrt(sizes[a]) if alpha.ndim == 2 and column < alpha.shape[0] else None
                    sd = np.sqrt(sigma2[column, a] / sizes[a]) if sigma2.ndim == 2 and column < sigma2.shape[0] else None
                    rows.append({"vector": column, "index": i, "value": value, "class": int(a),
                                 "theory_mean": mean, "theory_sd": sd})
        scatter = pd.DataFrame(rows, columns=["vector", "index", "value", "class", "theory_mean", "theory_sd"])
        written.append(write_csv(out / "eigenvector_scatter.csv", scatter))

        ellipses = pd.DataFrame(
            theory.get("ellipses") or [],
            columns=["class", "center_x", "center_y", "cov_xx", "cov_xy", "cov_yy"],
        )
        written.append(write_csv(out / "ellipses.csv", ellipses))
        return written
