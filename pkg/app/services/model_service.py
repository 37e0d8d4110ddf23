from dataclasses import dataclass
from typing import Optional, Union
import logging

import numpy as np

from app.config import settings
from app.exceptions import InsufficientDataError
from app.models import ClassStatistics, GrowthReport, MixtureModel
from app.services.covariance import CovarianceFrame, realize_mean

logger = logging.getLogger(__name__)


@dataclass
class MixtureSystem:
    """A validated mixture together with its covariance frame and class statistics."""
    model: MixtureModel
    frame: CovarianceFrame
    means: np.ndarray
    stats: ClassStatistics

    @property
    def p(self) -> int:
        return self.model.p

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def k(self) -> int:
        return self.model.k

    @property
    def c(self) -> np.ndarray:
        return self.model.c

    @property
    def c0(self) -> float:
        return self.model.c0

    @property
    def kappa(self) -> float:
        return self.model.kappa

    @property
    def psi_scale(self) -> float:
        """s0 = sum_a (c_a / c0) psiVar_a"""
        return float(self.c @ self.stats.psi_var) / self.c0


class ModelService:
    def __init__(self, growth_thresholds: Optional[tuple] = None):
        self.mean_threshold, self.cov_threshold, self.trace_threshold = growth_thresholds or (
            settings.growth_mean_threshold,
            settings.growth_cov_threshold,
            settings.growth_trace_threshold,
        )

    def system(self, model: Union[MixtureModel, MixtureSystem]) -> MixtureSystem:
        if isinstance(model, MixtureSystem):
            return model
        frame = CovarianceFrame.from_model(model)
        means = np.column_stack([realize_mean(cls.mean, model.p) for cls in model.classes])
        stats = self._statistics(model, frame, means)
        return MixtureSystem(model=model, frame=frame, means=means, stats=stats)

    def compute_tau(self, model: Union[MixtureModel, MixtureSystem]) -> float:
        """
        tau = (2/p) tr C° with C° = sum_a c_a C_a
        """
        return self.system(model).stats.tau

    def compute_statistics(self, model: Union[MixtureModel, MixtureSystem]) -> ClassStatistics:
        return self.system(model).stats

    def _statistics(self, model: MixtureModel, frame: CovarianceFrame, means: np.ndarray) -> ClassStatistics:
        c, p = model.c, model.p
        center = means @ c
        M = means - center[:, None]

        traces = frame.traces()
        X = frame.cross_traces()
        t = np.sqrt(p) * (traces - traces @ c)
        Xc = X @ c
        T = X - Xc[:, None] - Xc[None, :] + c @ Xc
        T = 0.5 * (T + T.T)
        trace_sq = 2.0 * np.diag(X)
        psi_var = trace_sq + model.kappa * frame.diag_squares()
        tau = 2.0 * float(traces @ c)

        return ClassStatistics(M=M, t=t, T=T, trace_sq=trace_sq, psi_var=psi_var, traces=traces, tau=tau)

    def growth_check(self, model: Union[MixtureModel, MixtureSystem]) -> GrowthReport:
        """
        Heuristic diagnostics of the O(1) growth regime; breaches are warnings only
        """
        system = self.system(model)
        c, stats = system.c, system.stats
        mean_norms = np.linalg.norm(stats.M, axis=0)
        cov_norms = system.frame.operator_norms()
        trace_dev = np.abs(stats.t) * np.sqrt(system.p) / np.sqrt(system.n)

        report = GrowthReport(
            c0=system.c0,
            c_min=float(c.min()),
            c_max=float(c.max()),
            max_mean_norm=float(mean_norms.max()),
            max_cov_norm=float(cov_norms.max()),
            max_trace_deviation=float(trace_dev.max()),
        )
        if report.max_mean_norm > self.mean_threshold:
            report.warnings.append(f"max class mean norm {report.max_mean_norm:.3g} exceeds {self.mean_threshold}")
        if report.max_cov_norm > self.cov_threshold:
            report.warnings.append(f"max covariance norm {report.max_cov_norm:.3g} exceeds {self.cov_threshold}")
        if np.abs(stats.t).max() > self.trace_threshold:
            report.warnings.append(f"max |t_a| {np.abs(stats.t).max():.3g} exceeds {self.trace_threshold}")
        for message in report.warnings:
            logger.warning(f"Growth check: {message}")
        return report

    def estimate_tau_hat(self, data: np.ndarray) -> float:
        """
        tau_hat = (2/(n p)) sum_i ||x_i - x_bar||^2 for a p x n data matrix
        """
        data = np.asarray(data, dtype=float)
        p, n = data.shape
        if n < 2:
            raise InsufficientDataError(f"estimating tau needs at least 2 samples, got {n}")
        centered = data - data.mean(axis=1, keepdims=True)
        return float(2.0 * np.sum(centered ** 2) / (n * p))
