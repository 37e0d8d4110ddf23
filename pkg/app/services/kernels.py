from abc import ABC, abstractmethod
from typing import Callable, Optional, Sequence
import logging
import math

import numpy as np
from numpy.polynomial import Polynomial

from app.config import settings
from app.exceptions import ConfigError, KernelAssumptionError
from app.models import Branch, KernelConfig, KernelProfile

logger = logging.getLogger(__name__)


class KernelFunction(ABC):
    """
    Scalar kernel profile f applied entrywise to normalized squared distances
    """
    name = "kernel"

    @abstractmethod
    def __call__(self, x):
        ...

    def derivative(self, x, order: int):
        """Analytic derivative, or None when only finite differences are available."""
        return None


class ExponentialKernel(KernelFunction):
    name = "gaussian"

    def __init__(self, sigma2: float = 1.0):
        self.sigma2 = sigma2

    def __call__(self, x):
        return np.exp(-np.asarray(x, dtype=float) / (2.0 * self.sigma2))

    def derivative(self, x, order: int):
        return (-1.0 / (2.0 * self.sigma2)) ** order * self(x)


class QuadraticKernel(KernelFunction):
    name = "quadratic"

    def __init__(self, a: float, b: float, c: float, center: float):
        self.a, self.b, self.c, self.center = a, b, c, center

    def __call__(self, x):
        y = np.asarray(x, dtype=float) - self.center
        return self.a * y ** 2 + self.b * y + self.c

    def derivative(self, x, order: int):
        y = np.asarray(x, dtype=float) - self.center
        if order == 1:
            return 2.0 * self.a * y + self.b
        if order == 2:
            return np.full_like(y, 2.0 * self.a)
        return np.zeros_like(y)


class GeneralizedGaussianKernel(KernelFunction):
    """a * exp(-b (x - center)^2)"""
    name = "generalized_gaussian"

    def __init__(self, a: float, b: float, center: float):
        self.a, self.b, self.center = a, b, center

    def __call__(self, x):
        y = np.asarray(x, dtype=float) - self.center
        return self.a * np.exp(-self.b * y ** 2)

    def derivative(self, x, order: int):
        y = np.asarray(x, dtype=float) - self.center
        value = self(x)
        if order == 1:
            return -2.0 * self.b * y * value
        if order == 2:
            return (4.0 * self.b ** 2 * y ** 2 - 2.0 * self.b) * value
        return None


class PolynomialKernel(KernelFunction):
    name = "polynomial"

    def __init__(self, coefficients: Sequence[float]):
        self.poly = Polynomial(coefficients)

    def __call__(self, x):
        return self.poly(np.asarray(x, dtype=float))

    def derivative(self, x, order: int):
        return self.poly.deriv(order)(np.asarray(x, dtype=float))


class CallableKernel(KernelFunction):
    """Wraps an arbitrary vectorized closure; derivatives come from finite differences."""
    name = "callable"

    def __init__(self, fn: Callable):
        self.fn = fn

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))


def _scalar(value) -> float:
    return float(np.asarray(value, dtype=float).reshape(-1)[0])


def kernel_profile_from_closure(
    f: KernelFunction,
    tau: float,
    step: Optional[float] = None,
    threshold: Optional[float] = None,
    branch: Optional[Branch] = None,
) -> KernelProfile:
    """
    Derivative triple of f at tau plus f(0).

    Analytic derivatives are used when the family provides them. Otherwise
    central differences with step h = max(1e-5, 1e-5 * tau) for f', and
    sqrt(h) for f'' to keep the roundoff of the second difference small.
    """
    if not isinstance(f, KernelFunction):
        f = CallableKernel(f)
    f0 = _scalar(f(0.0))
    ftau = _scalar(f(tau))
    if not ftau > 0:
        raise KernelAssumptionError(f"f(tau) must be positive, got f({tau})={ftau}")

    d1 = f.derivative(tau, 1)
    d2 = f.derivative(tau, 2)
    if d1 is None or d2 is None:
        base = settings.finite_difference_step if step is None else step
        h = max(base, base * abs(tau))
        f1 = (_scalar(f(tau + h)) - _scalar(f(tau - h))) / (2.0 * h)
        h2 = math.sqrt(h)
        f2 = (_scalar(f(tau + h2)) - 2.0 * ftau + _scalar(f(tau - h2))) / h2 ** 2
        logger.debug(f"Finite-difference kernel derivatives at tau={tau}: f'={f1}, f''={f2}")
    else:
        f1, f2 = _scalar(d1), _scalar(d2)

    if branch is None:
        cutoff = settings.derivative_zero_threshold if threshold is None else threshold
        branch = Branch.ZERO_DERIVATIVE if abs(f1) < cutoff * max(1.0, ftau) else Branch.GENERIC

    return KernelProfile(tau=tau, f0=f0, ftau=ftau, f1=f1, f2=f2, branch=branch)


def generalized_gaussian_realizable(ftau: float, f1: float, f2: float) -> bool:
    return ftau > 0 and (f1 / ftau) ** 2 - f2 / ftau > 0


def realize_triple(
    tau: float,
    ftau: float,
    f1: float,
    f2: float,
    family: str = "quadratic",
) -> KernelFunction:
    """
    A kernel of the requested family with the prescribed (f(tau), f'(tau), f''(tau))
    """
    if ftau <= 0:
        raise KernelAssumptionError(f"f(tau) must be positive, got {ftau}")
    if family == "auto":
        family = "generalized_gaussian" if generalized_gaussian_realizable(ftau, f1, f2) else "quadratic"

    if family == "quadratic":
        return QuadraticKernel(a=f2 / 2.0, b=f1, c=ftau, center=tau)

    if family == "generalized_gaussian":
        r1, r2 = f1 / ftau, f2 / ftau
        b = (r1 ** 2 - r2) / 2.0
        if b <= 0:
            raise KernelAssumptionError(
                f"Triple ({ftau}, {f1}, {f2}) is not realizable by a generalized Gaussian kernel"
            )
        offset = -r1 / (2.0 * b)
        a = ftau * math.exp(b * offset ** 2)
        return GeneralizedGaussianKernel(a=a, b=b, center=tau - offset)

    raise ConfigError(f"Unknown kernel family for triple realization: {family}")


def build_kernel(config: KernelConfig, tau: float) -> KernelFunction:
    center = tau if config.center is None else config.center
    if config.family == "gaussian":
        return ExponentialKernel(config.sigma2)
    if config.family == "quadratic":
        if None in (config.a, config.b, config.c):
            raise ConfigError("quadratic kernel needs a, b and c")
        return QuadraticKernel(config.a, config.b, config.c, center)
    if config.family == "generalized_gaussian":
        if config.a is None or config.b is None:
            raise ConfigError("generalized_gaussian kernel needs a and b")
        return GeneralizedGaussianKernel(config.a, config.b, center)
    if config.family == "polynomial":
        if not config.coefficients:
            raise ConfigError("polynomial kernel needs coefficients")
        return PolynomialKernel(config.coefficients)
    if config.family == "triple":
        if config.triple is None:
            raise ConfigError("triple kernel needs (f(tau), f'(tau), f''(tau))")
        return realize_triple(tau, *config.triple, family=config.realize_with)
    raise ConfigError(f"Unknown kernel family: {config.family}")
