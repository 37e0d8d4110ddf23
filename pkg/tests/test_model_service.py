import numpy as np
import pytest

from app.exceptions import DimensionError, InsufficientDataError
from app.models import BlockSymmetricCovariance, ClassSpec, MixtureModel, ScaledIdentityCovariance
from app.services.model_service import ModelService


P, N = 2048, 512


@pytest.fixture
def model_service():
    return ModelService()


@pytest.fixture
def three_class_model():
    """Means 4 e_a, covariances (1 + 2(a-1)/sqrt(p)) I, sizes 128/128/256"""
    sizes = [128, 128, 256]
    classes = [
        ClassSpec(
            mean={a: 4.0},
            covariance=ScaledIdentityCovariance(beta=1.0 + 2.0 * a / np.sqrt(P)),
            size=size,
        )
        for a, size in enumerate(sizes)
    ]
    return MixtureModel(classes=classes, p=P, n=N)


def test_mixture_proportions(three_class_model):
    assert three_class_model.k == 3
    assert three_class_model.c0 == 4.0
    np.testing.assert_allclose(three_class_model.c, [0.25, 0.25, 0.5])


def test_compute_tau(model_service, three_class_model):
    tau = model_service.compute_tau(three_class_model)

    assert tau == pytest.approx(2.0 + 5.0 / np.sqrt(P))
    assert tau == pytest.approx(2.110485, abs=1e-6)


def test_class_statistics(model_service, three_class_model):
    stats = model_service.compute_statistics(three_class_model)
    c = three_class_model.c

    np.testing.assert_allclose(stats.t, [-2.5, -0.5, 1.5], atol=1e-10)
    np.testing.assert_allclose(stats.M @ c, 0.0, atol=1e-12)
    assert stats.t @ c == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(stats.T @ c, 0.0, atol=1e-10)
    np.testing.assert_allclose(stats.T, stats.T.T)


def test_gaussian_entries_psi_variance(model_service, three_class_model):
    stats = model_service.compute_statistics(three_class_model)

    # kappa = 0: psiVar_a = (2/p) tr C_a^2
    np.testing.assert_allclose(stats.psi_var, 2.0 * stats.traces ** 2)


def test_growth_check_clear(model_service, three_class_model):
    report = model_service.growth_check(three_class_model)

    assert report.clear
    assert report.c_min == 0.25
    assert report.max_mean_norm < 10.0


def test_growth_check_warns_on_large_means():
    model = MixtureModel(
        classes=[ClassSpec(mean={0: 100.0}, size=10), ClassSpec(size=10)],
        p=20,
        n=20,
    )

    report = ModelService(growth_thresholds=(5.0, 50.0, 10.0)).growth_check(model)

    assert not report.clear
    assert "mean norm" in report.warnings[0]


def test_block_symmetric_needs_divisible_dimension(model_service):
    model = MixtureModel(
        classes=[
            ClassSpec(covariance=BlockSymmetricCovariance(d1=[1.0, 1.0], d2=[2.0, 0.0], position=a), size=4)
            for a in range(2)
        ],
        p=5,
        n=8,
    )

    with pytest.raises(DimensionError):
        model_service.system(model)


def test_estimate_tau_hat(model_service):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((400, 300))

    tau_hat = model_service.estimate_tau_hat(data)

    assert tau_hat == pytest.approx(2.0, abs=0.02)


def test_estimate_tau_hat_single_sample(model_service):
    with pytest.raises(InsufficientDataError):
        model_service.estimate_tau_hat(np.ones((5, 1)))


def test_class_sizes_must_sum_to_n():
    with pytest.raises(ValueError):
        MixtureModel(classes=[ClassSpec(size=3), ClassSpec(size=3)], p=4, n=7)
