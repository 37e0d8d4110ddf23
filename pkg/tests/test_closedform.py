import numpy as np
import pytest

from app.exceptions import DimensionError, PoleError
from app.models import BlockSymmetricCovariance, Branch, ClassSpec, KernelProfile, MixtureModel
from app.services.closedform_service import (
    SCALED_COVARIANCE,
    TRACE_CONSTANT,
    ClosedFormService,
    InverseStieltjesCurve,
    x_of_g,
)
from app.services.kernels import ExponentialKernel, kernel_profile_from_closure
from app.services.model_service import ModelService


@pytest.fixture
def closed_form():
    return ClosedFormService()


@pytest.fixture
def unit_curve():
    return InverseStieltjesCurve.from_measure([1.0], None, 2.0)


@pytest.fixture
def gaussian_profile():
    return kernel_profile_from_closure(ExponentialKernel(1.0), 2.0)


def test_x_of_g_valid(unit_curve):
    value, valid = x_of_g(unit_curve, -0.1)

    assert value == pytest.approx(5.0 + 1.0 / 0.9)
    assert valid


def test_x_of_g_invalid(unit_curve):
    value, valid = x_of_g(unit_curve, -3.0)

    assert value == pytest.approx(-1.0 / 3.0)
    assert not valid


def test_x_of_g_poles(unit_curve):
    with pytest.raises(PoleError):
        x_of_g(unit_curve, 0.0)
    with pytest.raises(PoleError):
        x_of_g(unit_curve, -1.0)


def test_scaled_identity_spike(closed_form):
    assert closed_form.equal_cov_spikes_scaled_identity(1.0, 4.0, 5.0) == pytest.approx(2.5)
    assert closed_form.equal_cov_spikes_scaled_identity(1.0, 4.0, 1.5) is None


def test_equal_covariance_matches_scaled_identity_formula(closed_form, gaussian_profile):
    p = 20
    c = np.array([0.5, 0.5])
    C = np.ones(p)

    def means(spread):
        M = np.zeros((p, 2))
        M[0] = [np.sqrt(spread), -np.sqrt(spread)]
        return M

    # C + M diag(c) M^T has the eigenvalue 1 + 3 = 4 off the spectrum of C
    result = closed_form.equal_cov_spikes(means(3.0), c, 4.0, C, gaussian_profile, psi=0.0)
    assert result.ell == [pytest.approx(4.0)]
    informative = [s for s in result.spikes if s.informative]
    assert len(informative) == 1
    assert informative[0].rho == pytest.approx(closed_form.equal_cov_spikes_scaled_identity(1.0, 4.0, 4.0))
    assert informative[0].rho == pytest.approx(1.0 + 4.0 / 3.0)

    # ell = 2.5 sits within beta * sqrt(c0) of beta
    result = closed_form.equal_cov_spikes(means(1.5), c, 4.0, C, gaussian_profile, psi=0.0)
    assert result.separable == [False]
    assert [s for s in result.spikes if s.informative] == []


def test_equal_covariance_no_means(closed_form, gaussian_profile):
    result = closed_form.equal_cov_spikes(np.zeros((10, 2)), np.array([0.5, 0.5]), 2.0, np.ones(10), gaussian_profile)

    assert [s for s in result.spikes if s.informative] == []


def test_equal_covariance_clustering(closed_form):
    M = np.zeros((20, 2))
    M[0] = [np.sqrt(3.0), -np.sqrt(3.0)]
    c = np.array([0.5, 0.5])

    result = closed_form.equal_cov_clustering(M, c, 4.0, np.ones(20))

    # ell = 4, separability 1 - 4/9 = 5/9
    assert result.ell == [pytest.approx(4.0)]
    alpha2, sigma2 = result.stats["alpha2"][0], result.stats["sigma2"][0]
    np.testing.assert_allclose(alpha2, 15.0 / 72.0)
    np.testing.assert_allclose(alpha2 + sigma2, c)
    assert result.stats["cross2"] == {}


def test_scaled_covariance_spike(closed_form, gaussian_profile):
    curve = InverseStieltjesCurve.from_measure([1.0], None, 1.0)
    gamma = np.array([np.sqrt(2.0), -np.sqrt(2.0)])

    result = closed_form.scaled_cov_spikes(gamma, np.array([0.5, 0.5]), 1.0, curve, gaussian_profile)

    assert result.regime == SCALED_COVARIANCE
    assert result.ell == [pytest.approx(-0.25)]
    assert result.separable == [True]
    assert result.spikes[0].rho == pytest.approx(-0.05)


def test_scaled_covariance_without_spread(closed_form, gaussian_profile):
    curve = InverseStieltjesCurve.from_measure([1.0], None, 1.0)

    result = closed_form.scaled_cov_spikes(np.zeros(2), np.array([0.5, 0.5]), 1.0, curve, gaussian_profile)

    assert result.spikes == []
    assert result.separable == [False]


def test_scaled_covariance_clustering_zero_gamma(closed_form, gaussian_profile):
    curve = InverseStieltjesCurve.from_measure([1.0], None, 1.0)
    c = np.array([0.5, 0.5])

    result = closed_form.scaled_cov_clustering(np.zeros(2), c, 1.0, curve, gaussian_profile, p=400)

    np.testing.assert_allclose(result.stats["alpha2_sq"], 0.0)
    np.testing.assert_allclose(result.stats["alpha1_sq"], c)


def test_trace_constant_ell(closed_form):
    kernel = KernelProfile(tau=2.0, f0=22.0, ftau=4.0, f1=-1.0, f2=8.0)
    D1, D2 = np.array([1.0, 1.0]), np.array([2.0, 0.0])

    result = closed_form.trace_const_spikes(D1, D2, 2, 0.5, kernel)

    assert result.regime == TRACE_CONSTANT
    assert result.stats["tau_d"] == pytest.approx(0.5)
    assert result.ell[0] == pytest.approx(2.0)


def test_trace_constant_equal_blocks(closed_form):
    kernel = KernelProfile(tau=2.0, f0=22.0, ftau=4.0, f1=-1.0, f2=8.0)
    D = np.array([1.0, 1.0])

    result = closed_form.trace_const_spikes(D, D, 2, 0.5, kernel)

    assert result.ell[0] == 0.0
    assert not result.separable[0]
    assert all(not s.informative for s in result.spikes)


def test_trace_constant_dimension_error(closed_form):
    kernel = KernelProfile(tau=2.0, f0=22.0, ftau=4.0, f1=-1.0, f2=8.0)

    with pytest.raises(DimensionError):
        closed_form.trace_const_spikes(np.ones(2), np.ones(2), 2, 0.5, kernel, p=5)


def test_trace_constant_projection_zero_derivative(closed_form):
    curve = closed_form.trace_const_curve(np.ones(3), np.array([2.0, 0.0, 1.0]), 3, 0.5)

    P, alignment = closed_form.trace_const_projection(3, 0.5, curve, None)

    assert alignment == pytest.approx(2.0)
    np.testing.assert_allclose(P, (np.eye(3) - np.ones((3, 3)) / 3.0) / 1.5)
    zero, none = closed_form.trace_const_projection(3, 0.5, curve, None, informative=False)
    assert none == 0.0
    assert not zero.any()


def test_detect_trace_constant_regime(closed_form):
    model = MixtureModel(
        classes=[
            ClassSpec(covariance=BlockSymmetricCovariance(d1=[1.0] * 4, d2=[2.0, 0.0, 1.0, 1.0], position=a), size=8)
            for a in range(2)
        ],
        p=8,
        n=16,
    )
    system = ModelService().system(model)
    kernel = KernelProfile(tau=system.stats.tau, f0=5.0, ftau=1.0, f1=0.0, f2=2.0, branch=Branch.ZERO_DERIVATIVE)

    assert closed_form.detect_regime(system) == TRACE_CONSTANT
    result = closed_form.analyze(system, kernel)
    informative = [s for s in result.spikes if s.informative]
    assert informative[0].rho == pytest.approx(1.0)
    assert informative[0].multiplicity == 1
    assert [s.rho for s in result.spikes if not s.informative] == [pytest.approx(10.0)]
