import numpy as np
import pytest

from app.exceptions import PoleError, SolverDivergence
from app.models import (
    BlockSymmetricCovariance,
    Branch,
    ClassSpec,
    KernelConfig,
    KernelProfile,
    MixtureModel,
    SpikeLocation,
)
from app.services.closedform_service import ClosedFormService
from app.services.kernels import ExponentialKernel, build_kernel, kernel_profile_from_closure
from app.services.model_service import ModelService
from app.services.spike_service import SpikeService


@pytest.fixture
def spike_service():
    return SpikeService()


@pytest.fixture
def block_system():
    """Two classes, zero means, equal traces: D2 = diag(2, 0, 1, 1) moves between blocks."""
    model = MixtureModel(
        classes=[
            ClassSpec(covariance=BlockSymmetricCovariance(d1=[1.0] * 4, d2=[2.0, 0.0, 1.0, 1.0], position=a), size=8)
            for a in range(2)
        ],
        p=8,
        n=16,
    )
    return ModelService().system(model)


@pytest.fixture
def flat_kernel(block_system):
    # (x - tau)^2 + 1 around tau: f' = 0, f'' = 2
    tau = block_system.stats.tau
    return KernelProfile(tau=tau, f0=tau ** 2 + 1.0, ftau=1.0, f1=0.0, f2=2.0, branch=Branch.ZERO_DERIVATIVE)


def test_zero_derivative_spikes(spike_service, block_system, flat_kernel):
    spikes, support = spike_service.find_spikes(block_system, flat_kernel)

    assert support is None
    assert [s.rho for s in spikes] == [pytest.approx(10.0), pytest.approx(1.0)]
    plus, informative = spikes
    assert not plus.informative
    assert informative.informative
    assert informative.multiplicity == 1
    assert informative.location == SpikeLocation.ABOVE
    assert informative.lambda_l == pytest.approx(1.0 + flat_kernel.shift0)


def test_zero_derivative_matches_closed_form(spike_service, block_system, flat_kernel):
    spikes, _ = spike_service.find_spikes(block_system, flat_kernel)
    closed = ClosedFormService().analyze(block_system, flat_kernel)

    ours = sorted(s.rho for s in spikes)
    theirs = sorted(s.rho for s in closed.spikes)
    np.testing.assert_allclose(ours, theirs, rtol=1e-10)


def test_zero_derivative_matrix_is_symmetric(spike_service, block_system, flat_kernel):
    S, trivial = spike_service.zero_derivative_matrix(block_system, flat_kernel)

    np.testing.assert_allclose(S, S.T)
    assert np.linalg.norm(trivial) == pytest.approx(1.0)
    # the trivial direction carries no spike when t = 0
    np.testing.assert_allclose(S @ trivial, 0.0, atol=1e-12)


def test_map_to_L_zero_derivative(spike_service, flat_kernel):
    assert spike_service.map_to_L(flat_kernel, 2.0) == pytest.approx(2.0 + flat_kernel.shift0)


def test_reduced_matrices_are_singular_at_the_spike(spike_service, block_system, flat_kernel):
    rmt = spike_service.rmt

    bundle = rmt.G0_z(block_system, flat_kernel, 1.0)
    H0 = rmt.H0_z(block_system, flat_kernel, 1.0)

    assert bundle.h == pytest.approx(-9.0)
    assert abs(np.linalg.det(bundle.G)) < 1e-10
    assert abs(np.linalg.det(H0)) < 1e-10
    assert abs(np.linalg.det(rmt.G0_z(block_system, flat_kernel, 2.0).G)) > 1e-3
    # h0 vanishes at the non-informative spike
    assert rmt.G0_z(block_system, flat_kernel, 10.0).h == pytest.approx(0.0, abs=1e-12)


def test_reduced_matrices_pole_at_zero(spike_service, block_system, flat_kernel):
    with pytest.raises(PoleError):
        spike_service.rmt.G0_z(block_system, flat_kernel, 0.0)
    with pytest.raises(PoleError):
        spike_service.rmt.H0_z(block_system, flat_kernel, 0.0)


@pytest.fixture(scope="module")
def quadratic_system():
    """Three unit-covariance classes with orthogonal means of norm 5 and c0 = 3.2."""
    model = MixtureModel(
        classes=[
            ClassSpec(mean={0: 5.0}, size=4),
            ClassSpec(mean={1: 5.0}, size=4),
            ClassSpec(mean={2: 5.0}, size=12),
        ],
        p=64,
        n=20,
    )
    return ModelService().system(model)


@pytest.fixture(scope="module")
def quadratic_kernel(quadratic_system):
    # f(tau) = 4, f'(tau) = -1, f''(tau) = 8
    tau = quadratic_system.stats.tau
    return kernel_profile_from_closure(build_kernel(KernelConfig(family="quadratic", a=4.0, b=-1.0, c=4.0), tau), tau)


@pytest.fixture(scope="module")
def quadratic_theory(quadratic_system, quadratic_kernel):
    return SpikeService().find_spikes(quadratic_system, quadratic_kernel)


def equal_covariance_system(spread, p=80, n=20):
    """Two classes at +-sqrt(spread) on one coordinate, C = I: ell = 1 + spread."""
    model = MixtureModel(
        classes=[
            ClassSpec(mean={0: np.sqrt(spread)}, size=n // 2),
            ClassSpec(mean={0: -np.sqrt(spread)}, size=n // 2),
        ],
        p=p,
        n=n,
    )
    return ModelService().system(model)


def test_generic_spikes_with_non_informative_one(quadratic_theory):
    spikes, support = quadratic_theory
    kept = [s for s in spikes if s.excluded_reason is None]

    assert [s.informative for s in kept] == [True, False, True]
    assert [s.lambda_l for s in kept] == [
        pytest.approx(6.118, abs=2e-3), pytest.approx(5.776, abs=2e-3), pytest.approx(5.5375, abs=2e-3)
    ]
    for spike in kept:
        assert spike.rho > support.right_edge
        assert spike.lambda_l == pytest.approx(0.5 * spike.rho + 4.0)


def test_h_zeros_vanish(spike_service, quadratic_system, quadratic_kernel, quadratic_theory):
    spikes, support = quadratic_theory
    rmt = spike_service.rmt

    zeros = spike_service.find_h_zeros(quadratic_system, quadratic_kernel, support)

    assert zeros
    assert zeros == pytest.approx(support.h_zeros)
    for zero in zeros:
        assert rmt.h_tau(quadratic_system, quadratic_kernel, zero) == pytest.approx(0.0, abs=1e-8)
    (noise,) = [s for s in spikes if not s.informative]
    assert min(abs(noise.rho - zero) for zero in zeros) < 1e-2


def test_reduced_matrices_singular_at_generic_spikes(
    spike_service, quadratic_system, quadratic_kernel, quadratic_theory
):
    spikes, _ = quadratic_theory
    rmt = spike_service.rmt
    informative = [s for s in spikes if s.informative and s.excluded_reason is None]
    (noise,) = [s for s in spikes if not s.informative]

    for spike in informative:
        G = rmt.G_z(quadratic_system, quadratic_kernel, spike.rho).G
        assert np.linalg.svd(G, compute_uv=False).min() < 1e-6 * np.linalg.norm(G, 2)
    H = rmt.H_z(quadratic_system, quadratic_kernel, noise.rho)
    away = rmt.H_z(quadratic_system, quadratic_kernel, noise.rho + 0.1)
    assert H.shape == (7, 7)
    assert abs(np.linalg.det(H)) < 1e-6 * abs(np.linalg.det(away))


def test_find_spikes_noninformative_only(spike_service, quadratic_system, quadratic_kernel, quadratic_theory):
    spikes, support = quadratic_theory

    noise = spike_service.find_spikes_noninformative(quadratic_system, quadratic_kernel, support)

    assert [s.informative for s in noise] == [False]
    assert noise[0].rho == pytest.approx(next(s.rho for s in spikes if not s.informative))
    assert noise[0].location == SpikeLocation.ABOVE


@pytest.mark.parametrize(
    "error",
    [SolverDivergence("diverged", residual=1.0), ValueError("f(a) and f(b) must have different signs")],
)
def test_bracket_failures_are_skipped(
    spike_service, quadratic_system, quadratic_kernel, quadratic_theory, mocker, error
):
    _, support = quadratic_theory
    mocker.patch("app.services.spike_service.brentq", side_effect=error)

    assert spike_service.find_h_zeros(quadratic_system, quadratic_kernel, support) == []
    assert spike_service.find_spikes_noninformative(quadratic_system, quadratic_kernel, support) == []


@pytest.mark.parametrize("factor, expected", [(1.2, 1), (0.8, 0)])
def test_phase_transition(spike_service, factor, expected):
    # C = I and c0 = 4 put the separability threshold at ell = 1 + sqrt(c0) = 3
    ell = 3.0 * factor
    system = equal_covariance_system(ell - 1.0)
    kernel = kernel_profile_from_closure(ExponentialKernel(1.0), system.stats.tau)

    spikes, _ = spike_service.find_spikes(system, kernel)

    informative = [s for s in spikes if s.informative and s.excluded_reason is None]
    assert len(informative) == expected
    if expected:
        closed = ClosedFormService().equal_cov_spikes_scaled_identity(1.0, 4.0, ell)
        assert informative[0].rho == pytest.approx(closed, rel=1e-6)
