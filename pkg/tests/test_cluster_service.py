import numpy as np
import pytest

from app.exceptions import ConfigError, InsufficientDataError, ShortfallError, SolverDivergence, UndefinedScoreError
from app.models import Branch, ClassSpec, GridConfig, LaplacianBundle, MixtureModel, SpikeLocation, SpikeReport
from app.services.cluster_service import ClusterService, preprocess
from app.services.empirical_service import EmpiricalService
from app.services.kernels import ExponentialKernel


@pytest.fixture
def cluster_service():
    return ClusterService(EmpiricalService(max_workers=2))


@pytest.fixture
def separated_samples(cluster_service):
    model = MixtureModel(
        classes=[ClassSpec(mean={0: 6.0}, size=30), ClassSpec(mean={0: -6.0}, size=30)],
        p=60,
        n=60,
    )
    return cluster_service.empirical.sample_mixture(model, seed=0)


def test_ratio_cut_all_ones(cluster_service):
    K = np.ones((10, 10))

    assert cluster_service.ratio_cut(K, np.array([0] * 4 + [1] * 6)) == pytest.approx(10.0)


def test_ratio_cut_block_diagonal(cluster_service):
    K = np.kron(np.eye(2), np.ones((3, 3)))

    assert cluster_service.ratio_cut(K, np.array([0, 0, 0, 1, 1, 1])) == 0.0


def test_ratio_cut_empty_cluster(cluster_service):
    with pytest.raises(UndefinedScoreError):
        cluster_service.ratio_cut(np.ones((4, 4)), np.array([0, 0, 2, 2]), k=3)


def test_misclassification_permutation_invariant(cluster_service):
    labels = np.array([0, 0, 1, 1, 2, 2])

    assert cluster_service.misclassification(np.array([2, 2, 0, 0, 1, 1]), labels) == 0.0
    assert cluster_service.misclassification(np.array([2, 2, 0, 1, 1, 1]), labels) == pytest.approx(1.0 / 6.0)


def test_kmeans_point_masses(cluster_service):
    Y = np.vstack([np.zeros((5, 2)), np.ones((7, 2))])

    result = cluster_service.kmeans(Y, 2, seed=0)

    assert cluster_service.misclassification(result.assignment, np.array([0] * 5 + [1] * 7)) == 0.0
    assert result.inertia == pytest.approx(0.0)
    assert result.flags == []


def test_kmeans_needs_enough_points(cluster_service):
    with pytest.raises(InsufficientDataError):
        cluster_service.kmeans(np.zeros((2, 1)), 3)



def spectrum(eigenvalues, trivial):
    """Unit-degree bundle with a descending spectrum; column `trivial` spans D^{1/2}1."""
    n = len(eigenvalues)
    basis = np.eye(n)
    basis[:, 0] = 1.0
    Q, _ = np.linalg.qr(basis)
    order = list(range(1, n))
    order.insert(trivial, 0)
    return LaplacianBundle(
        K=np.ones((n, n)), degrees=np.ones(n), L=np.eye(n), Lprime=np.eye(n),
        eigenvalues=np.asarray(eigenvalues, dtype=float), eigenvectors=Q[:, order],
    )


def predicted(lambda_l, informative=True, excluded_reason=None):
    return SpikeReport(
        rho=lambda_l, lambda_l=lambda_l, multiplicity=1, informative=informative,
        branch=Branch.GENERIC, location=SpikeLocation.ABOVE, excluded_reason=excluded_reason,
    )


@pytest.fixture
def three_spike_spectrum():
    # a non-informative spike predicted between two informative ones; the eigenvalue
    # 5.625 at the non-informative prediction lies nearer 5.5375 than 5.444 does
    return spectrum([6.166, 5.625, 5.444, 4.05, 0.0, -0.3], trivial=4)


@pytest.fixture
def three_spikes():
    return [predicted(6.118), predicted(5.776, informative=False), predicted(5.5375)]


def test_embedding_skips_non_informative_eigenvector(cluster_service, three_spike_spectrum, three_spikes):
    embedding = cluster_service.spectral_embed(three_spike_spectrum, 2, spikes=three_spikes)

    assert sorted(embedding.selected_indices) == [0, 2]
    assert embedding.provenance == ["rho=6.118", "rho=5.5375"]


def test_embedding_orders_by_alignment(cluster_service, three_spike_spectrum, three_spikes):
    embedding = cluster_service.spectral_embed(
        three_spike_spectrum, 2, spikes=three_spikes, alignments={0: 0.3, 2: 0.6}
    )

    assert embedding.selected_indices == [2, 0]


def test_embedding_ignores_excluded_spikes(cluster_service, three_spike_spectrum):
    spikes = [predicted(6.118), predicted(5.6, excluded_reason="within the exclusion window of F(tau)")]

    embedding = cluster_service.spectral_embed(three_spike_spectrum, 1, spikes=spikes)

    assert embedding.selected_indices == [0]


def test_embedding_fallback_fills_dominant(cluster_service, three_spike_spectrum, three_spikes):
    with pytest.raises(ShortfallError):
        cluster_service.spectral_embed(three_spike_spectrum, 3, spikes=three_spikes)

    embedding = cluster_service.spectral_embed(three_spike_spectrum, 3, spikes=three_spikes, fallback=True)

    assert embedding.selected_indices == [0, 2, 1]
    assert embedding.provenance[2] == "eigenvalue 5.625"


def test_embedding_dimension_must_be_positive(cluster_service, separated_samples):
    laplacian = cluster_service.empirical.build_kernel_laplacian(separated_samples, ExponentialKernel(1.0))

    with pytest.raises(ConfigError):
        cluster_service.spectral_embed(laplacian, 0)


def test_embedding_shortfall(cluster_service, separated_samples):
    laplacian = cluster_service.empirical.build_kernel_laplacian(separated_samples, ExponentialKernel(1.0))
    spike = SpikeReport(
        rho=1.0, lambda_l=float(laplacian.eigenvalues[0]), multiplicity=1, informative=True,
        branch=Branch.GENERIC, location=SpikeLocation.ABOVE,
    )

    with pytest.raises(ShortfallError) as excinfo:
        cluster_service.spectral_embed(laplacian, 2, spikes=[spike])
    assert excinfo.value.requested == 2
    assert excinfo.value.available == 1


def test_embedding_with_u1(cluster_service, separated_samples):
    laplacian = cluster_service.empirical.build_kernel_laplacian(separated_samples, ExponentialKernel(1.0))

    embedding = cluster_service.spectral_embed(laplacian, 2, include_u1=True)

    assert embedding.Y.shape == (60, 2)
    assert embedding.provenance[0] == "u1"
    assert embedding.selected_indices[0] == laplacian.trivial_index
    np.testing.assert_allclose(np.linalg.norm(embedding.Y, axis=0), 1.0)


def test_cluster_separated_classes(cluster_service, separated_samples):
    laplacian = cluster_service.empirical.build_kernel_laplacian(separated_samples, ExponentialKernel(1.0))

    embedding, result = cluster_service.cluster(laplacian, k=2, l=1, seed=0, labels=separated_samples.labels)

    assert embedding.Y.shape == (60, 1)
    assert result.misclassification == 0.0
    assert result.ratio_cut is not None


def test_preprocess_scaling():
    rng = np.random.default_rng(0)
    data = 5.0 + 3.0 * rng.standard_normal((50, 8))

    X = preprocess(data)

    assert X.shape == (8, 50)
    np.testing.assert_allclose(X.mean(axis=1), 0.0, atol=1e-12)
    assert np.mean(np.sum(X ** 2, axis=0)) == pytest.approx(8.0)


def test_preprocess_rejects_constant_data():
    with pytest.raises(InsufficientDataError):
        preprocess(np.ones((4, 3)))


def test_evaluate_triple_infeasible(cluster_service, separated_samples):
    # f = 0.1 - 5 (x - tau) is strongly negative between the classes
    point = cluster_service.evaluate_triple(separated_samples.X, 2.0, (0.1, -5.0, 0.0), k=2, l=1)

    assert not point.feasible
    assert point.reason


async def test_kernel_grid_search(cluster_service, separated_samples):
    grid = GridConfig(ftau=[1.0], f1=[-1.0, -0.5], f2=[0.0, 1.0])

    search = await cluster_service.kernel_grid_search(
        separated_samples.X, 2.0, grid, k=2, l=1, labels=separated_samples.labels
    )

    assert len(search.table) == 4
    assert [point.triple for point in search.table] == grid.triples()
    assert search.best is not None
    assert search.best.ratio_cut == min(p.ratio_cut for p in search.table if p.feasible)


def test_evaluate_triple_uses_predicted_spikes(cluster_service, separated_samples, mocker):
    theory = mocker.Mock(return_value=[])

    point = cluster_service.evaluate_triple(
        separated_samples.X, 2.0, (1.0, -0.5, 0.0), k=2, l=1, labels=separated_samples.labels, theory=theory
    )

    theory.assert_called_once()
    # no prediction at all: the dominant eigenvector fills the embedding
    assert point.feasible
    assert point.result.misclassification == 0.0


def test_evaluate_triple_survives_failed_prediction(cluster_service, separated_samples):
    def theory(f):
        raise SolverDivergence("no convergence", residual=1.0)

    point = cluster_service.evaluate_triple(
        separated_samples.X, 2.0, (1.0, -0.5, 0.0), k=2, l=1, labels=separated_samples.labels, theory=theory
    )

    assert point.feasible
    assert point.misclassification == 0.0
