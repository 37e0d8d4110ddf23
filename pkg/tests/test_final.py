import json
from pathlib import Path

import numpy as np
import pytest

from app.main import EXIT_COMPARISON, EXIT_OK, main
from app.models import (
    BlockSymmetricCovariance,
    ClassSpec,
    ExperimentConfig,
    KernelConfig,
    MixtureModel,
    RunConfig,
)
from app.services.empirical_service import class_indicators
from app.services.experiment_service import ExperimentService
from app.utils.config_io import load_config

# Mark all tests in this file as integration tests
pytestmark = pytest.mark.integration

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def experiment_service():
    """Full pipeline with the default settings"""
    return ExperimentService()


def usable(spikes):
    return [s for s in spikes if s["informative"] and s["excluded_reason"] is None]


def test_scaled_mixture_has_two_informative_spikes(experiment_service):
    config = load_config(str(CONFIGS / "three_class_scaled.json"))

    report = experiment_service.analyze(config)

    theory = report.theory
    assert theory["tau"] == pytest.approx(2.110485, abs=1e-6)
    assert theory["growth"]["warnings"] == []
    assert len(usable(theory["spikes"])) == 2
    assert theory["trivial_eigenvalue"] == 512
    for projection in theory["projections"]:
        if "alignment" in projection:
            assert 0.0 <= projection["alignment"] <= 1.0


def test_quadratic_profile_has_non_informative_spike(experiment_service):
    config = load_config(str(CONFIGS / "three_class_quadratic.json"))

    report = experiment_service.analyze(config)

    spikes = [s for s in report.theory["spikes"] if s["excluded_reason"] is None]
    assert report.theory["kernel"]["f0"] == pytest.approx(22.0)
    assert len([s for s in spikes if s["informative"]]) == 2
    assert len([s for s in spikes if not s["informative"]]) == 1
    for spike in spikes:
        assert spike["lambda_l"] == pytest.approx(0.5 * spike["rho"] + 4.0)


def test_equal_covariance_closed_form_agrees(experiment_service):
    # l = 1 + 4 = 5 for C = I, c0 = 2: rho = 5/2 + 5/4
    config = ExperimentConfig(
        model=MixtureModel(
            classes=[ClassSpec(mean={0: 2.0}, size=100), ClassSpec(mean={0: -2.0}, size=100)],
            p=400,
            n=200,
        ),
        kernel=KernelConfig(family="gaussian"),
    )

    report = experiment_service.analyze(config)

    closed = report.theory["closed_form"]
    assert closed["regime"] == "equal_covariance"
    assert closed["closed_rho"] == [pytest.approx(3.75)]
    assert closed["generic_rho"] == [pytest.approx(3.75, rel=1e-8)]
    assert report.comparison
    assert report.passed


def test_trace_constant_closed_form_agrees(experiment_service):
    size = 128
    d2 = np.ones(size)
    d2[: size // 2] = [2.0, 0.0] * (size // 4)
    config = ExperimentConfig(
        model=MixtureModel(
            classes=[
                ClassSpec(
                    covariance=BlockSymmetricCovariance(d1=[1.0] * size, d2=d2.tolist(), position=a),
                    size=128,
                )
                for a in range(2)
            ],
            p=2 * size,
            n=256,
        ),
        kernel=KernelConfig(family="triple", triple=(1.0, 0.0, 2.0)),
        run=RunConfig(seeds=[0]),
    )

    report = experiment_service.analyze(config)

    closed = report.theory["closed_form"]
    assert closed["regime"] == "trace_constant"
    # rho = 2 (f''/f) tau_D / (c0 k) with tau_D = (1/p) tr (D1 - D2)^2 = 1/4 and c0 = 1
    assert closed["closed_rho"] == [pytest.approx(0.5)]
    assert report.passed


async def test_simulation_matches_theory(experiment_service):
    config = load_config(str(CONFIGS / "three_class_scaled.json"))

    report = await experiment_service.simulate(config)

    failed = [entry.name for entry in report.comparison if not entry.passed]
    assert failed == []
    assert len(report.empirical["trials"]) == 20


def test_cluster_scaled_mixture(experiment_service):
    config = load_config(str(CONFIGS / "three_class_scaled.json"))

    report = experiment_service.cluster(config)

    assert report.clustering["misclassification"] < 0.1


def test_cli_simulate_and_plotdata(tmp_path):
    out = tmp_path / "out"
    config = str(CONFIGS / "three_class_scaled.json")

    code = main(["simulate", "--config", config, "--seeds", "0,1", "--out", str(out)])
    assert code in (EXIT_OK, EXIT_COMPARISON)
    report = json.loads((out / "report.json").read_text())
    assert report["provenance"]["seeds"] == [0, 1]

    plots = tmp_path / "plots"
    assert main(["plotdata", "--report", str(out / "report.json"), "--out", str(plots)]) == EXIT_OK
    for name in ("histogram_lprime.csv", "histogram_lhat.csv", "eigenvector_scatter.csv", "ellipses.csv"):
        assert (plots / name).exists()


def test_single_class_has_no_informative_spike(experiment_service):
    config = ExperimentConfig(model=MixtureModel(classes=[ClassSpec(size=64)], p=128, n=64))

    report = experiment_service.analyze(config)

    assert report.theory["k"] == 1
    assert usable(report.theory["spikes"]) == []
    assert report.theory["closed_form"] == {}


async def test_simulate_quadratic_profile_detects_non_informative_spike(experiment_service):
    config = load_config(str(CONFIGS / "three_class_quadratic.json"))

    report = await experiment_service.simulate(config)

    entries = {entry.name: entry for entry in report.comparison}
    locations = [entry for name, entry in entries.items() if name.startswith("spike location")]
    assert len(locations) == 3
    assert all(np.isfinite(entry.empirical) for entry in locations)
    norms = [entry for name, entry in entries.items() if name.startswith("projection norm")]
    assert len(norms) == 1
    assert norms[0].passed
    below, above = report.empirical["margin"]
    assert below > 0 and above > 0


def test_cluster_quadratic_profile_skips_non_informative_eigenvector(experiment_service):
    config = load_config(str(CONFIGS / "three_class_quadratic.json"))

    report = experiment_service.cluster(config)

    clustering = report.clustering
    assert all(origin.startswith("rho=") for origin in clustering["embedding"]["provenance"] if origin != "u1")
    assert clustering["misclassification"] < 0.2


def test_block_model_eigenvector_is_perfectly_aligned(experiment_service):
    size = 1024
    d2 = [2.0, 0.0] * (size // 2)
    config = ExperimentConfig(
        model=MixtureModel(
            classes=[
                ClassSpec(
                    covariance=BlockSymmetricCovariance(d1=[1.0] * size, d2=d2, position=a),
                    size=256,
                )
                for a in range(2)
            ],
            p=2 * size,
            n=512,
        ),
        kernel=KernelConfig(family="triple", triple=(1.0, 0.0, 16.0)),
        run=RunConfig(seeds=[0]),
    )
    theory, _ = experiment_service.theory(config)
    samples = experiment_service.empirical.sample_mixture(theory.system, seed=0)
    laplacian = experiment_service.empirical.build_kernel_laplacian(samples, theory.f)

    embedding = experiment_service.clusters.spectral_embed(laplacian, 1, theory.spikes, theory.alignments)

    J = class_indicators(samples.labels, theory.system.k)
    u = embedding.Y[:, 0]
    alignment = float(np.sum((J.T @ u) ** 2 / J.sum(axis=0)))
    assert max(theory.alignments.values()) == pytest.approx(1.0)
    assert alignment >= 0.9 * (theory.system.k - 1)


async def test_grid_search_keeps_the_quadratic_profile_competitive(experiment_service):
    config = load_config(
        str(CONFIGS / "three_class_quadratic.json"),
        ["run.grid.ftau=[4.0]", "run.grid.f1=[-1.0, -0.5]", "run.grid.f2=[0.0, 8.0]"],
    )

    report = await experiment_service.optimize_kernel(config)

    table = report.clustering["table"]
    (reference,) = [row for row in table if (row["ftau"], row["f1"], row["f2"]) == (4.0, -1.0, 8.0)]
    assert reference["feasible"]
    assert reference["misclassification"] < 0.2
    assert report.clustering["best"]["ratio_cut"] <= 1.02 * reference["ratio_cut"]
