import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from app.exceptions import ConfigError, DatasetError
from app.main import EXIT_INPUT, EXIT_OK, build_parser, exit_code, main, parse_seeds
from app.models import ClassSpec, ComparisonEntry, ExperimentConfig, MixtureModel, Provenance, Report, RunConfig
from app.services.experiment_service import ExperimentService
from app.utils.config_io import (
    apply_overrides,
    config_hash,
    load_config,
    parse_override,
    read_dataset,
    to_jsonable,
    write_dataset,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "model": {
            "p": 8,
            "n": 16,
            "classes": [
                {"mean": {"0": 1.0}, "size": 8},
                {"mean": {"1": 1.0}, "size": 8},
            ],
        },
        "kernel": {"family": "gaussian"},
        "run": {"seeds": [0]},
    }))
    return path


def make_report(*passed):
    entries = [
        ComparisonEntry(name=f"c{i}", reference="r", theory=0.0, empirical=0.0, discrepancy=0.0,
                        tolerance=1.0, passed=flag)
        for i, flag in enumerate(passed)
    ]
    provenance = Provenance(config_hash="0" * 64, version="0.1.0", command="analyze")
    return Report(provenance=provenance, comparison=entries)


def test_parse_seeds():
    assert parse_seeds(None) is None
    assert parse_seeds("1,2, 3") == [1, 2, 3]
    assert parse_seeds("[4,5]") == [4, 5]
    with pytest.raises(ConfigError):
        parse_seeds("a,b")


def test_parse_override():
    assert parse_override("run.seeds=[1, 2]") == (["run", "seeds"], [1, 2])
    assert parse_override("kernel.family=quadratic") == (["kernel", "family"], "quadratic")
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_apply_overrides_into_lists():
    data = {"model": {"classes": [{"size": 1}, {"size": 2}]}}

    apply_overrides(data, ["model.classes.1.size=5", "run.embed_dim=2"])

    assert data["model"]["classes"][1]["size"] == 5
    assert data["run"]["embed_dim"] == 2


def test_load_config_with_overrides(config_file):
    config = load_config(str(config_file), ["kernel.sigma2=2.0", "run.seeds=[3,4]"])

    assert config.kernel.sigma2 == 2.0
    assert config.run.seeds == [3, 4]
    assert config.model.c0 == 0.5


def test_load_config_rejects_unknown_fields(config_file):
    with pytest.raises(ConfigError):
        load_config(str(config_file), ["kernel.bandwidth=2"])


def test_config_hash_is_stable(config_file):
    first = load_config(str(config_file))
    second = load_config(str(config_file))
    changed = load_config(str(config_file), ["kernel.sigma2=3"])

    assert config_hash(first) == config_hash(second)
    assert config_hash(first) != config_hash(changed)
    assert len(config_hash(first)) == 64


def test_to_jsonable():
    payload = {(0, 1): np.array([1.0, np.inf]), "z": 1 + 2j, "n": np.int64(3)}

    assert to_jsonable(payload) == {"0,1": [1.0, None], "z": [1.0, 2.0], "n": 3}


def test_dataset_roundtrip_with_labels(tmp_path):
    X = np.arange(12, dtype=float).reshape(3, 4)
    path = write_dataset(tmp_path / "data.csv", X, np.array([0, 1, 1, 0]))

    data, labels = read_dataset(str(path))

    np.testing.assert_allclose(data, X.T)
    np.testing.assert_array_equal(labels, [0, 1, 1, 0])


def test_dataset_error_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    pd.DataFrame({"x0": ["1.0", "2.0", "oops"], "x1": [0.0, 1.0, 2.0]}).to_csv(path, index=False)

    with pytest.raises(DatasetError) as excinfo:
        read_dataset(str(path))
    assert excinfo.value.line == 4


def test_parser_commands():
    parser = build_parser()

    args = parser.parse_args(["simulate", "--config", "c.json", "--seeds", "1,2", "--override", "run.embed_dim=1"])

    assert args.command == "simulate"
    assert args.out == "out"
    assert args.override == ["run.embed_dim=1"]
    with pytest.raises(SystemExit):
        parser.parse_args(["plotdata"])


def test_exit_code():
    assert exit_code(make_report(True, True)) == EXIT_OK
    assert exit_code(make_report(True, False)) == 1


def test_main_invalid_config(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"model": {"p": 4, "n": 3, "classes": [{"size": 1}]}}')

    assert main(["analyze", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_INPUT


def test_main_missing_model(tmp_path):
    assert main(["analyze", "--out", str(tmp_path / "out")]) == EXIT_INPUT


def test_main_cluster_writes_report(tmp_path, config_file):
    out = tmp_path / "out"

    code = main(["cluster", "--config", str(config_file), "--out", str(out)])

    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["provenance"]["command"] == "cluster"
    assert report["provenance"]["config_hash"] == config_hash(
        ExperimentConfig.model_validate(json.loads(config_file.read_text()))
    )
    assert len(report["clustering"]["assignment"]) == 16


def test_u1_joins_embedding_only_with_trace_differences(config_file):
    service = ExperimentService()
    equal = load_config(str(config_file))
    scaled = load_config(str(config_file), ['model.classes.1.covariance={"kind": "scaled_identity", "beta": 2.0}'])
    forced = load_config(str(config_file), ["run.include_u1=true"])

    assert not service._include_u1(equal, None)
    assert service._include_u1(scaled, None)
    assert not service._include_u1(scaled, "data.csv")
    assert service._include_u1(forced, None)


@pytest.mark.parametrize("name", ["three_class_scaled.json", "three_class_quadratic.json"])
def test_config_roundtrip(tmp_path, name):
    config = load_config(str(CONFIGS / name))
    path = tmp_path / name
    path.write_text(config.model_dump_json())

    again = load_config(str(path))

    assert again == config
    assert config_hash(again) == config_hash(config)


async def test_simulate_is_deterministic():
    config = ExperimentConfig(
        model=MixtureModel(
            classes=[ClassSpec(mean={0: 2.0}, size=25), ClassSpec(mean={0: -2.0}, size=25)],
            p=100,
            n=50,
        ),
        run=RunConfig(seeds=[0, 1]),
    )

    first = await ExperimentService().simulate(config)
    second = await ExperimentService().simulate(config)

    assert json.dumps(first.empirical, sort_keys=True) == json.dumps(second.empirical, sort_keys=True)
    assert [entry.model_dump_json() for entry in first.comparison] == [
        entry.model_dump_json() for entry in second.comparison
    ]
    assert first.provenance.seeds == [0, 1]
