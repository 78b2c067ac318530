import json
from pathlib import Path

import pytest

from app.main import main
from app.schemas.experiment import load_config
from app.services.experiment_service import SCENARIOS, run_experiment
from app.utils.export import sha256_file

CONFIGS = Path(__file__).parent / "configs"

GEOMETRY_CONFIG = {
    "scenario": "geometry-checks",
    "geometry": {"name": "kk-q1", "p": 1, "q": 1, "A": [{"mode": [1], "sin": [[0.3]]}]},
    "seed": 3,
}


def _write(tmp_path, config, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return str(path)


def test_list_names_every_scenario(capsys):
    """Plain listing has one line per scenario"""
    assert main(["list"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [line.split()[0] for line in lines] == list(SCENARIOS)


def test_list_json(capsys):
    """--json prints name, description, dimensions, runtime and anchor"""
    assert main(["list", "--json"]) == 0
    entries = json.loads(capsys.readouterr().out)
    assert len(entries) == 9
    assert {"name", "description", "dimensions", "runtime", "anchor"} <= set(entries[0])


def test_usage_error_exits_2():
    """Unknown subcommands are usage errors"""
    assert main(["frobnicate"]) == 2


def test_missing_config_exits_2(tmp_path):
    """A config path that does not exist is ConfigInvalid"""
    assert main(["run", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 2


def test_unknown_scenario_exits_2(tmp_path):
    """Scenario names are validated"""
    path = _write(tmp_path, {"scenario": "egorov-quartic"})
    assert main(["run", path, "--out", str(tmp_path)]) == 2


def test_dirac_scenario_needs_codimension_two(tmp_path):
    """Dirac scenarios refuse q = 1"""
    path = _write(tmp_path, {"scenario": "dirac-adjoint", "geometry": {"p": 1, "q": 1}})
    assert main(["run", path, "--out", str(tmp_path)]) == 2


def test_three_leaf_dimensions_exit_2(tmp_path):
    """Leaf dimension is capped at two in configs"""
    path = _write(tmp_path, {"scenario": "geometry-checks", "geometry": {"p": 3, "q": 1}})
    assert main(["run", path, "--out", str(tmp_path)]) == 2


def test_complex_entries_as_pairs(tmp_path):
    """[re, im] pairs are accepted wherever a complex coefficient is expected"""
    path = _write(tmp_path, {"scenario": "egorov-scalar", "cutoff": 16, "scales": [4, 8], "symbol": {
        "terms": [{"leaf": [0], "source": [0], "transverse": [1], "coefficient": [0.5, -0.25]}]}})
    config = load_config(path)
    leaf, source, transverse, level, harmonic, coefficient = config.symbol.terms[0].as_tuple(1)
    assert coefficient[0, 0] == 0.5 - 0.25j


def test_geometry_run_writes_report(tmp_path):
    """A passing run exits 0 and records checksums of everything it wrote"""
    path = _write(tmp_path, GEOMETRY_CONFIG)
    assert main(["run", path, "--out", str(tmp_path / "out")]) == 0
    run_dir = tmp_path / "out" / "geometry-checks"
    report = json.loads((run_dir / "report.json").read_text())
    artifacts = json.loads((run_dir / "artifacts.json").read_text())
    assert report["passed"] is True
    assert report["scenario"] == "geometry-checks"
    assert all(check["passed"] for check in report["checks"])
    assert "total" in artifacts["timings"]
    for name, digest in artifacts["files"].items():
        assert sha256_file(run_dir / name) == digest
    assert (run_dir / "geometry.csv").exists()


def test_report_is_deterministic(tmp_path):
    """Same config and seed give byte-identical reports"""
    path = _write(tmp_path, GEOMETRY_CONFIG)
    assert main(["run", path, "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
    assert main(["run", path, "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
    first = (tmp_path / "a" / "geometry-checks" / "report.json").read_bytes()
    second = (tmp_path / "b" / "geometry-checks" / "report.json").read_bytes()
    assert first == second


def test_output_dir_from_environment(tmp_path, monkeypatch):
    """OUTPUT_DIR is used when --out is absent"""
    monkeypatch.setenv("OUTPUT_DIR", str(tmp_path / "env"))
    path = _write(tmp_path, GEOMETRY_CONFIG)
    assert main(["run", path]) == 0
    assert (tmp_path / "env" / "geometry-checks" / "report.json").exists()


def test_failed_invariant_exits_1(tmp_path):
    """An unreachable decay bound fails the run but still writes the report"""
    config = {
        "scenario": "egorov-scalar", "cutoff": 16, "scales": [4, 8], "leaf_cutoff": 0,
        "symbol": {"terms": [{"leaf": [0], "source": [0], "transverse": [1]}]},
        "tolerances": {"rho": 50.0},
    }
    path = _write(tmp_path, config)
    assert main(["run", path, "--out", str(tmp_path)]) == 1
    report = json.loads((tmp_path / "egorov-scalar" / "report.json").read_text())
    assert report["passed"] is False


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.json")))
def test_shipped_configs_validate(name):
    """Every bundled config loads"""
    config = load_config(CONFIGS / name)
    assert config.scenario in SCENARIOS


def test_run_experiment_returns_manifest(tmp_path):
    """The library entry point returns the manifest it wrote"""
    artifacts = run_experiment(_write(tmp_path, GEOMETRY_CONFIG), output_dir=str(tmp_path))
    assert artifacts.exit_code == 0
    assert "report.json" in artifacts.files
