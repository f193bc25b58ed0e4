import json

import numpy as np
import pytest

from tritier import cli
from tritier.catalog import Catalog, load_catalog, save_catalog

SMALL_CONFIG = {
    "plant": {"n_cells": 10, "domain_length": 2000.0},
    "scenario": {"inflow_series": [1.0] * 4, "price_series": [40.0, 60.0, 60.0, 40.0], "horizon": 600.0,
                 "step_time": 300.0, "step_size": 0.5, "level_bounds": [1.0, 3.0]},
    "latency": {"t1": 30.0, "t2": 300.0, "meso_compute": 45.0},
    "meso": {"pool_size": 2, "intervals": 3, "sqp_budget": 1, "horizon": 600.0},
    "catalog": {"n_scenarios": 2, "starts_per_scenario": 1, "intervals": 3, "sqp_budget": 2},
    "sensors": {"cells": [1, 4, 8]},
    "seed": 4,
    "output_dir": "out",
}


def write_config(tmp_path, **overrides):
    cfg = json.loads(json.dumps(SMALL_CONFIG))
    for section, values in overrides.items():
        cfg[section] = {**cfg[section], **values}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = write_config(root)
    assert cli.main(["offline-build", str(path)]) == cli.EXIT_OK
    return path, root / "out" / "catalog.jsonl"


class TestExitCodes:
    def test_missing_t1_names_field(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({**SMALL_CONFIG, "latency": {"t2": 300.0}}))
        assert cli.main(["offline-build", str(path)]) == cli.EXIT_CONFIG
        assert "latency.t1" in capsys.readouterr().err

    def test_unknown_field(self, tmp_path, capsys):
        path = write_config(tmp_path, plant={"n_cels": 10})
        assert cli.main(["offline-build", str(path)]) == cli.EXIT_CONFIG
        assert "n_cels" in capsys.readouterr().err

    def test_bad_arguments(self):
        assert cli.main(["run"]) == cli.EXIT_CONFIG

    def test_empty_build(self, tmp_path):
        path = write_config(tmp_path, catalog={"n_scenarios": 0})
        assert cli.main(["offline-build", str(path)]) == cli.EXIT_EMPTY_BUILD

    def test_corrupt_catalog(self, tmp_path, built):
        config, _ = built
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"version": 0\nnot json\n')
        assert cli.main(["run", str(config), "--catalog", str(bad)]) == cli.EXIT_CORRUPT

    def test_missing_catalog_is_infra(self, tmp_path, built):
        config, _ = built
        assert cli.main(["run", str(config), "--catalog", str(tmp_path / "absent.jsonl")]) == cli.EXIT_INFRA

    def test_empty_catalog_inspect(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        save_catalog(Catalog([], np.zeros(5), np.ones(5)), path)
        assert cli.main(["inspect", str(path), "--features", "1,0,50,10,2"]) == cli.EXIT_EMPTY_CATALOG

    def test_inspect_wrong_feature_count(self, built):
        _, catalog = built
        assert cli.main(["inspect", str(catalog), "--features", "1,2"]) == cli.EXIT_CONFIG


class TestCommands:
    def test_build_writes_catalog(self, built):
        _, catalog = built
        assert len(load_catalog(catalog)) == 2

    def test_inspect_at_entry(self, built, capsys):
        _, catalog = built
        entry = load_catalog(catalog).entries[0]
        feats = ",".join(repr(float(v)) for v in entry.scenario_features)
        capsys.readouterr()
        assert cli.main(["inspect", str(catalog), "--features", feats, "-k", "2"]) == cli.EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["neighbors"][0]["id"] == entry.id
        assert out["neighbors"][0]["distance"] == 0.0
        assert len(out["neighbors"]) == 2
        assert 0.0 < out["success_prob"] < 1.0

    def test_run_outputs(self, built, capsys):
        config, catalog = built
        assert cli.main(["run", str(config), "--catalog", str(catalog)]) == cli.EXIT_OK
        out_dir = catalog.parent
        rows = (out_dir / "run_seed4_decisions.csv").read_text().splitlines()
        assert rows[0] == "t,mode,control,qp_iters,plan_id,est_err"
        assert len(rows) == 1 + 20
        head = json.loads((out_dir / "run_seed4.log").read_text().splitlines()[0])
        assert head["seed"] == 4
        summary = json.loads(capsys.readouterr().out.splitlines()[-1])
        assert summary["failed"] is False

    def test_compare(self, built, capsys):
        config, catalog = built
        assert cli.main(["compare", str(config), "--catalog", str(catalog), "--seeds", "1,2"]) == cli.EXIT_OK
        report = json.loads((catalog.parent / "comparison.json").read_text())
        assert report["seeds"] == [1, 2]
        assert len(report["runs"]) == 8

    def test_compare_no_seeds(self, built):
        config, catalog = built
        assert cli.main(["compare", str(config), "--catalog", str(catalog), "--seeds", ","]) == cli.EXIT_CONFIG
