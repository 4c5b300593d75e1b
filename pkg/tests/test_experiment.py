import csv
import json
import math
import statistics

import numpy as np
import pytest

from fedgmm.cli import main
from fedgmm.evaluation import Method
from fedgmm.experiment import (
    CellResult,
    DatasetConfig,
    ExperimentConfig,
    ExperimentResult,
    audit_split,
    derive_seed,
    emit_results,
    per_repeat_table,
    run_scenario,
    splitmix64,
    write_manifest,
)
from fedgmm.gmm import InvalidInputError
from fedgmm.io import load_model


def small_config(**over):
    base = dict(
        dataset=DatasetConfig(synthetic={"m_classes": 3, "d": 2, "n": 1200, "separation": 1.0}),
        scenario="alpha",
        sweep=(0.3, 1.0),
        n_clients=4,
        k=3,
        methods=("FedGenGMM", "DemInit3", "LocalModels", "Benchmark"),
        h=30,
        repeats=3,
        seed_base=7,
    )
    base.update(over)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def small_result():
    return run_scenario(small_config())


class TestSeeds:
    def test_splitmix64_reference(self):
        # first output of the reference splitmix64 generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_derive_seed(self):
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
        assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)
        assert derive_seed(0) == splitmix64(0)
        assert derive_seed(5, 9) == splitmix64(splitmix64(5) ^ 9)
        assert 0 <= derive_seed(-1, -1) < 2**64


class TestConfig:
    def test_empty_sweep_rejected(self):
        with pytest.raises(InvalidInputError):
            small_config(sweep=())

    def test_unknown_scenario(self):
        with pytest.raises(InvalidInputError):
            small_config(scenario="depth")

    def test_dataset_source_exclusive(self):
        with pytest.raises(InvalidInputError):
            DatasetConfig()

    def test_json_round_trip(self, tmp_path):
        cfg = small_config()
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert ExperimentConfig.from_json(path) == cfg


class TestScenario:
    def test_row_count(self, small_result, tmp_path):
        emit_results(small_result, tmp_path / "r.csv")
        with open(tmp_path / "r.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4 * 2 * 3
        assert set(rows[0]) == {"method", "sweep_variable", "sweep_value", "metric", "mean", "std", "n_repeats"}

    def test_byte_identical_rerun(self, small_result, tmp_path):
        emit_results(small_result, tmp_path / "a.csv")
        emit_results(run_scenario(small_config()), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_workers_do_not_change_results(self, small_result, tmp_path):
        emit_results(small_result, tmp_path / "a.csv")
        emit_results(run_scenario(small_config(workers=2)), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_summary_recomputes_from_raw(self, small_result):
        raw = per_repeat_table(small_result)
        for row in small_result.summary():
            vals = [r[row["metric"]] for r in raw
                    if r["method"] == row["method"] and r["sweep_value"] == row["sweep_value"]]
            assert row["n_repeats"] == len(vals) == 3
            assert row["mean"] == pytest.approx(statistics.fmean(vals), abs=1e-12)
            assert row["std"] == pytest.approx(statistics.stdev(vals), abs=1e-12)

    def test_round_counts(self, small_result):
        for cell in small_result.cells:
            assert cell.records[Method.FEDGENGMM].rounds == 1
            assert cell.records[Method.BENCHMARK].rounds == 0
            assert cell.records[Method.DEM_INIT3].rounds >= 3

    def test_auc_in_range(self, small_result):
        for row in small_result.summary():
            if row["metric"] == "auc_pr":
                assert 0.0 <= row["mean"] <= 1.0

    def test_clients_scenario(self):
        result = run_scenario(small_config(scenario="clients", sweep=(2, 5), repeats=1,
                                           methods=("FedGenGMM",)))
        assert [r["sweep_variable"] for r in result.summary()] == ["n_clients"] * 6


def test_failed_cells_are_excluded(tmp_path):
    cfg = small_config(methods=("Benchmark",), repeats=2, sweep=(0.5,))
    ok = run_scenario(cfg).cells[0]
    failed = CellResult(0, 1, {Method.BENCHMARK: None}, {Method.BENCHMARK: "RuntimeError: boom"})
    result = ExperimentResult(cfg, [ok, failed])
    rows = {r["metric"]: r for r in result.summary()}
    assert rows["gamma"]["n_repeats"] == 1 and rows["gamma"]["std"] == 0.0
    assert rows["gamma"]["mean"] == ok.records[Method.BENCHMARK].gamma
    write_manifest(result, tmp_path / "m.json")
    manifest = json.loads((tmp_path / "m.json").read_text())
    assert manifest["failed_cells"] == [
        {"sweep_index": 0, "repeat": 1, "method": "Benchmark", "error": "RuntimeError: boom"}
    ]

    all_failed = ExperimentResult(cfg, [failed])
    assert all(math.isnan(r["mean"]) and r["n_repeats"] == 0 for r in all_failed.summary())


def test_split_audit():
    tr = np.array([0, 1, 2, 3])
    audit_split(tr, [np.array([0, 1]), np.array([2, 3])], [np.array([4, 5])])
    with pytest.raises(AssertionError):
        audit_split(tr, [np.array([0, 3])], [np.array([3, 9])])


class TestCli:
    def run(self, *argv):
        assert main([str(a) for a in argv]) == 0

    def test_pipeline(self, tmp_path, capsys):
        data, part = tmp_path / "d.csv", tmp_path / "p.csv"
        self.run("gen-data", "--classes", 3, "--dim", 2, "--n", 900, "--seed", 1, "--out", data)
        self.run("partition", "--data", data, "--alpha", 0.5, "--clients", 4, "--out", part)
        self.run("train-local", "--data", data, "--partition", part, "--k-min", 1, "--k-max", 3,
                 "--out", tmp_path / "local")
        assert len(list((tmp_path / "local").glob("*.fgmm"))) == 4
        capsys.readouterr()

        self.run("aggregate", tmp_path / "local", "--k-min", 3, "--h", 50, "--out", tmp_path / "g.fgmm")
        summary = json.loads(capsys.readouterr().out)
        assert summary["client_to_server_rounds"] == 1 and summary["clients"] == 4
        model, n_total = load_model(tmp_path / "g.fgmm")
        assert n_total == 900 and model.n_components == 3

        self.run("dem", "--data", data, "--partition", part, "--k", 3, "--out", tmp_path / "dem.fgmm")
        assert json.loads(capsys.readouterr().out)["rounds"] >= 3

        self.run("benchmark", "--data", data, "--k-min", 1, "--k-max", 4, "--out", tmp_path / "b.fgmm")
        assert json.loads(capsys.readouterr().out)["selected_k"] == 3

        self.run("evaluate", "--model", tmp_path / "g.fgmm", "--data", data, "--ignore", "label")
        gamma = json.loads(capsys.readouterr().out)["gamma"]
        assert math.isfinite(gamma)

    def test_evaluate_with_anomaly_column(self, tmp_path, capsys):
        data = tmp_path / "d.csv"
        self.run("gen-data", "--classes", 1, "--dim", 2, "--n", 200, "--out", data)
        self.run("benchmark", "--data", data, "--out", tmp_path / "b.fgmm")
        rows = np.loadtxt(data, delimiter=",", skiprows=1)[:, :2]
        flagged = np.vstack([rows[:90], rows[:10] + 3.0])
        labels = np.r_[np.zeros(90), np.ones(10)].astype(int)
        with open(tmp_path / "t.csv", "w") as fh:
            fh.write("f0,f1,is_anomaly\n")
            for r, y in zip(flagged, labels):
                fh.write(f"{float(r[0])!r},{float(r[1])!r},{y}\n")
        capsys.readouterr()
        self.run("evaluate", "--model", tmp_path / "b.fgmm", "--data", tmp_path / "t.csv",
                 "--anomaly-column", "is_anomaly")
        assert json.loads(capsys.readouterr().out)["auc_pr"] == 1.0

    def test_experiment(self, tmp_path):
        cfg = small_config(repeats=1, sweep=(0.5,), methods=("FedGenGMM", "Benchmark"))
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        self.run("experiment", "--config", tmp_path / "c.json", "--out", tmp_path / "r.csv")
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 1 + 2 * 3
        manifest = json.loads((tmp_path / "r.manifest.json").read_text())
        assert manifest["config"]["seed_base"] == 7 and manifest["failed_cells"] == []

    def test_bad_input_exit_code(self, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("a,label\n1,0\nzz,1\n")
        assert main(["benchmark", "--data", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "x")]) == 2
        err = capsys.readouterr().err
        assert "zz" in err and "row 3" in err
