import csv
import io
import json

import numpy as np
import pytest

from berlab import cli, harness
from berlab.datasets import DatasetMissingError
from berlab.harness import ConfigError, ExperimentConfig, RunRecord, SweepResult

from test_datasets import write_mnist


def stub_record(ber, repeat, accs, losses=None):
    cfg = harness._training_key(ExperimentConfig(ber=ber, epochs=len(accs)))
    losses = losses or [1.0 / (e + 1) for e in range(len(accs))]
    return RunRecord(cfg, repeat, repeat, list(losses), list(accs), 0.0)


def stub_runner(calls=None, fail=None):
    def run(cfg, r):
        if calls is not None:
            calls.append((cfg.ber, r))
        if fail == (cfg.ber, r):
            raise FloatingPointError("diverged")
        accs = [round(0.5 + 0.1 * e + 0.01 * r - cfg.ber, 6) for e in range(cfg.epochs)]
        return stub_record(cfg.ber, r, accs)
    return run


@pytest.fixture
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_mnist(root / "mnist", n_train=120, n_test=40, seed=3)
    return root


def tiny_cfg(root, out, **kw):
    base = dict(data_root=str(root), out_dir=str(out), epochs=2, batch_size=20, width_scale=0.125,
                repeats=1, bers=(0.0, 0.1))
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentConfig.from_dict({"epoch": 3})

    @pytest.mark.parametrize("bad", [{"ber": 0.6}, {"ber": -0.1}, {"repeats": 0}, {"epochs": 0},
                                     {"model": "vgg"}, {"bers": [0.0, 0.7]}, {"batch_size": 1},
                                     {"classes": [1, 2], "subset_k": 2}, {"lr_decay": 1.5}])
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    def test_ber_bounds_inclusive(self):
        ExperimentConfig(ber=0.5)
        ExperimentConfig(ber=0.0)

    def test_load_flat_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"epochs": 3, "bers": [0, 0.04], "classes": [1, 3]}))
        cfg = ExperimentConfig.load(p)
        assert cfg.epochs == 3 and cfg.bers == (0, 0.04) and cfg.classes == (1, 3)
        p.write_text(json.dumps({"optimizer": {"lr": 1}}))
        with pytest.raises(ConfigError):
            ExperimentConfig.load(p)
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(p)

    def test_round_trip_and_seed_rule(self):
        cfg = ExperimentConfig(seed=11, classes=(0, 5))
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
        assert [cfg.run_seed(r) for r in range(3)] == [11, 12, 13]


class TestAggregates:
    def test_top1max_hand_computed(self):
        recs = [stub_record(0.0, 0, [0.90, 0.95, 0.93]),
                stub_record(0.0, 1, [0.91, 0.92, 0.96]),
                stub_record(0.0, 2, [0.97, 0.94, 0.95])]
        assert harness.top1max(recs) == pytest.approx((0.95 + 0.96 + 0.97) / 3)
        result = SweepResult({0.0: recs})
        assert result.top1max(0.0) == pytest.approx(0.96)
        np.testing.assert_allclose(result.mean_curve(0.0), [0.9266666667, 0.9366666667, 0.9466666667])

    def test_run_csv_cardinality(self, tmp_path):
        result = harness.run_sweep(ExperimentConfig(out_dir=str(tmp_path), repeats=2, epochs=3),
                                   [0.0, 0.04], runner=stub_runner())
        path = harness.emit_csv(result, tmp_path / "runs.csv")
        rows = list(csv.DictReader(path.open()))
        assert len(rows) == 12
        assert list(rows[0]) == list(harness.RUN_COLUMNS)

    def test_std_zero_for_single_repeat(self, tmp_path):
        result = harness.run_sweep(ExperimentConfig(out_dir=str(tmp_path), repeats=1, epochs=3),
                                   [0.0, 0.02], runner=stub_runner())
        rows = list(csv.DictReader(io.StringIO(harness.aggregate_csv(result))))
        assert len(rows) == 6
        assert all(float(r["std_acc"]) == 0.0 and r["n"] == "1" for r in rows)

    def test_aggregate_recomputed_from_raw_rows(self, tmp_path):
        result = harness.run_sweep(ExperimentConfig(out_dir=str(tmp_path), repeats=3, epochs=4),
                                   [0.0, 0.16], runner=stub_runner())
        raw = list(csv.DictReader(io.StringIO(harness.runs_csv(result))))
        agg = list(csv.DictReader(io.StringIO(harness.aggregate_csv(result))))
        for row in agg:
            vals = [float(r["test_acc"]) for r in raw if r["ber"] == row["ber"] and r["epoch"] == row["epoch"]]
            assert float(row["mean_acc"]) == pytest.approx(sum(vals) / len(vals), abs=1e-15)
            assert float(row["std_acc"]) == pytest.approx(np.std(vals), abs=1e-15)
            assert int(row["n"]) == len(vals)

    def test_resilience_threshold(self):
        result = SweepResult({
            0.0: [stub_record(0.0, 0, [0.90])],
            0.02: [stub_record(0.02, 0, [0.895])],
            0.04: [stub_record(0.04, 0, [0.85])],
        })
        assert harness.resilience_threshold(result, 0.01) == 0.02
        assert harness.resilience_threshold(result, 0.1) == 0.04

    def test_plot_data_has_traces_and_means(self, tmp_path):
        result = harness.run_sweep(ExperimentConfig(out_dir=str(tmp_path), repeats=2, epochs=2),
                                   [0.0], runner=stub_runner())
        data = json.loads(harness.emit_plot_data(result, tmp_path / "p.json").read_text())
        s = data["series"][0]
        assert len(s["traces"]) == 2 and len(s["mean_acc"]) == 2
        assert s["mean_acc"][0] == pytest.approx(np.mean([t["test_acc"][0] for t in s["traces"]]))

    def test_empty_result_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            harness.emit_csv(SweepResult(), tmp_path / "x.csv")


class TestSweepMechanics:
    def test_resume_recomputes_only_missing(self, tmp_path):
        cfg = ExperimentConfig(out_dir=str(tmp_path), repeats=2, epochs=2)
        calls = []
        harness.run_sweep(cfg, [0.0, 0.04], runner=stub_runner(calls))
        assert len(calls) == 4
        harness.record_path(tmp_path, 0.04, 1).unlink()
        calls.clear()
        result = harness.run_sweep(cfg, [0.0, 0.04], runner=stub_runner(calls))
        assert calls == [(0.04, 1)]
        assert len(result.records[0.04]) == 2

    def test_stale_records_are_recomputed(self, tmp_path):
        calls = []
        harness.run_sweep(ExperimentConfig(out_dir=str(tmp_path), repeats=1, epochs=2), [0.0],
                          runner=stub_runner(calls))
        harness.run_sweep(ExperimentConfig(out_dir=str(tmp_path), repeats=1, epochs=3), [0.0],
                          runner=stub_runner(calls))
        assert len(calls) == 2

    def test_failure_recorded_and_sweep_continues(self, tmp_path):
        cfg = ExperimentConfig(out_dir=str(tmp_path), repeats=2, epochs=2)
        result = harness.run_sweep(cfg, [0.0, 0.04], runner=stub_runner(fail=(0.04, 0)))
        assert [(f.ber, f.repeat) for f in result.failures] == [(0.04, 0)]
        assert "diverged" in result.failures[0].error
        assert len(result.records[0.0]) == 2 and len(result.records[0.04]) == 1

    def test_invalid_ber_list(self, tmp_path):
        with pytest.raises(ConfigError):
            harness.run_sweep(ExperimentConfig(out_dir=str(tmp_path)), [0.0, 0.9], runner=stub_runner())


class TestAtomicWrites:
    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        result = SweepResult({0.0: [stub_record(0.0, 0, [0.5])]})
        with pytest.raises(OSError):
            harness.emit_csv(result, blocker / "out.csv")
        assert blocker.read_text() == "x"

    def test_no_partial_file_on_failure(self, tmp_path, monkeypatch):
        def boom(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr(harness.os, "replace", boom)
        result = SweepResult({0.0: [stub_record(0.0, 0, [0.5])]})
        with pytest.raises(OSError):
            harness.emit_csv(result, tmp_path / "out.csv")
        assert list(tmp_path.iterdir()) == []


class TestTraining:
    def test_missing_dataset_fails_before_compute(self, tmp_path):
        with pytest.raises(DatasetMissingError):
            harness.run_training(tiny_cfg(tmp_path / "nowhere", tmp_path))

    def test_record_shape_and_determinism(self, synthetic_root, tmp_path):
        cfg = tiny_cfg(synthetic_root, tmp_path, ber=0.1)
        a = harness.run_training(cfg, 1)
        b = harness.run_training(cfg, 1)
        assert len(a.test_acc) == len(a.train_loss) == 2
        assert all(0.0 <= v <= 1.0 for v in a.test_acc)
        assert a.seed == cfg.seed + 1
        assert (a.test_acc, a.train_loss) == (b.test_acc, b.train_loss)
        c = harness.run_training(cfg, 2)
        assert c.train_loss != a.train_loss

    def test_sweep_outputs_byte_identical(self, synthetic_root, tmp_path):
        outs = []
        for name in ("a", "b"):
            cfg = tiny_cfg(synthetic_root, tmp_path / name, repeats=2)
            harness.emit_sweep_outputs(harness.run_sweep(cfg), cfg.out_dir)
            outs.append([(tmp_path / name / f).read_bytes() for f in ("runs.csv", "aggregate.csv", "plot_data.json")])
        assert outs[0] == outs[1]

    def test_class_subset(self, synthetic_root, tmp_path):
        cfg = tiny_cfg(synthetic_root, tmp_path, classes=(1, 3, 5), epochs=1)
        train, test = harness.prepare_data(cfg)
        assert train.num_classes == 3 and set(np.unique(train.labels)) <= {0, 1, 2}
        rec = harness.run_training(cfg)
        assert len(rec.test_acc) == 1


class TestMramReport:
    def test_files(self, tmp_path):
        paths = harness.mram_report(out_dir=tmp_path)
        table = paths["table"].read_text().splitlines()
        assert len(table) == 6
        curves = list(csv.DictReader(paths["curves"].open()))
        assert {r["wer_target"] for r in curves} == {"0.1", "0.01", "1e-06"}
        assert "unattainable" in {r["v_volts"] for r in curves}
        first = {k: p.read_bytes() for k, p in paths.items()}
        again = harness.mram_report(out_dir=tmp_path)
        assert {k: p.read_bytes() for k, p in again.items()} == first


class TestCli:
    def test_mram_report(self, tmp_path, capsys):
        assert cli.main(["mram-report", "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "table1.csv").exists()
        assert "error_resilient" in capsys.readouterr().out

    def test_config_error_exit_code(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"bogus": 1}))
        assert cli.main(["train", "--config", str(p)]) == 1
        assert cli.main(["train", "--ber", "0.7", "--out-dir", str(tmp_path)]) == 1
        with pytest.raises(SystemExit) as e:
            cli.main(["train", "--no-such-flag"])
        assert e.value.code == 1

    def test_mram_bad_params_exit_code(self, tmp_path):
        assert cli.main(["mram-report", "--v-c0", "2.0", "--out-dir", str(tmp_path)]) == 1

    def test_data_error_exit_code(self, tmp_path):
        assert cli.main(["train", "--data-root", str(tmp_path), "--out-dir", str(tmp_path)]) == 2

    def test_train_sweep_and_emit(self, synthetic_root, tmp_path):
        args = ["--data-root", str(synthetic_root), "--epochs", "1", "--batch-size", "20",
                "--width-scale", "0.125", "--repeats", "1", "--bers", "0,0.1"]
        assert cli.main(["train", "--out-dir", str(tmp_path / "t"), *args]) == 0
        assert (tmp_path / "t" / "runs.csv").exists()
        assert cli.main(["sweep", "--out-dir", str(tmp_path / "s"), *args]) == 0
        agg = (tmp_path / "s" / "aggregate.csv").read_bytes()
        (tmp_path / "s" / "aggregate.csv").unlink()
        assert cli.main(["emit-plots", "--out-dir", str(tmp_path / "s"), *args]) == 0
        assert (tmp_path / "s" / "aggregate.csv").read_bytes() == agg
        assert cli.main(["emit-plots", "--out-dir", str(tmp_path / "empty"), *args]) == 2
