import json
import os

import numpy as np
import pytest

from marginnce import metrics
from marginnce.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from marginnce.config import RunConfig, config_hash, load_run_config, resolve_open_set
from marginnce.numerics import ConfigError


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


TINY = {
    "synth": {"num_classes": 4, "latent_dim": 12, "grid_h": 4, "grid_w": 4,
              "samples_per_class": 4, "faulty_positive_rate": 0.25,
              "feature_noise_std": 0.2, "seed": 5},
    "train": {"epochs": 2, "batch_size": 8, "embed_dim": 8, "seed": 5},
    "margins": [0.0, -0.2],
    "seeds": [0, 1],
    "test_samples_per_class": 2,
}


def read_no_comments(path):
    with open(path) as fh:
        return "".join(ln for ln in fh if not ln.startswith("#"))


class TestRunConfig:
    def test_defaults_validate(self):
        RunConfig().validate()

    def test_default_margin_grid_and_paper_margin(self):
        cfg = RunConfig()
        assert cfg.margins == (0.2, 0.0, -0.1, -0.2, -0.3, -0.4)
        assert cfg.train.loss.margin == -0.2
        assert cfg.train.loss.tau == 0.07
        assert cfg.train.loss.pool.epsilon == 0.65
        assert cfg.train.loss.pool.beta == 0.03
        assert cfg.train.epochs == 20
        assert cfg.train.optimizer == "adam"

    def test_roundtrip(self):
        cfg = RunConfig.from_dict(TINY)
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_top_level_field(self):
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig.from_dict({"bogus": 1})

    def test_missing_required_nested_value_message(self):
        with pytest.raises(ConfigError, match="synth.num_classes"):
            RunConfig.from_dict({"synth": {"num_classes": 1}})

    def test_hash_tracks_content(self):
        a = config_hash(RunConfig())
        b = config_hash(RunConfig.from_dict({"train": {"epochs": 3}}))
        assert a != b
        assert a == config_hash(RunConfig())

    def test_open_set_default_split(self):
        cfg = RunConfig.from_dict({"synth": {"num_classes": 6}})
        heard, unheard = resolve_open_set(cfg)
        assert heard == (0, 1, 2) and unheard == (3, 4, 5)

    def test_open_set_must_come_in_pairs(self):
        with pytest.raises(ConfigError, match="together"):
            RunConfig.from_dict({"heard_classes": [0, 1]})

    def test_load_missing_file_is_oserror(self, tmp_path):
        with pytest.raises(OSError):
            load_run_config(str(tmp_path / "nope.json"))

    def test_load_bad_json_is_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(str(path))


class TestPrintConfig:
    def test_print_config_outputs_resolved_defaults(self, capsys):
        assert main(["print-config"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc["train"]["loss"]["margin"] == -0.2
        assert doc["synth"]["num_classes"] == 10

    def test_print_config_flag_short_circuits(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, TINY)
        out = str(tmp_path / "out")
        rc = main(["gen-data", "--config", cfg_path, "--out", out, "--print-config"])
        assert rc == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc["synth"]["num_classes"] == 4
        assert not os.path.exists(os.path.join(out, "dataset.npz"))

    def test_seed_flag_overrides_both_seeds(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, TINY)
        assert main(["print-config", "--config", cfg_path, "--seed", "99"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc["synth"]["seed"] == 99 and doc["train"]["seed"] == 99


class TestGenData:
    def test_writes_files_and_summary(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, TINY)
        out = str(tmp_path / "out")
        assert main(["gen-data", "--config", cfg_path, "--out", out]) == EXIT_OK
        text = capsys.readouterr().out
        assert os.path.exists(os.path.join(out, "dataset.npz"))
        assert os.path.exists(os.path.join(out, "annotations_test.json"))
        assert "corruption fraction" in text
        frac = float(text.split("corruption fraction:")[1].split()[0])
        n_train = 4 * 4
        sigma = np.sqrt(0.25 * 0.75 / n_train)
        assert abs(frac - 0.25) <= max(3 * sigma, 0.3)

    def test_deterministic_file_bytes(self, tmp_path):
        cfg_path = write_config(tmp_path, TINY)
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["gen-data", "--config", cfg_path, "--out", out1]) == EXIT_OK
        assert main(["gen-data", "--config", cfg_path, "--out", out2]) == EXIT_OK
        for name in ("dataset.npz", "annotations_test.json"):
            b1 = open(os.path.join(out1, name), "rb").read()
            b2 = open(os.path.join(out2, name), "rb").read()
            assert b1 == b2

    def test_missing_field_exits_2_with_field_name(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, {"synth": {"latent_dim": "wide"}})
        assert main(["gen-data", "--config", cfg_path]) == EXIT_CONFIG
        assert "synth.latent_dim" in capsys.readouterr().err

    def test_open_set_split_files(self, tmp_path):
        doc = dict(TINY)
        doc["heard_classes"] = [0, 1]
        doc["unheard_classes"] = [2, 3]
        cfg_path = write_config(tmp_path, doc)
        out = str(tmp_path / "out")
        assert main(["gen-data", "--config", cfg_path, "--out", out]) == EXIT_OK
        assert os.path.exists(os.path.join(out, "annotations_heard_test.json"))
        assert os.path.exists(os.path.join(out, "annotations_unheard_test.json"))


class TestTrainCommand:
    def test_train_writes_outputs(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, TINY)
        out = str(tmp_path / "out")
        assert main(["train", "--config", cfg_path, "--out", out]) == EXIT_OK
        for name in ("checkpoint.npz", "loss_history.csv", "eval_report.csv"):
            assert os.path.exists(os.path.join(out, name))
        report = open(os.path.join(out, "eval_report.csv")).read()
        assert "-0.2" in report  # the configured margin is recorded
        history = read_no_comments(os.path.join(out, "loss_history.csv"))
        assert history.count("\n") == 1 + TINY["train"]["epochs"]

    def test_epochs_zero_eval_only(self, tmp_path):
        doc = dict(TINY)
        doc["train"] = dict(TINY["train"], epochs=0)
        cfg_path = write_config(tmp_path, doc)
        out = str(tmp_path / "out")
        assert main(["train", "--config", cfg_path, "--out", out]) == EXIT_OK
        assert os.path.exists(os.path.join(out, "eval_report.csv"))
        history = read_no_comments(os.path.join(out, "loss_history.csv"))
        assert history.strip() == "epoch,mean_loss"

    def test_resume_matches_single_run(self, tmp_path):
        doc_full = dict(TINY)
        doc_full["train"] = dict(TINY["train"], epochs=4)
        doc_half = dict(TINY)
        doc_half["train"] = dict(TINY["train"], epochs=2)

        out_full = str(tmp_path / "full")
        assert main(["train", "--config", write_config(tmp_path, doc_full, "f.json"),
                     "--out", out_full]) == EXIT_OK

        out_resume = str(tmp_path / "resume")
        assert main(["train", "--config", write_config(tmp_path, doc_half, "h.json"),
                     "--out", out_resume]) == EXIT_OK
        assert main(["train", "--config", write_config(tmp_path, doc_full, "f2.json"),
                     "--out", out_resume, "--resume"]) == EXIT_OK

        a = read_no_comments(os.path.join(out_full, "loss_history.csv"))
        b = read_no_comments(os.path.join(out_resume, "loss_history.csv"))
        assert a == b
        ra = read_no_comments(os.path.join(out_full, "eval_report.csv"))
        rb = read_no_comments(os.path.join(out_resume, "eval_report.csv"))
        assert ra == rb

    def test_reuses_generated_dataset(self, tmp_path):
        cfg_path = write_config(tmp_path, TINY)
        out = str(tmp_path / "out")
        assert main(["gen-data", "--config", cfg_path, "--out", out]) == EXIT_OK
        stamp = os.path.getmtime(os.path.join(out, "dataset.npz"))
        assert main(["train", "--config", cfg_path, "--out", out]) == EXIT_OK
        assert os.path.getmtime(os.path.join(out, "dataset.npz")) == stamp

    def test_dataset_config_mismatch_rejected(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, TINY)
        out = str(tmp_path / "out")
        assert main(["gen-data", "--config", cfg_path, "--out", out]) == EXIT_OK
        other = dict(TINY)
        other["synth"] = dict(TINY["synth"], feature_noise_std=0.4)
        other_path = write_config(tmp_path, other, "other.json")
        assert main(["train", "--config", other_path, "--out", out]) == EXIT_CONFIG
        assert "different synth config" in capsys.readouterr().err

    def test_nan_loss_exits_3_with_location(self, tmp_path, capsys):
        doc = dict(TINY)
        doc["train"] = dict(TINY["train"], optimizer="sgd", learning_rate=1e120,
                            normalize_output=False, epochs=4, batch_size=4)
        cfg_path = write_config(tmp_path, doc)
        assert main(["train", "--config", cfg_path,
                     "--out", str(tmp_path / "out")]) == EXIT_NUMERIC
        err = capsys.readouterr().err
        assert "epoch" in err and "batch" in err


class TestSweepCommand:
    def test_sweep_rows_and_idempotent_rerun(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, TINY)
        out = str(tmp_path / "out")
        assert main(["sweep", "--config", cfg_path, "--out", out]) == EXIT_OK
        report_path = os.path.join(out, "sweep_report.csv")
        first = open(report_path).read()
        body = [ln for ln in first.splitlines() if ln and not ln.startswith("#")]
        # 2 margins x 2 seeds rows + run header + aggregate header + 2 aggregates
        assert len(body) == 1 + 4 + 1 + 2
        out_text = capsys.readouterr().out
        assert "4 run(s) executed" in out_text

        assert main(["sweep", "--config", cfg_path, "--out", out]) == EXIT_OK
        assert open(report_path).read() == first
        assert "0 run(s) executed, 4 reused" in capsys.readouterr().out

    def test_margins_flag_overrides(self, tmp_path):
        cfg_path = write_config(tmp_path, TINY)
        out = str(tmp_path / "out")
        assert main(["sweep", "--config", cfg_path, "--out", out,
                     "--margins", "0.1"]) == EXIT_OK
        report = open(os.path.join(out, "sweep_report.csv")).read()
        assert "0.1" in report
        assert "-0.2" not in report

    def test_bad_margins_flag(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, TINY)
        assert main(["sweep", "--config", cfg_path, "--out", str(tmp_path / "o"),
                     "--margins", "a,b"]) == EXIT_CONFIG

    def test_partial_markers_resume(self, tmp_path):
        cfg_path = write_config(tmp_path, TINY)
        out = str(tmp_path / "out")
        assert main(["sweep", "--config", cfg_path, "--out", out]) == EXIT_OK
        report = open(os.path.join(out, "sweep_report.csv")).read()
        markers = sorted(os.listdir(os.path.join(out, "runs")))
        os.unlink(os.path.join(out, "runs", markers[0]))
        assert main(["sweep", "--config", cfg_path, "--out", out]) == EXIT_OK
        assert open(os.path.join(out, "sweep_report.csv")).read() == report

    def test_plot_data_emitted(self, tmp_path):
        cfg_path = write_config(tmp_path, TINY)
        out = str(tmp_path / "out")
        assert main(["sweep", "--config", cfg_path, "--out", out]) == EXIT_OK
        plot = open(os.path.join(out, "sweep_plot_data.csv")).read()
        assert "retrieval_mean" in plot
        assert "# config_sha256:" in plot

    def test_threads_give_identical_report(self, tmp_path):
        cfg_path = write_config(tmp_path, TINY)
        out1, out2 = str(tmp_path / "serial"), str(tmp_path / "par")
        assert main(["sweep", "--config", cfg_path, "--out", out1]) == EXIT_OK
        assert main(["sweep", "--config", cfg_path, "--out", out2,
                     "--threads", "2"]) == EXIT_OK
        a = open(os.path.join(out1, "sweep_report.csv")).read()
        b = open(os.path.join(out2, "sweep_report.csv")).read()
        assert a == b


class TestOpenSetCommand:
    def test_reports_written(self, tmp_path):
        doc = dict(TINY)
        doc["heard_classes"] = [0, 1]
        doc["unheard_classes"] = [2, 3]
        doc["margins"] = [-0.2, 0.0]
        doc["seeds"] = [0]
        cfg_path = write_config(tmp_path, doc)
        out = str(tmp_path / "out")
        assert main(["open-set", "--config", cfg_path, "--out", out]) == EXIT_OK
        for name in ("openset_heard_report.csv", "openset_unheard_report.csv"):
            text = open(os.path.join(out, name)).read()
            body = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
            assert len(body) == 1 + 2 + 1 + 2

    def test_rerun_identical(self, tmp_path):
        doc = dict(TINY)
        doc["heard_classes"] = [0, 1]
        doc["unheard_classes"] = [2, 3]
        doc["seeds"] = [0]
        cfg_path = write_config(tmp_path, doc)
        out = str(tmp_path / "out")
        assert main(["open-set", "--config", cfg_path, "--out", out]) == EXIT_OK
        first = open(os.path.join(out, "openset_unheard_report.csv")).read()
        assert main(["open-set", "--config", cfg_path, "--out", out]) == EXIT_OK
        assert open(os.path.join(out, "openset_unheard_report.csv")).read() == first


class TestEvalMapsCommand:
    def make_fixture(self, tmp_path):
        # boxes cover at least half the frame so the default median rule
        # binarizes a GT-shaped prediction back onto its own support
        shape = (4, 4)
        boxes = {
            "s0": [(0.0, 0.0, 1.0, 0.5)],
            "s1": [(0.0, 0.0, 0.5, 1.0)],
            "s2": [(0.0, 0.0, 1.0, 0.75)],
        }
        anno_path = str(tmp_path / "annos.json")
        metrics.save_annotations(anno_path, shape, boxes)
        preds = {}
        for sid, bxs in boxes.items():
            preds[sid] = metrics.consensus_from_boxes(bxs, shape).weights
        pred_path = str(tmp_path / "preds.json")
        metrics.save_predictions(pred_path, preds)
        return anno_path, pred_path, boxes, shape

    def test_perfect_predictions(self, tmp_path, capsys):
        anno_path, pred_path, _, _ = self.make_fixture(tmp_path)
        out = str(tmp_path / "out")
        assert main(["eval-maps", "--predictions", pred_path,
                     "--annotations", anno_path, "--out", out]) == EXIT_OK
        rows, summary = metrics.read_metrics_report(
            os.path.join(out, "metrics_report.csv"))
        assert summary["ciou_at_0.5_percent"] == 100.0
        assert all(v == 1.0 for _, v in rows)
        # all-ones success curve integrates to exactly 1
        assert summary["auc_percent"] == 100.0

    def test_matches_module_oracle(self, tmp_path):
        anno_path, pred_path, boxes, shape = self.make_fixture(tmp_path)
        # degrade one prediction so values are non-trivial
        preds = metrics.load_predictions(pred_path)
        preds["s0"] = np.roll(preds["s0"], 1, axis=1)
        metrics.save_predictions(pred_path, preds)
        out = str(tmp_path / "out")
        assert main(["eval-maps", "--predictions", pred_path,
                     "--annotations", anno_path, "--out", out]) == EXIT_OK
        rows, summary = metrics.read_metrics_report(
            os.path.join(out, "metrics_report.csv"))
        expect_rows, expect_summary = metrics.evaluate_batch(
            preds, boxes, shape, metrics.EvalConfig())
        assert rows == [(sid, v) for sid, v in expect_rows]
        assert summary == expect_summary

    def test_shuffled_prediction_file_same_output(self, tmp_path):
        anno_path, pred_path, _, _ = self.make_fixture(tmp_path)
        out1 = str(tmp_path / "o1")
        assert main(["eval-maps", "--predictions", pred_path,
                     "--annotations", anno_path, "--out", out1]) == EXIT_OK
        # rewrite the predictions file with reversed sample order
        doc = json.load(open(pred_path))
        doc["samples"] = list(reversed(doc["samples"]))
        shuffled = str(tmp_path / "shuffled.json")
        open(shuffled, "w").write(json.dumps(doc))
        out2 = str(tmp_path / "o2")
        assert main(["eval-maps", "--predictions", shuffled,
                     "--annotations", anno_path, "--out", out2]) == EXIT_OK
        a = open(os.path.join(out1, "metrics_report.csv")).read()
        b = open(os.path.join(out2, "metrics_report.csv")).read()
        assert a == b

    def test_id_mismatch_exits_4_listing_ids(self, tmp_path, capsys):
        anno_path, pred_path, _, _ = self.make_fixture(tmp_path)
        preds = metrics.load_predictions(pred_path)
        del preds["s1"]
        metrics.save_predictions(pred_path, preds)
        assert main(["eval-maps", "--predictions", pred_path,
                     "--annotations", anno_path,
                     "--out", str(tmp_path / "out")]) == EXIT_IO
        assert "s1" in capsys.readouterr().err

    def test_missing_file_exits_4(self, tmp_path, capsys):
        assert main(["eval-maps", "--predictions", str(tmp_path / "nope.json"),
                     "--annotations", str(tmp_path / "also_nope.json"),
                     "--out", str(tmp_path / "out")]) == EXIT_IO

    def test_absolute_threshold_flag(self, tmp_path):
        anno_path, pred_path, boxes, shape = self.make_fixture(tmp_path)
        out = str(tmp_path / "out")
        assert main(["eval-maps", "--predictions", pred_path,
                     "--annotations", anno_path, "--out", out,
                     "--absolute-threshold", "0.5"]) == EXIT_OK
        rows, _ = metrics.read_metrics_report(os.path.join(out, "metrics_report.csv"))
        cfg = metrics.EvalConfig(threshold_rule="absolute", absolute_threshold=0.5)
        preds = metrics.load_predictions(pred_path)
        expect_rows, _ = metrics.evaluate_batch(preds, boxes, shape, cfg)
        assert rows == expect_rows
