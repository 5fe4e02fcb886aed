import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from nvsqa import pipeline, pnsg
from nvsqa.cli import build_parser, main
from nvsqa.model import load_model

SCHEMA = json.loads((Path(__file__).parent.parent / "docs" / "manifest.schema.json").read_text())


def synth(out, extra=()):
    code = main(["synth", "--out", str(out), "--views", "6", "--points", "48",
                 "--seed", "3", *extra])
    assert code == 0
    return out / "manifest.json"


class TestSynth:
    def test_default_scene_on_disk(self, tmp_path, capsys):
        manifest_path = synth(tmp_path / "scene")
        assert manifest_path.exists()
        raw = json.loads(manifest_path.read_text())
        jsonschema.validate(raw, SCHEMA)
        manifest = pipeline.load_manifest(manifest_path)
        bundle = pipeline.load_scene(manifest)
        assert len(bundle.views) == 6
        assert len(bundle.points) > 0

    def test_rerun_with_same_seed_is_byte_identical(self, tmp_path):
        a = synth(tmp_path / "a")
        b = synth(tmp_path / "b")
        for rel in ["manifest.json", "sparse/0/points3D.bin", "images/view000.ppm"]:
            fa = (tmp_path / "a" / rel).read_bytes().replace(b"/a/", b"//")
            fb = (tmp_path / "b" / rel).read_bytes().replace(b"/b/", b"//")
            assert fa == fb, rel

    def test_unwritable_path_errors(self, tmp_path, capsys):
        target = tmp_path / "blocked"
        target.write_text("a file, not a directory")
        code = main(["synth", "--out", str(target / "scene")])
        assert code != 0
        err = capsys.readouterr().err.strip()
        assert json.loads(err)["error"]


class TestExtract:
    def test_single_round_dump(self, tmp_path):
        manifest = synth(tmp_path / "scene")
        out = tmp_path / "features"
        code = main(["extract", "--manifest", str(manifest), "--out", str(out),
                     "--bins", "4", "--resample", "8", "--points", "16",
                     "--rounds", "1", "--seed", "0"])
        assert code == 0
        dumps = sorted(out.glob("*.pnsg"))
        assert len(dumps) == 1
        ids, tensors = pnsg.read_dump(dumps[0])
        assert len(ids) == 16
        assert tensors[0].values.shape == (2, 4, 8, 3)
        assert (out / "fixture_viewwise.csv").exists()

    def test_distinct_rounds_differ(self, tmp_path):
        manifest = synth(tmp_path / "scene")
        out = tmp_path / "features"
        code = main(["extract", "--manifest", str(manifest), "--out", str(out),
                     "--bins", "4", "--resample", "8", "--points", "16",
                     "--rounds", "2", "--seed", "0"])
        assert code == 0
        (ids0, _), (ids1, _) = [pnsg.read_dump(p) for p in sorted(out.glob("*.pnsg"))]
        assert ids0 != ids1

    def test_missing_colmap_model_errors(self, tmp_path, capsys):
        manifest = synth(tmp_path / "scene")
        raw = json.loads(manifest.read_text())
        raw["colmap_dir"] = "nonexistent"
        manifest.write_text(json.dumps(raw))
        code = main(["extract", "--manifest", str(manifest), "--out", str(tmp_path / "f")])
        assert code != 0
        assert "error" in json.loads(capsys.readouterr().err.strip())

    def test_viewwise_csv_has_one_row_per_view(self, tmp_path):
        manifest = synth(tmp_path / "scene")
        out = tmp_path / "features"
        main(["extract", "--manifest", str(manifest), "--out", str(out),
              "--points", "8", "--rounds", "1"])
        with open(out / "fixture_viewwise.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 7  # header + 6 views
        assert len(rows[0]) == 37  # path_index + 36 features


def make_labeled_scenes(tmp_path, n=4):
    paths = []
    for i in range(n):
        out = tmp_path / f"scene{i}"
        code = main([
            "synth", "--out", str(out), "--views", "6", "--points", "32",
            "--seed", str(10 + i), "--shading", "angular",
            "--k-pol", str(0.1 * (i + 1)), "--jod", str(-1.0 * i),
            "--scene-id", f"scene{i}", "--method-id", "m0",
        ])
        assert code == 0
        paths.append(out / "manifest.json")
    return paths


class TestTrainPredictEvaluate:
    def test_defaults_match_training_setup(self):
        parser = build_parser()
        args = parser.parse_args(["train", "--out", "x", "--manifests", "y"])
        assert args.epochs == 200
        assert args.batch == 10

    def test_end_to_end(self, tmp_path, capsys):
        manifests = make_labeled_scenes(tmp_path, n=4)
        model_path = tmp_path / "model.nqm"
        log_path = tmp_path / "log.csv"
        code = main([
            "train", "--out", str(model_path), "--manifests",
            *[str(p) for p in manifests], "--epochs", "3", "--batch", "4",
            "--bins", "4", "--resample", "8", "--points", "12", "--rounds", "1",
            "--lr", "1e-3", "--log", str(log_path),
        ])
        assert code == 0, capsys.readouterr().err
        assert model_path.exists()
        with open(log_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3  # one row per epoch

        pred_path = tmp_path / "pred.csv"
        code = main([
            "predict", "--model", str(model_path), "--out", str(pred_path),
            "--manifests", *[str(p) for p in manifests], "--points", "12",
        ])
        assert code == 0, capsys.readouterr().err
        with open(pred_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["scene_id"] for r in rows] == ["scene0", "scene1", "scene2", "scene3"]

        # deterministic across runs
        pred2 = tmp_path / "pred2.csv"
        main(["predict", "--model", str(model_path), "--out", str(pred2),
              "--manifests", *[str(p) for p in manifests], "--points", "12"])
        assert pred_path.read_text() == pred2.read_text()

        truth_path = tmp_path / "truth.csv"
        with open(truth_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scene_id", "method_id", "truth"])
            for i in range(4):
                writer.writerow([f"scene{i}", "m0", -1.0 * i])
        report_path = tmp_path / "report.json"
        code = main(["evaluate", "--pred", str(pred_path), "--truth", str(truth_path),
                     "--json", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert set(report) == {"rmse", "srcc", "plcc", "outlier_ratio", "n"}

    def test_ablated_model_ignores_point_sampling(self, tmp_path, capsys):
        manifests = make_labeled_scenes(tmp_path, n=2)
        model_path = tmp_path / "ablated.nqm"
        code = main([
            "train", "--out", str(model_path), "--manifests",
            *[str(p) for p in manifests], "--epochs", "2", "--batch", "4",
            "--bins", "4", "--resample", "8", "--points", "8", "--rounds", "1",
            "--ablate-pointwise",
        ])
        assert code == 0, capsys.readouterr().err
        model = load_model(model_path)
        assert model.config.ablate_pointwise

        # different point sampling seeds leave predictions unchanged
        out_a = tmp_path / "a.csv"
        out_b = tmp_path / "b.csv"
        main(["predict", "--model", str(model_path), "--out", str(out_a),
              "--manifests", str(manifests[0]), "--points", "8", "--seed", "0"])
        main(["predict", "--model", str(model_path), "--out", str(out_b),
              "--manifests", str(manifests[0]), "--points", "8", "--seed", "99"])
        assert out_a.read_text() == out_b.read_text()

    def test_train_without_labels_errors(self, tmp_path, capsys):
        out = tmp_path / "scene"
        synth(out)
        code = main(["train", "--out", str(tmp_path / "m.nqm"),
                     "--manifests", str(out / "manifest.json"), "--epochs", "1"])
        assert code != 0
        assert "labeled" in json.loads(capsys.readouterr().err.strip())["error"]


class TestEvaluate:
    def write_csv(self, path, header, rows):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)

    def test_perfect_predictions(self, tmp_path, capsys):
        pred = tmp_path / "pred.csv"
        truth = tmp_path / "truth.csv"
        values = [("s0", "m", -1.0), ("s1", "m", -2.0), ("s2", "m", -3.5), ("s3", "m", 0.0)]
        self.write_csv(pred, ["scene_id", "method_id", "pred"], values)
        self.write_csv(truth, ["scene_id", "method_id", "truth"], values)
        code = main(["evaluate", "--pred", str(pred), "--truth", str(truth)])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["rmse"] == 0.0
        assert report["srcc"] == pytest.approx(1.0)
        assert report["plcc"] == pytest.approx(1.0)
        assert report["outlier_ratio"] == 0.0

    def test_hand_built_example_matches_metric_oracles(self, tmp_path, capsys):
        pred_rows = [("s0", "m", 0.0), ("s1", "m", 0.0)]
        truth_rows = [("s0", "m", 3.0), ("s1", "m", 4.0)]
        pred = tmp_path / "pred.csv"
        truth = tmp_path / "truth.csv"
        self.write_csv(pred, ["scene_id", "method_id", "pred"],
                       pred_rows + [("s2", "m", 1.0), ("s3", "m", 2.0)])
        self.write_csv(truth, ["scene_id", "method_id", "truth"],
                       truth_rows + [("s2", "m", 1.0), ("s3", "m", 2.0)])
        code = main(["evaluate", "--pred", str(pred), "--truth", str(truth)])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        # residuals are [-3, -4, 0, 0]: rmse = 2.5 exactly
        assert report["rmse"] == pytest.approx(2.5)

    def test_missing_join_key_names_it(self, tmp_path, capsys):
        pred = tmp_path / "pred.csv"
        truth = tmp_path / "truth.csv"
        self.write_csv(pred, ["scene_id", "method_id", "pred"],
                       [("s0", "m", 1.0), ("s1", "m", 2.0)])
        self.write_csv(truth, ["scene_id", "method_id", "truth"], [("s0", "m", 1.0)])
        code = main(["evaluate", "--pred", str(pred), "--truth", str(truth)])
        assert code != 0
        err = json.loads(capsys.readouterr().err.strip())["error"]
        assert "s1" in err

    def test_table_output(self, tmp_path, capsys):
        pred = tmp_path / "pred.csv"
        truth = tmp_path / "truth.csv"
        rows = [(f"s{i}", "m", float(i)) for i in range(5)]
        self.write_csv(pred, ["scene_id", "method_id", "pred"], rows)
        self.write_csv(truth, ["scene_id", "method_id", "truth"], rows)
        code = main(["evaluate", "--pred", str(pred), "--truth", str(truth), "--table"])
        assert code == 0
        out = capsys.readouterr().out
        assert "RMSE" in out and "SRCC" in out


class TestManifestValidation:
    def test_bad_path_index_coverage(self, tmp_path):
        scene = synth(tmp_path / "scene")
        raw = json.loads(scene.read_text())
        raw["views"][0]["path_index"] = 17
        scene.write_text(json.dumps(raw))
        with pytest.raises(ValueError, match="path_index"):
            pipeline.load_manifest(scene)

    def test_missing_view_file(self, tmp_path):
        scene = synth(tmp_path / "scene")
        (tmp_path / "scene" / "images" / "view000.ppm").unlink()
        with pytest.raises(FileNotFoundError):
            pipeline.load_manifest(scene)

    def test_nqa_threads_env(self, monkeypatch):
        monkeypatch.setenv("NQA_THREADS", "4")
        assert pipeline.max_workers_from_env() == 4
        monkeypatch.setenv("NQA_THREADS", "bogus")
        with pytest.raises(ValueError):
            pipeline.max_workers_from_env()
