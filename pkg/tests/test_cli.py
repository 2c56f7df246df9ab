import json
import shutil
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from panofocus import __version__
from panofocus.cli import main
from panofocus.io import dumps_weights, load_annotations, load_detections, load_predictions, save_predictions
from panofocus.io.config import CONFIG_ENV
from panofocus.prototyper import PrototyperConfig, init_params

from helpers import prediction_from


@pytest.fixture
def mini(tmp_path, fixture_dir):
    dst = tmp_path / "mini"
    shutil.copytree(fixture_dir, dst)
    return dst


def fixture_args(mini, *extra):
    return ["--config", str(mini / "config.txt"), "--images-dir", str(mini), *extra]


class TestTopLevel:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["--version"])
        assert info.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_requires_subcommand(self):
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code != 0


class TestFocus:
    def test_file_detector(self, mini, tmp_path, capsys):
        out = tmp_path / "fused.jsonl"
        args = ["focus", "--detections", str(mini / "detections.jsonl"), "--detector", f"file:{mini / 'regions.jsonl'}",
                "--out", str(out), *fixture_args(mini)]
        assert main(args) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("f1: original=4 extended=4 regions=")
        fused = load_detections(out)
        originals = load_detections(mini / "detections.jsonl")
        assert all(len(fused[f]) == len(originals[f]) + 1 for f in originals)
        first = out.read_bytes()
        assert main(args + ["--jobs", "3"]) == 0
        assert out.read_bytes() == first

    def test_empty_detections(self, tmp_path):
        empty = tmp_path / "d.jsonl"
        empty.write_text("")
        out = tmp_path / "o.jsonl"
        assert main(["focus", "--detections", str(empty), "--out", str(out)]) == 0
        assert out.read_text() == ""

    def test_missing_image_for_command(self, mini, tmp_path, capsys):
        (mini / "f2.png").unlink()
        cmd = f"cmd:{sys.executable} -c \"print('[]')\""
        code = main(["focus", "--detections", str(mini / "detections.jsonl"), "--detector", cmd,
                     "--out", str(tmp_path / "o.jsonl"), *fixture_args(mini)])
        assert code == 1
        assert "'f2'" in capsys.readouterr().err

    def test_command_detector_runs(self, mini, tmp_path):
        script = tmp_path / "det.py"
        script.write_text("import json\nprint(json.dumps([{'x': 1, 'y': 1, 'w': 4, 'h': 4, 'score': 0.05}]))\n")
        out = tmp_path / "o.jsonl"
        code = main(["focus", "--detections", str(mini / "detections.jsonl"),
                     "--detector", f"cmd:{sys.executable} {script} {{path}}", "--out", str(out), *fixture_args(mini)])
        assert code == 0
        assert load_detections(out)

    def test_failing_detector_and_skip(self, mini, tmp_path):
        script = tmp_path / "det.py"
        script.write_text("import sys\nsys.exit(4)\n")
        base = ["focus", "--detections", str(mini / "detections.jsonl"),
                "--detector", f"cmd:{sys.executable} {script}", "--out", str(tmp_path / "o.jsonl"), *fixture_args(mini)]
        assert main(base) == 1
        with pytest.warns(RuntimeWarning):
            assert main(base + ["--skip-region-errors"]) == 0
        assert load_detections(tmp_path / "o.jsonl")["f1"]

    def test_bad_detector_spec(self, mini, tmp_path):
        assert main(["focus", "--detections", str(mini / "detections.jsonl"), "--detector", "magic",
                     "--out", str(tmp_path / "o.jsonl")]) == 1

    def test_flag_overrides_config(self, mini, tmp_path, capsys):
        base = ["focus", "--detections", str(mini / "detections.jsonl"), "--out", str(tmp_path / "o.jsonl"),
                *fixture_args(mini)]
        assert main(base + ["--min-merge-count", "99"]) == 0
        assert main(base + ["--theta", "-3"]) == 1

    def test_env_config_fallback(self, mini, tmp_path, monkeypatch):
        cfg = tmp_path / "bad.txt"
        cfg.write_text("theta = oops\n")
        monkeypatch.setenv(CONFIG_ENV, str(cfg))
        assert main(["focus", "--detections", str(mini / "detections.jsonl"), "--out", str(tmp_path / "o")]) == 1
        assert main(["focus", "--detections", str(mini / "detections.jsonl"), "--out", str(tmp_path / "o"),
                     "--config", str(mini / "config.txt")]) == 0


class TestForward:
    def test_annotations_eval_mode_deterministic(self, mini, tmp_path):
        outs = []
        for k in range(2):
            feats, preds = tmp_path / f"feat{k}.jsonl", tmp_path / f"pred{k}.jsonl"
            assert main(["forward", "--annotations", str(mini / "annotations.json"), "--weights", "seed:3",
                         "--eval-mode", "--out", str(feats), "--out-pred", str(preds), *fixture_args(mini)]) == 0
            outs.append((feats.read_bytes(), preds.read_bytes()))
        assert outs[0] == outs[1]
        loaded = load_predictions(tmp_path / "pred0.jsonl")
        gts = load_annotations(mini / "annotations.json")
        assert list(loaded) == list(gts)
        for fid, fp in loaded.items():
            assert len(fp.individuals) == len(gts[fid].individuals)
        rec = json.loads((tmp_path / "feat0.jsonl").read_text().splitlines()[0])
        assert len(rec["f_glo"]) == 16 and len(rec["f_ind"]) == len(gts["f1"].individuals)

    def test_train_mode_changes_features(self, mini, tmp_path):
        common = ["forward", "--annotations", str(mini / "annotations.json"), *fixture_args(mini)]
        assert main(common + ["--out", str(tmp_path / "e.jsonl")]) == 0
        assert main(common + ["--train-mode", "--out", str(tmp_path / "t.jsonl")]) == 0
        assert main(common + ["--train-mode", "--out", str(tmp_path / "t2.jsonl")]) == 0
        assert (tmp_path / "e.jsonl").read_bytes() != (tmp_path / "t.jsonl").read_bytes()
        assert (tmp_path / "t.jsonl").read_bytes() == (tmp_path / "t2.jsonl").read_bytes()

    def test_empty_frame(self, mini, tmp_path):
        dets = tmp_path / "d.jsonl"
        dets.write_text('{"frame_id": "f1", "boxes": []}\n')
        preds = tmp_path / "p.jsonl"
        assert main(["forward", "--detections", str(dets), "--out-pred", str(preds), *fixture_args(mini)]) == 0
        fp = load_predictions(preds)["f1"]
        assert fp.individuals == () and fp.groups == ()

    def test_weights_file(self, mini, tmp_path):
        cfg = PrototyperConfig(d=16, heads=4, prototypes=4)
        w = tmp_path / "w.json"
        w.write_text(dumps_weights(init_params(cfg, 0)))
        common = ["forward", "--annotations", str(mini / "annotations.json"), *fixture_args(mini)]
        assert main(common + ["--weights", str(w), "--out", str(tmp_path / "a")]) == 0
        assert main(common + ["--weights", "seed:0", "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_weights_shape_mismatch(self, mini, tmp_path):
        w = tmp_path / "w.json"
        w.write_text(dumps_weights(init_params(PrototyperConfig(d=8), 0)))
        assert main(["forward", "--annotations", str(mini / "annotations.json"), "--weights", str(w),
                     *fixture_args(mini)]) == 1


class TestGradcheck:
    SMALL = ["gradcheck", "--dims", "4", "--heads", "2", "--individuals", "2"]

    def test_small_passes(self, capsys):
        assert main(self.SMALL) == 0
        out = capsys.readouterr().out
        assert "head.det_w" in out and "FAIL" not in out

    def test_coarse_epsilon_reports_degradation(self, capsys):
        with pytest.warns(RuntimeWarning):
            code = main(self.SMALL + ["--epsilon", "1e-1"])
        out = capsys.readouterr().out
        worst = float(out.strip().splitlines()[-1].split()[3])
        assert worst > 1e-6
        assert code == (0 if worst < 1e-4 else 1)

    def test_nan_weights(self, tmp_path):
        bad = tmp_path / "w.json"
        bad.write_text('{"patch.cls_token": {"shape": [1, 4], "data": [NaN, 0, 0, 0]}}')
        assert main(self.SMALL + ["--weights", str(bad)]) == 1


class TestEval:
    def test_identity(self, mini, tmp_path, capsys):
        gts = load_annotations(mini / "annotations.json")
        pred = tmp_path / "p.jsonl"
        save_predictions(pred, [prediction_from(fa) for fa in gts.values()])
        report = tmp_path / "r.json"
        assert main(["eval", "--pred", str(pred), "--gt", str(mini / "annotations.json"), "--json", str(report)]) == 0
        d = json.loads(report.read_text())
        assert all(d[k] == 1.0 for k in ("p_i", "r_i", "f_i", "p_p", "r_p", "f_p", "p_g", "r_g", "f_g", "f_a"))
        assert len(d["frames"]) == 3

    def test_empty_prediction_file(self, mini, tmp_path):
        pred = tmp_path / "p.jsonl"
        pred.write_text("")
        report = tmp_path / "r.json"
        assert main(["eval", "--pred", str(pred), "--gt", str(mini / "annotations.json"), "--json", str(report)]) == 0
        d = json.loads(report.read_text())
        assert d["r_i"] == d["r_p"] == d["r_g"] == 0.0

    def test_bad_gt(self, tmp_path):
        gt = tmp_path / "gt.json"
        gt.write_text('{"frames": [{"frame_id": "x"}]}')
        pred = tmp_path / "p.jsonl"
        pred.write_text("")
        assert main(["eval", "--pred", str(pred), "--gt", str(gt)]) == 1


class TestRender:
    def test_detections(self, mini, tmp_path):
        fused = tmp_path / "fused.jsonl"
        main(["focus", "--detections", str(mini / "detections.jsonl"), "--detector", f"file:{mini / 'regions.jsonl'}",
              "--out", str(fused), *fixture_args(mini)])
        out = tmp_path / "svg"
        assert main(["render", "--detections", str(fused), "--original", str(mini / "detections.jsonl"),
                     "--out-dir", str(out), *fixture_args(mini)]) == 0
        root = ET.parse(out / "f1.svg").getroot()
        rects = root.findall("{http://www.w3.org/2000/svg}rect")
        assert len(rects) == len(load_detections(fused)["f1"])
        assert sorted(r.get("class") for r in rects).count("fine") == 1

    def test_predictions_with_groups(self, mini, tmp_path):
        gts = load_annotations(mini / "annotations.json")
        pred = tmp_path / "p.jsonl"
        save_predictions(pred, [prediction_from(fa) for fa in gts.values()])
        out = tmp_path / "svg"
        assert main(["render", "--pred", str(pred), "--out-dir", str(out), *fixture_args(mini)]) == 0
        root = ET.parse(out / "f1.svg").getroot()
        rects = root.findall("{http://www.w3.org/2000/svg}rect")
        assert len(rects) == len(gts["f1"].individuals) + len(gts["f1"].groups)


class TestPipeline:
    def args(self, mini, out_dir, *extra):
        return ["pipeline", "--detections", str(mini / "detections.jsonl"), "--detector",
                f"file:{mini / 'regions.jsonl'}", "--gt", str(mini / "annotations.json"),
                "--out-dir", str(out_dir), *fixture_args(mini), *extra]

    def test_artifacts(self, mini, tmp_path):
        out = tmp_path / "run"
        assert main(self.args(mini, out)) == 0
        assert sorted(p.name for p in out.iterdir()) == ["features.jsonl", "fused.jsonl", "predictions.jsonl",
                                                         "report.json"]
        report = json.loads((out / "report.json").read_text())
        assert 0.0 <= report["f_a"] <= 1.0
        assert report["f_a"] == pytest.approx((report["f_i"] + report["f_p"] + report["f_g"]) / 3)

    def test_dry_run(self, mini, tmp_path):
        out = tmp_path / "run"
        assert main(self.args(mini, out, "--dry-run")) == 0
        assert not out.exists()

    def test_validate_stage_failure(self, mini, tmp_path, capsys):
        (mini / "annotations.json").write_text("{}")
        assert main(self.args(mini, tmp_path / "run")) == 1
        assert "stage 'validate'" in capsys.readouterr().err

    def test_focus_stage_failure(self, mini, tmp_path, capsys):
        (mini / "f1.png").unlink()
        code = main(["pipeline", "--detections", str(mini / "detections.jsonl"), "--detector",
                     f"cmd:{sys.executable} -c pass", "--gt", str(mini / "annotations.json"),
                     "--out-dir", str(tmp_path / "run"), *fixture_args(mini)])
        assert code == 1
        assert "stage 'focus'" in capsys.readouterr().err
