import json

import numpy as np
import pytest

from panofocus.geometry import Box
from panofocus.io import (
    FormatError,
    annotations_to_dict,
    dumps_detections,
    dumps_predictions,
    dumps_weights,
    load_annotations,
    load_detections,
    load_predictions,
    load_weights,
    save_annotations,
)
from panofocus.io.config import CONFIG_ENV, ConfigError, dumps_config, load_config, parse_config_text
from panofocus.io.images import find_frame_image, image_size, load_image, save_png
from panofocus.prototyper import PrototyperConfig, init_params

from helpers import prediction_from, random_annotation

MINIMAL = {
    "frames": [{
        "frame_id": "f1",
        "image_path": "f1.png",
        "individuals": [{"id": "a", "box": {"x": 1, "y": 2, "w": 3, "h": 4}, "actions": [0, 26]}],
        "groups": [{"members": ["a"], "activities": [10]}],
        "global": [6],
    }]
}


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestDetections:
    def test_single_line(self, tmp_path):
        p = write(tmp_path, "d.jsonl", '{"frame_id":"f1","boxes":[{"x":0,"y":0,"w":10,"h":10,"score":0.9}]}\n')
        assert load_detections(p) == {"f1": [Box(0, 0, 10, 10, 0.9)]}

    def test_empty(self, tmp_path):
        assert load_detections(write(tmp_path, "d.jsonl", "")) == {}

    def test_score_range_names_field(self, tmp_path):
        p = write(tmp_path, "d.jsonl", '{"frame_id":"f1","boxes":[{"x":0,"y":0,"w":10,"h":10,"score":1.5}]}\n')
        with pytest.raises(FormatError, match="score"):
            load_detections(p)

    def test_negative_size(self, tmp_path):
        p = write(tmp_path, "d.jsonl", '{"frame_id":"f1","boxes":[{"x":0,"y":0,"w":-10,"h":10,"score":0.5}]}\n')
        with pytest.raises(FormatError):
            load_detections(p)

    def test_malformed_line_number(self, tmp_path):
        p = write(tmp_path, "d.jsonl", '{"frame_id":"f1","boxes":[]}\n{"frame_id":\n')
        with pytest.raises(FormatError, match=":2"):
            load_detections(p)

    @pytest.mark.parametrize("line", [
        '{"frame_id":"f1","boxes":[{"x":NaN,"y":0,"w":10,"h":10,"score":0.5}]}',
        '{"frame_id":"f1","boxes":[{"x":0,"y":0,"w":Infinity,"h":10,"score":0.5}]}',
        '{"frame_id":"f1","boxes":[{"x":0,"y":0,"w":1e999,"h":10,"score":0.5}]}',
    ])
    def test_non_finite(self, tmp_path, line):
        with pytest.raises(FormatError):
            load_detections(write(tmp_path, "d.jsonl", line + "\n"))

    @pytest.mark.parametrize("line", [
        '{"frame_id":"f1","boxes":[],"extra":1}',
        '{"frame_id":"f1","boxes":[{"x":0,"y":0,"w":1,"h":1,"score":0.5,"cls":2}]}',
        '{"boxes":[]}',
    ])
    def test_schema(self, tmp_path, line):
        with pytest.raises(FormatError):
            load_detections(write(tmp_path, "d.jsonl", line + "\n"))

    def test_duplicate_frame(self, tmp_path):
        p = write(tmp_path, "d.jsonl", '{"frame_id":"f1","boxes":[]}\n{"frame_id":"f1","boxes":[]}\n')
        with pytest.raises(FormatError, match="duplicate"):
            load_detections(p)

    def test_round_trip(self, tmp_path, rng):
        frames = {f"f{k}": [Box(*rng.uniform(0, 100, 2), *rng.uniform(1, 50, 2), float(rng.random()))
                            for _ in range(4)] for k in range(3)}
        text = dumps_detections(frames)
        assert load_detections(write(tmp_path, "d.jsonl", text)) == frames
        assert dumps_detections(load_detections(write(tmp_path, "e.jsonl", text))) == text


class TestAnnotations:
    def test_minimal(self, tmp_path):
        frames = load_annotations(write(tmp_path, "a.json", json.dumps(MINIMAL)))
        fa = frames["f1"]
        assert fa.individuals[0].box == Box(1, 2, 3, 4)
        assert fa.individuals[0].actions == {0, 26}
        assert fa.groups[0].members == ("a",) and fa.global_labels == {6}
        assert fa.image_path == "f1.png"

    def _broken(self, tmp_path, mutate):
        doc = json.loads(json.dumps(MINIMAL))
        mutate(doc["frames"][0])
        return write(tmp_path, "a.json", json.dumps(doc))

    @pytest.mark.parametrize("mutate", [
        lambda f: f["groups"][0]["members"].append("ghost"),
        lambda f: f["individuals"].append(dict(f["individuals"][0])),
        lambda f: f["individuals"][0]["actions"].append(27),
        lambda f: f["groups"][0]["activities"].append(11),
        lambda f: f["global"].append(7),
        lambda f: f.update(weather="rain"),
        lambda f: f["individuals"][0]["box"].update(w=0),
        lambda f: f["individuals"][0].update(actions=[-1]),
    ])
    def test_rejects(self, tmp_path, mutate):
        with pytest.raises(FormatError):
            load_annotations(self._broken(tmp_path, mutate))

    def test_class_counts_configurable(self, tmp_path):
        p = write(tmp_path, "a.json", json.dumps(MINIMAL))
        with pytest.raises(FormatError):
            load_annotations(p, class_counts=(20, 11, 7))

    def test_round_trip(self, tmp_path, rng):
        frames = {f"f{k}": random_annotation(rng, f"f{k}") for k in range(5)}
        p = tmp_path / "a.json"
        save_annotations(p, frames)
        loaded = load_annotations(p)
        assert loaded == frames
        q = tmp_path / "b.json"
        save_annotations(q, loaded)
        assert p.read_bytes() == q.read_bytes()
        assert annotations_to_dict(loaded) == json.loads(p.read_text())


class TestPredictions:
    def test_round_trip(self, tmp_path, rng):
        preds = [prediction_from(random_annotation(rng, f"f{k}")) for k in range(4)]
        text = dumps_predictions(preds)
        loaded = load_predictions(write(tmp_path, "p.jsonl", text))
        assert list(loaded.values()) == preds
        assert dumps_predictions(loaded.values()) == text

    def test_bad_member_index(self, tmp_path, rng):
        rec = json.loads(dumps_predictions([prediction_from(random_annotation(rng))]))
        rec["groups"] = [{"members": [99], "activities": [0]}]
        with pytest.raises(FormatError):
            load_predictions(write(tmp_path, "p.jsonl", json.dumps(rec) + "\n"))


class TestWeights:
    def test_round_trip(self, tmp_path):
        params = init_params(PrototyperConfig(d=8, m_max=4), 0)
        text = dumps_weights(params)
        loaded = load_weights(write(tmp_path, "w.json", text))
        assert set(loaded) == set(params)
        for k in params:
            np.testing.assert_array_equal(loaded[k], params[k])
        assert dumps_weights(loaded) == text

    @pytest.mark.parametrize("entry", [
        '{"shape": [2, 2], "data": [1, 2, 3]}',
        '{"shape": [2, 2], "data": [1, 2, 3, NaN]}',
        '{"shape": [2], "data": [1, 2]}',
        '{"shape": [1, 1], "data": ["x"]}',
        '{"shape": [1, 1], "data": [1], "dtype": "f4"}',
    ])
    def test_rejects(self, tmp_path, entry):
        with pytest.raises(FormatError):
            load_weights(write(tmp_path, "w.json", '{"a.b": %s}' % entry))

    def test_nan_rejected_on_save(self):
        with pytest.raises(ValueError):
            dumps_weights({"x": np.array([[np.nan]])})


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.focuser.theta == 48 and cfg.focuser.beta1 == 1.5 and cfg.focuser.beta2 == 1.8
        assert cfg.lam == 1e-3 and cfg.lambda_reg == 5.0
        assert cfg.class_counts == (27, 11, 7)
        assert cfg.iou_thresh == 0.3 and cfg.member_iou_thresh == 0.3 and cfg.decision_threshold == 0.5

    def test_precedence(self, tmp_path):
        p = write(tmp_path, "c.txt", "# comment\nnms_iou = 0.6  # trailing\nd = 16\n")
        assert load_config(p).focuser.nms_iou == 0.6
        cfg = load_config(p, {"nms_iou": 0.7, "theta": None})
        assert cfg.focuser.nms_iou == 0.7 and cfg.prototyper.d == 16 and cfg.focuser.theta == 48

    @pytest.mark.parametrize("text", ["theta = -1", "d = 8.5", "lambda = nan", "bogus = 1", "theta 48",
                                      "beta1 = abc", "heads = 3"])
    def test_errors(self, tmp_path, text):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, "c.txt", text + "\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.txt")

    def test_dump_round_trip(self):
        cfg = load_config(overrides={"theta": 40, "images_dir": "imgs", "lambda": 0.01})
        assert load_config(overrides=parse_config_text(dumps_config(cfg))) == cfg

    def test_env_name(self):
        assert CONFIG_ENV == "PANOFOCUS_CONFIG"


class TestImages:
    def test_png_round_trip(self, tmp_path, rng):
        img = (rng.random((12, 20, 3)) * 255).astype(np.uint8)
        save_png(tmp_path / "f.png", img)
        np.testing.assert_array_equal(load_image(tmp_path / "f.png"), img)
        assert image_size(tmp_path / "f.png") == (20, 12)
        assert find_frame_image(tmp_path, "f") == tmp_path / "f.png"
        assert find_frame_image(tmp_path, "g") is None
        assert find_frame_image(None, "f") is None

    def test_unreadable(self, tmp_path):
        with pytest.raises(FormatError):
            load_image(write(tmp_path, "x.png", "not an image"))
