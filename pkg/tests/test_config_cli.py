import json

import numpy as np
import pytest
from PIL import Image

from mitocam.cam import Detection
from mitocam.cli import main
from mitocam.config import ConfigError, config_from_dict, config_to_dict, dump_config, parse_config
from mitocam.dataset import Annotation, save_dataset
from mitocam.evaluation import match_detections, per_domain_report
from mitocam.io import read_detections, write_detections
from mitocam.model import build_tiny_cnn, save_checkpoint

from conftest import make_image


def test_empty_config_gives_defaults():
    cfg = config_from_dict({})
    assert (cfg.inference.window, cfg.inference.step) == (240, 30)
    assert (cfg.inference.prob_threshold, cfg.inference.nms_threshold) == (0.84, 0.22)
    assert cfg.train.epochs_per_round == 100 and cfg.train.lr_max == 6e-4
    assert cfg.mining.max_rounds == 6 and cfg.cam_threshold == 0.5
    assert cfg.split.val_fraction == 0.1 and cfg.evaluation.radius == 30


def test_invalid_step_names_key():
    with pytest.raises(ConfigError, match=r"inference\.step"):
        config_from_dict({"inference": {"step": 0}})


def test_unknown_key_named():
    with pytest.raises(ConfigError, match=r"inference\.foo"):
        config_from_dict({"inference": {"foo": 1}})
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"bogus": {}})


def test_type_errors_named():
    with pytest.raises(ConfigError, match=r"train\.epochs_per_round"):
        config_from_dict({"train": {"epochs_per_round": "ten"}})


def test_malformed_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config(p)


def test_roundtrip_fixed_point(tmp_path):
    cfg = config_from_dict({"train": {"lr_max": 0.1}, "mining": {"hard_negative_band": [0.4, 0.8]},
                            "model": {"channels": [8, 8, 16, 16]}})
    p = tmp_path / "c.json"
    p.write_text(dump_config(cfg))
    again = parse_config(p)
    assert config_to_dict(again) == config_to_dict(cfg)
    assert dump_config(again) == dump_config(cfg)


def test_detections_roundtrip(tmp_path):
    dets = [Detection(1.23456, 2.5, 0.8437), Detection(100.0, 7.125, 0.9), Detection(3.0, 4.0, 0.99)]
    write_detections(dets, tmp_path / "a.json", "a")
    image_id, back = read_detections(tmp_path / "a.json")
    assert image_id == "a" and len(back) == 3
    for d, b in zip(dets, back):
        assert abs(d.x - b.x) < 0.005 and abs(d.y - b.y) < 0.005
        assert abs(d.score - b.score) < 1e-6
    write_detections([], tmp_path / "e.json", "e")
    assert read_detections(tmp_path / "e.json") == ("e", [])
    assert json.loads((tmp_path / "e.json").read_text()) == {"image_id": "e", "detections": []}


@pytest.fixture
def blank_setup(tmp_path):
    cfg = {"inference": {"window": 64, "step": 32}, "dataset": {"patch_size": 64},
           "model": {"input_size": 64}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    m = build_tiny_cnn(0, input_size=64)
    save_checkpoint(m, tmp_path / "ck")
    img = np.full((128, 160, 3), 255, np.uint8)
    Image.fromarray(img).save(tmp_path / "blank.png")
    return tmp_path


def test_infer_blank_image(blank_setup, capsys):
    t = blank_setup
    code = main(["--config", str(t / "cfg.json"), "--output", str(t / "out"), "infer",
                 "--checkpoint", str(t / "ck"), "--image", str(t / "blank.png")])
    assert code == 0
    doc = json.loads((t / "out" / "detections" / "blank.json").read_text())
    assert doc == {"image_id": "blank", "detections": []}
    echoed = json.loads((t / "out" / "effective_config.json").read_text())
    assert echoed["inference"]["window"] == 64 and echoed["train"]["lr_max"] == 6e-4


def test_cli_errors_return_nonzero(blank_setup, capsys):
    t = blank_setup
    assert main(["--config", str(t / "missing.json"), "--output", str(t / "o"), "infer",
                 "--checkpoint", str(t / "ck"), "--image", str(t / "blank.png")]) == 2
    assert "missing.json" in capsys.readouterr().err
    assert main(["--config", str(t / "cfg.json"), "--output", str(t / "o"), "infer",
                 "--checkpoint", str(t / "nope"), "--image", str(t / "blank.png")]) == 2
    assert "nope" in capsys.readouterr().err
    (t / "bad.json").write_text(json.dumps({"inference": {"step": 0}}))
    assert main(["--config", str(t / "bad.json"), "--output", str(t / "o"), "extract"]) == 2
    assert "inference.step" in capsys.readouterr().err


def test_evaluate_matches_module_oracle(tmp_path, capsys):
    ims = [make_image("a", 300, 300, tumor_type="t1"), make_image("b", 300, 300, tumor_type="t2", seed=1)]
    anns = [Annotation("a", 50, 50), Annotation("a", 200, 200), Annotation("b", 100, 100),
            Annotation("b", 10, 10, "imposter")]
    ds = save_dataset(ims, anns, tmp_path / "data")
    det_dir = tmp_path / "dets"
    det_dir.mkdir()
    dets = {"a": [Detection(55, 50, 0.9), Detection(250, 20, 0.95)], "b": [Detection(12, 10, 0.9)]}
    for k, v in dets.items():
        write_detections(v, det_dir / f"{k}.json", k)
    (tmp_path / "cfg.json").write_text("{}")
    code = main(["--config", str(tmp_path / "cfg.json"), "--output", str(tmp_path / "out"), "evaluate",
                 "--dataset", str(ds), "--detections", str(det_dir)])
    assert code == 0
    rows = json.loads((tmp_path / "out" / "report.json").read_text())["rows"]
    expected = per_domain_report({
        "t1": [match_detections(dets["a"], anns[:2], 30)],
        "t2": [match_detections(dets["b"], anns[2:3], 30)]})
    assert rows == expected
    assert rows[-1]["tp"] == 1 and rows[-1]["fp"] == 2 and rows[-1]["fn"] == 2
    assert "overall" in capsys.readouterr().out


def test_synth_extract_and_overlay(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{}")
    assert main(["--config", str(cfg), "--output", str(tmp_path / "fx"), "synth", "--n-images", "2",
                 "--image-size", "480", "--unlabeled-fraction", "0"]) == 0
    ds = tmp_path / "fx" / "dataset.json"
    assert ds.exists() and (tmp_path / "fx" / "ground_truth.json").exists()
    assert main(["--config", str(cfg), "--output", str(tmp_path / "ex"), "extract", "--dataset", str(ds)]) == 0
    manifest = json.loads((tmp_path / "ex" / "patches" / "train" / "manifest.json").read_text())
    assert manifest
    split = json.loads((tmp_path / "ex" / "split.json").read_text())
    assert len(split["val_images"]) == 1

    det_dir = tmp_path / "dets"
    det_dir.mkdir()
    doc = json.loads(ds.read_text())
    first = doc["images"][0]["id"]
    write_detections([Detection(100, 100, 0.9)], det_dir / f"{first}.json", first)
    save_checkpoint(build_tiny_cnn(0), tmp_path / "ck")
    assert main(["--config", str(cfg), "--output", str(tmp_path / "ov"), "overlay", "--dataset", str(ds),
                 "--detections", str(det_dir), "--checkpoint", str(tmp_path / "ck")]) == 0
    assert (tmp_path / "ov" / "overlays" / f"{first}.png").exists()


def test_synth_layout_flags(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{}")
    assert main(["--config", str(cfg), "--output", str(tmp_path / "fx"), "--log-level", "WARNING", "synth",
                 "--n-images", "2", "--image-size", "720", "--unlabeled-fraction", "0", "--margin", "150",
                 "--min-separation", "120"]) == 0
    truth = json.loads((tmp_path / "fx" / "ground_truth.json").read_text())
    assert truth["spec"]["margin"] == 150 and truth["spec"]["min_separation"] == 120
    for info in truth["images"].values():
        pts = np.array(info["mitoses"] + info["imposters"], float)
        assert np.all((pts >= 150) & (pts < 720 - 150))
        d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
        assert d[np.triu_indices(len(pts), 1)].min() >= 120
