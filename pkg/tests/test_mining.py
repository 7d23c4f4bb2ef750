import json

import numpy as np
import pytest
import torch

from mitocam import mining
from mitocam.dataset import Annotation, DatasetSplit, Patch, PatchSet
from mitocam.inference import InferenceConfig, ScoredWindow, WindowBox
from mitocam.mining import (MiningConfig, WindowOutcome, audit_leakage, cross_reference, mine_patches,
                            run_active_loop)
from mitocam.model import build_tiny_cnn, checkpoint_id, save_checkpoint
from mitocam.training import RoundResult

from conftest import make_image


def _sw(x, y, p, size=240):
    return ScoredWindow(WindowBox(x, y, size), p)


def test_cross_reference_examples():
    anns = [Annotation("a", 120, 120), Annotation("a", 500, 500), Annotation("a", 130, 130, "imposter")]
    outcomes, missed = cross_reference([_sw(0, 0, 0.9), _sw(300, 0, 0.95)], anns)
    assert [o.outcome for o in outcomes] == ["true_positive", "false_positive"]
    assert missed == [anns[1]]


def test_imposter_inside_window_is_still_false_positive():
    outcomes, missed = cross_reference([_sw(0, 0, 0.9)], [Annotation("a", 100, 100, "imposter")])
    assert outcomes[0].outcome == "false_positive" and missed == []


def _fp(x, p):
    return WindowOutcome(WindowBox(x, 0, 240), p, "false_positive")


def test_fp_cap_keeps_highest():
    im = make_image("a", 900, 300)
    outs = [_fp(0, 0.9), _fp(300, 0.99), _fp(600, 0.95)]
    mined = mine_patches(outs, [], [], im, MiningConfig(max_false_positives=2), 1)
    assert [p.center for p in mined] == [(420.0, 120.0), (720.0, 120.0)]
    assert all(p.label == "negative" and p.provenance == "false_positive" and p.round_added == 1 for p in mined)


def test_missed_mitosis_gives_centered_positive():
    im = make_image("a", 600, 600)
    ann = Annotation("a", 300, 310)
    (p,) = mine_patches([], [ann], [_sw(0, 0, 0.2)], im, MiningConfig(), 2, [ann])
    assert p.label == "positive" and p.provenance == "false_negative" and p.center == (300.0, 310.0)
    assert np.array_equal(p.pixels, im.pixels[190:430, 180:420])


def test_fn_cap_prefers_lowest_cover_probability():
    im = make_image("a", 900, 300)
    anns = [Annotation("a", 100, 100), Annotation("a", 700, 100)]
    scored = [_sw(0, 0, 0.8), _sw(600, 0, 0.1)]
    (p,) = mine_patches([], anns, scored, im, MiningConfig(max_false_negatives=1), 1, anns)
    assert p.center == (700.0, 100.0)


def test_hard_negative_band():
    im = make_image("a", 900, 300)
    anns = [Annotation("a", 700, 100)]
    scored = [_sw(0, 0, 0.6), _sw(300, 0, 0.4), _sw(600, 0, 0.7), _sw(330, 30, 0.84)]
    mined = mine_patches([], [], scored, im, MiningConfig(), 1, anns, prob_threshold=0.84)
    # 0.4 is below the band, 0.7 covers a mitosis, 0.84 is not below the threshold
    assert [(p.center, p.provenance) for p in mined] == [((120.0, 120.0), "hard_negative")]


def test_duplicates_skipped():
    im = make_image("a", 900, 300)
    existing = [Patch(np.zeros((240, 240, 3), np.uint8), "negative", "a", (125.0, 120.0), "initial")]
    mined = mine_patches([_fp(0, 0.9), _fp(300, 0.9)], [], [], im, MiningConfig(), 1, existing=existing)
    assert [p.center for p in mined] == [(420.0, 120.0)]


def test_mined_labels_match_provenance():
    im = make_image("a", 900, 300)
    anns = [Annotation("a", 450, 150)]
    outs, missed = cross_reference([_sw(0, 0, 0.9)], anns)
    scored = [_sw(x, 0, p) for x, p in ((0, 0.9), (300, 0.5), (600, 0.7))]
    for p in mine_patches(outs, missed, scored, im, MiningConfig(), 1, anns):
        assert p.label == ("positive" if p.provenance == "false_negative" else "negative")


# ----- loop with mocked training and scoring -----

def _loop_fixture():
    ims = [make_image(f"im{i}", 300, 300, seed=i) for i in range(4)]
    anns = [Annotation(f"im{i}", 20, 20) for i in range(4)]
    split = DatasetSplit(frozenset({"im0", "im1", "im2"}), frozenset({"im3"}), 0)

    def patch(image_id, label, round_=0):
        return Patch(np.zeros((240, 240, 3), np.uint8), label, image_id, (150.0, 150.0), "initial", round_)

    sets = {"train": PatchSet([patch("im0", "positive"), patch("im1", "negative")]),
            "val": PatchSet([patch("im3", "positive"), patch("im3", "negative")])}
    return ims, anns, split, sets


def _mock(monkeypatch, f1_sequence, scores=lambda im: [_sw(0, 0, 0.95), _sw(60, 0, 0.9), _sw(60, 60, 0.6)]):
    calls = {"train": 0}
    f1s = iter(f1_sequence)

    def fake_train(train, val, model, cfg, augment, log_path=None, checkpoint_dir=None):
        calls["train"] += 1
        with torch.no_grad():
            model.head.biases.fill_(float(calls["train"]))
        cid = save_checkpoint(model, checkpoint_dir) if checkpoint_dir else checkpoint_id(model)
        return RoundResult(cid, [], 1, {})

    def fake_f1(model, images, annotations, inference, cam_threshold, radius, scans=None):
        return 0.0, 0.0, next(f1s), {}

    monkeypatch.setattr(mining, "train_round", fake_train)
    monkeypatch.setattr(mining, "detection_f1", fake_f1)
    monkeypatch.setattr(mining, "scan_image", lambda model, im, inf: scores(im))
    return calls


def _run(monkeypatch, f1s, max_rounds=6, **kw):
    ims, anns, split, sets = _loop_fixture()
    calls = _mock(monkeypatch, f1s)
    reports, model = run_active_loop(ims, anns, split, sets, lambda: build_tiny_cnn(0, input_size=64),
                                     mining_config=MiningConfig(max_rounds=max_rounds),
                                     inference=InferenceConfig(window=240), **kw)
    return reports, model, calls, sets, split


def test_stopping_rule_trace(monkeypatch):
    reports, model, calls, _, _ = _run(monkeypatch, [0.60, 0.70, 0.68])
    assert [r.round for r in reports] == [1, 2, 3] and calls["train"] == 3
    # the returned weights are those from round 2
    assert model.head.biases[0].item() == 2.0


def test_monotone_f1_runs_max_rounds(monkeypatch):
    reports, _, calls, _, _ = _run(monkeypatch, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
    assert len(reports) == 6 and calls["train"] == 6


def test_equal_f1_stops(monkeypatch):
    reports, model, _, _, _ = _run(monkeypatch, [0.5, 0.5])
    assert len(reports) == 2 and model.head.biases[0].item() == 1.0


def test_sizes_non_decreasing_and_no_leakage(monkeypatch):
    reports, _, _, sets, split = _run(monkeypatch, [0.1, 0.2, 0.3], max_rounds=3)
    sizes = [(r.train_size, r.val_size) for r in reports]
    assert all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(sizes, sizes[1:]))
    assert sizes[1][0] > sizes[0][0]
    # bookkeeping: next size = previous + what this round added to train
    added_train = len([p for p in sets["train"] if p.round_added == 1])
    assert sizes[1][0] == sizes[0][0] + added_train
    assert sum(reports[0].added.values()) == len([p for s in sets.values() for p in s if p.round_added == 1])
    assert audit_leakage(sets["train"], sets["val"], split)
    # final round does not mine
    assert reports[-1].added == {}


def test_persist_and_resume(monkeypatch, tmp_path):
    ims, anns, split, sets = _loop_fixture()
    _mock(monkeypatch, [0.3, 0.4])
    factory = lambda: build_tiny_cnn(0, input_size=64)
    cfg = MiningConfig(max_rounds=2)
    run_active_loop(ims, anns, split, sets, factory, mining_config=cfg, output_dir=tmp_path)
    state = json.loads((tmp_path / "loop_state.json").read_text())
    assert state["finished"] and state["best_round"] == 2
    assert (tmp_path / "best_checkpoint" / "descriptor.json").exists()

    # resuming a finished loop trains nothing more
    ims, anns, split, fresh = _loop_fixture()
    calls = _mock(monkeypatch, [])
    reports, model = run_active_loop(ims, anns, split, fresh, factory, mining_config=cfg, output_dir=tmp_path,
                                     resume=True)
    assert calls["train"] == 0 and len(reports) == 2
    assert len(fresh["train"]) == len(sets["train"])


def test_resume_unfinished(monkeypatch, tmp_path):
    ims, anns, split, sets = _loop_fixture()
    factory = lambda: build_tiny_cnn(0, input_size=64)
    _mock(monkeypatch, [0.3])
    run_active_loop(ims, anns, split, sets, factory, mining_config=MiningConfig(max_rounds=1),
                    output_dir=tmp_path)
    state = json.loads((tmp_path / "loop_state.json").read_text())
    state["finished"] = False
    (tmp_path / "loop_state.json").write_text(json.dumps(state))
    ims, anns, split, fresh = _loop_fixture()
    calls = _mock(monkeypatch, [0.5, 0.4])
    reports, _ = run_active_loop(ims, anns, split, fresh, factory, mining_config=MiningConfig(max_rounds=3),
                                 output_dir=tmp_path, resume=True)
    assert [r.round for r in reports] == [1, 2, 3] and calls["train"] == 2


def test_audit_detects_leak():
    _, _, split, sets = _loop_fixture()
    assert audit_leakage(sets["train"], sets["val"], split)
    sets["train"].extend([sets["val"].patches[0]])
    assert not audit_leakage(sets["train"], sets["val"], split)


def test_config_validation():
    with pytest.raises(ValueError):
        MiningConfig(hard_negative_band=(0.9, 0.5)).validate()
    with pytest.raises(ValueError):
        MiningConfig(max_rounds=0).validate()
    assert MiningConfig().band(0.84) == (0.5, 0.84)
