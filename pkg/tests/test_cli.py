import json

import numpy as np
import pytest

from ultrafast_cade.cli import main
from ultrafast_cade.geometry import BoundingBox3D, Category, Detection, LesionAnnotation
from ultrafast_cade.io import read_detections, read_volume, write_annotations, write_detections
from ultrafast_cade.phantom import load_corpus

TINY = {
    "network": {"base_width": 4, "pyramid_channels": 8, "subnet_channels": 4, "subnet_depth": 1,
                "anchors": {"base_sizes": [8, 16, 32, 64, 128]}},
    "train": {"epochs": 1, "max_steps": 1},
    "evaluation": {"n_bootstrap": 0},
}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "run.log"}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    # 14 studies under seed 1 belong to exactly 12 patients
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["phantom", "generate", "--n", "14", "--seed", "1", "--out", str(out)]) == 0
    return out


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_phantom_generate_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(["phantom", "generate", "--n", 4, "--seed", 1, "--out", tmp_path / name], capsys)
        assert code == 0
        assert json.loads(out)["studies"] == 4
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b
    assert any(p.suffix == ".raw" for p in a)
    assert (tmp_path / "a" / "config.resolved.json").exists()
    assert (tmp_path / "a" / "run.log").read_text()


def test_generate_refuses_nonempty_out(tmp_path, capsys):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "keep.txt").write_text("data")
    code, _, err = run(["phantom", "generate", "--n", 1, "--seed", 1, "--out", tmp_path / "x"], capsys)
    assert code == 4
    assert json.loads(err)["error"] == "output-exists"
    assert (tmp_path / "x" / "keep.txt").read_text() == "data"


def test_perfect_detector(tmp_path, capsys):
    boxes = [BoundingBox3D((1, 2, 3), (4, 8, 9)), BoundingBox3D((0, 0, 0), (3, 3, 3))]
    anns = [LesionAnnotation(boxes[0], Category.MALIGNANT, "c1/left"),
            LesionAnnotation(boxes[1], Category.BENIGN_BIOPSIED, "c2/right")]
    breasts = ["c1/left", "c1/right", "c2/left", "c2/right"]
    dets = [Detection(a.box, 0.9, a.breast_id) for a in anns]
    write_annotations(tmp_path / "ann.jsonl", anns, breasts)
    write_detections(tmp_path / "det.jsonl", dets)
    code, out, _ = run(["evaluate", "--dets", tmp_path / "det.jsonl", "--annotations", tmp_path / "ann.jsonl",
                        "--out", tmp_path / "ev"], capsys)
    assert code == 0
    summary = json.loads(out)
    for metric in ("detection_rate", "sensitivity", "benign_detection_rate"):
        assert summary["metrics"][metric]["value_at_0"] == 1.0
        curve = json.loads((tmp_path / "ev" / f"curve_{metric}.json").read_text())
        assert curve["points"][-1]["fp"] == 0.0 and curve["points"][-1]["value"] == 1.0
    csv_lines = (tmp_path / "ev" / "curve_sensitivity.csv").read_text().splitlines()
    assert csv_lines[0] == "fp,value,ci_low,ci_high"


def test_exit_codes(tmp_path, tiny_config, capsys):
    code, _, err = run(["train", "--corpus", tmp_path / "missing", "--out", tmp_path / "o", "--seed", 0], capsys)
    assert code == 3
    assert json.loads(err)["error"] == "missing-file"

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rat": 1e-3}}))
    code, _, err = run(["phantom", "generate", "--n", 1, "--seed", 0, "--out", tmp_path / "p", "--config", bad],
                       capsys)
    assert code == 2
    msg = json.loads(err)
    assert msg == {"error": "config", "key": "train.learning_rat", "message": "unknown key"}
    assert not (tmp_path / "p").exists()

    code, _, err = run(["phantom", "generate", "--n", 1, "--out", tmp_path / "q"], capsys)
    assert code == 2  # seeds are mandatory
    assert "--seed" in json.loads(err)["message"]

    code, _, err = run(["evaluate", "--dets", tmp_path / "nope.jsonl", "--annotations", tmp_path / "nope.jsonl",
                        "--out", tmp_path / "e"], capsys)
    assert code == 3
    assert len(err.strip().splitlines()) == 1


def test_set_override_is_resolved(tmp_path, capsys):
    code, _, _ = run(["phantom", "generate", "--n", 1, "--seed", 0, "--out", tmp_path / "p",
                      "--set", "phantom.noise_sigma=3.5", "--motion-amplitude", "1"], capsys)
    assert code == 0
    resolved = json.loads((tmp_path / "p" / "config.resolved.json").read_text())
    assert resolved["phantom"]["noise_sigma"] == 3.5
    assert resolved["phantom"]["motion_amplitude"] == 1


def test_train_detect_original_coordinates(corpus, tmp_path, tiny_config, capsys):
    code, _, _ = run(["train", "--corpus", corpus, "--out", tmp_path / "tr", "--seed", 2, "--config", tiny_config,
                      "--fit-anchors"], capsys)
    assert code == 0
    for name in ("model.ckpt", "epochs.jsonl", "steps.jsonl", "config.resolved.json", "run.log", "split.json"):
        assert (tmp_path / "tr" / name).exists()
    code, _, _ = run(["detect", "--checkpoint", tmp_path / "tr" / "model.ckpt", "--corpus", corpus,
                      "--out", tmp_path / "de", "--set", "evaluation.score_threshold=0.0",
                      "--set", "evaluation.max_detections=5"], capsys)
    assert code == 0
    dets = read_detections(tmp_path / "de" / "detections.jsonl")
    studies = {b.breast_id: b for s in load_corpus(corpus) for b in s.breasts.values()}
    assert {d.breast_id for d in dets} == set(studies)
    for d in dets:
        b = studies[d.breast_id]
        shape = read_volume(corpus / b.tensor_path)[0].shape  # (13, rows, cols, slices)
        extent = np.array([shape[3], shape[1], shape[2]])
        lo = np.array(d.box.min_corner) - b.crop_origin
        hi = np.array(d.box.max_corner) - b.crop_origin
        # boxes live in original space: shifting back lands them near the crop
        assert np.all(hi > 0) and np.all(lo < extent)
    assert any(any(b.crop_origin) for b in studies.values())


def test_compare_identical_runs(corpus, tmp_path, tiny_config, capsys):
    run(["train", "--corpus", corpus, "--out", tmp_path / "tr", "--seed", 0, "--config", tiny_config], capsys)
    run(["detect", "--checkpoint", tmp_path / "tr" / "model.ckpt", "--corpus", corpus, "--out", tmp_path / "de",
         "--set", "evaluation.score_threshold=0.0"], capsys)
    code, out, _ = run(["compare", "--run-a", tmp_path / "de", "--run-b", tmp_path / "de", "--samples", 50,
                        "--seed", 3, "--out", tmp_path / "cmp"], capsys)
    assert code == 0
    assert json.loads(out)["p"] == 1.0
    assert json.loads((tmp_path / "cmp" / "compare.json").read_text())["p"] == 1.0


def test_crossval_bookkeeping(corpus, tmp_path, tiny_config, capsys):
    assert len({s.patient_id for s in load_corpus(corpus)}) == 12
    code, _, _ = run(["crossval", "--corpus", corpus, "--folds", 3, "--seed", 0, "--out", tmp_path / "cv",
                      "--config", tiny_config, "--set", "evaluation.score_threshold=0.0",
                      "--set", "evaluation.overlap_threshold=0.01", "--set", 'evaluation.criterion="iogt"'], capsys)
    assert code == 0
    report = json.loads((tmp_path / "cv" / "crossval.json").read_text())
    folds, pooled = report["folds"], report["pooled"]
    assert len(folds) == 3
    for f in range(3):
        assert (tmp_path / "cv" / f"fold_{f}" / "summary.json").exists()
    assert pooled["matched_lesions"] > 0
    assert pooled["matched_lesions"] == sum(f["matched_lesions"] for f in folds)
    assert pooled["n_lesions"] == sum(f["n_lesions"] for f in folds)
    assert pooled["n_breasts"] == 2 * len(load_corpus(corpus))
    for metric, m in pooled["metrics"].items():
        assert m["matched"] == sum(f["metrics"][metric]["matched"] for f in folds)
    # every study is tested exactly once
    tested = [sid for f in range(3)
              for sid in json.loads((tmp_path / "cv" / f"fold_{f}" / "split.json").read_text())["test"]]
    assert sorted(tested) == sorted(s.study_id for s in load_corpus(corpus))
