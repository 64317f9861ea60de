import json
import os

import numpy as np
import pytest

from src.data import write_image
from src.heatmap import read_hmf1
from src.helpers import write_json
from src.model import build_autoencoder, build_network, default_autoencoder_config, save_checkpoint
from src.pipeline import BoundingBox, crop_disks, inspect, parse_boxes, threshold_from_report


def box(cx, cy, bw, bh, class_id=1):
    return BoundingBox(class_id, cx, cy, bw, bh, 0.9)


def test_parse_boxes_denormalizes():
    boxes = parse_boxes("1 0.5 0.5 0.2 0.1 0.9\n")
    assert boxes == [BoundingBox(1, 0.5, 0.5, 0.2, 0.1, 0.9, 1)]
    assert boxes[0].pixel_rect(200, 100) == (80, 45, 120, 55)


def test_parse_boxes_empty_and_blank_lines():
    assert parse_boxes("") == []
    assert [b.line_no for b in parse_boxes("\n1 0.5 0.5 0.2 0.2 1\n\n0 0.1 0.1 0.1 0.1 0.5\n")] == [2, 4]


@pytest.mark.parametrize("text,match", [
    ("1 0.5 0.5 0.2 0.1 0.9\n1 0.5 0.5 0.2 0.1\n", "line 2: expected 6 fields"),
    ("1 1.5 0.5 0.2 0.1 0.9", "line 1: cx=1.5"),
    ("disk 0.5 0.5 0.2 0.1 0.9", "line 1: fields must be"),
])
def test_parse_boxes_errors(text, match):
    with pytest.raises(ValueError, match=match):
        parse_boxes(text)


def test_full_box_crop_is_the_image(rng):
    image = rng.random((3, 20, 30))
    crops, skipped = crop_disks(image, [box(0.5, 0.5, 1.0, 1.0)])
    assert not skipped
    np.testing.assert_array_equal(crops[0].pixels, image)
    assert crops[0].rect == (0, 0, 30, 20)


def test_crop_is_clamped_to_the_image(rng):
    image = rng.random((3, 20, 30))
    crops, _ = crop_disks(image, [box(1.0, 0.5, 0.4, 0.5)])
    assert crops[0].rect == (24, 5, 30, 15)
    np.testing.assert_array_equal(crops[0].pixels, image[:, 5:15, 24:30])


def test_crop_recovers_painted_rectangle():
    image = np.zeros((3, 40, 60))
    image[:, 10:20, 15:35] = 1.0
    crops, _ = crop_disks(image, [box(25 / 60, 15 / 40, 20 / 60, 10 / 40)])
    assert crops[0].pixels.shape == (3, 10, 20)
    assert crops[0].pixels.all()


def test_skipped_boxes_are_reported():
    image = np.zeros((3, 10, 10))
    crops, skipped = crop_disks(image, [box(0.5, 0.5, 0.5, 0.5, class_id=0), box(0.5, 0.5, 0.0, 0.5),
                                        box(0.5, 0.5, 0.5, 0.5)])
    assert [c.index for c in crops] == [2]
    assert [s["index"] for s in skipped] == [0, 1]
    assert skipped[0]["reason"] == "class 0 is not a disk"
    assert "zero area" in skipped[1]["reason"]


def test_crops_are_preprocessed_for_the_model():
    image = np.full((3, 10, 10), 0.5)
    crops, _ = crop_disks(image, [box(0.5, 0.5, 0.5, 0.5)], np.full(3, 0.25), np.full(3, 0.5), (3, 16, 16))
    assert crops[0].input.shape == (1, 3, 16, 16)
    np.testing.assert_allclose(crops[0].input, 0.5)


@pytest.fixture
def scene(tmp_path, tiny_netcfg):
    rng = np.random.default_rng(11)
    image_path = str(tmp_path / "scene.png")
    write_image(image_path, rng.random((3, 32, 48)))
    ckpt = str(tmp_path / "net.occm")
    save_checkpoint(ckpt, build_network(tiny_netcfg),
                    {"channel_mean": [0.5, 0.5, 0.5], "channel_std": [0.25, 0.25, 0.25], "sigma": 2.5})
    return tmp_path, image_path, ckpt


def test_inspect_without_boxes(scene):
    tmp_path, image_path, ckpt = scene
    (tmp_path / "none.txt").write_text("")
    report = inspect(image_path, str(tmp_path / "none.txt"), ckpt, 0.5, str(tmp_path / "out"))
    assert report.summary == {"disks": 0, "anomalous": 0, "normal": 0, "skipped": 0}
    assert os.path.exists(tmp_path / "out" / "scene_inspection.json")


def test_inspect_scores_every_disk(scene):
    tmp_path, image_path, ckpt = scene
    (tmp_path / "boxes.txt").write_text("1 0.25 0.5 0.5 1.0 0.9\n0 0.5 0.5 0.1 0.1 0.4\n1 0.25 0.5 0.5 1.0 0.8\n")
    out = tmp_path / "out"
    report = inspect(image_path, str(tmp_path / "boxes.txt"), ckpt, 0.0, str(out), "eval:r.json#0")
    first, second = report.disks
    assert first.score == second.score
    assert first.anomalous and second.anomalous
    assert first.rect == [0, 0, 24, 32]
    assert report.summary == {"disks": 2, "anomalous": 2, "normal": 0, "skipped": 1}
    assert read_hmf1(str(out / first.heatmap)).shape == (16, 16)
    assert os.path.exists(out / "heatmaps" / "scene_disk002.png")

    doc = json.loads((out / "scene_inspection.json").read_text())
    assert doc["threshold_source"] == "eval:r.json#0"
    assert [d["index"] for d in doc["disks"]] == [0, 2]
    assert doc["skipped"][0]["line"] == 2


def test_inspect_threshold_splits_verdicts(scene):
    tmp_path, image_path, ckpt = scene
    (tmp_path / "boxes.txt").write_text("1 0.25 0.5 0.5 1.0 0.9\n")
    score = inspect(image_path, str(tmp_path / "boxes.txt"), ckpt, 0.0, str(tmp_path / "a")).disks[0].score
    assert not inspect(image_path, str(tmp_path / "boxes.txt"), ckpt, score * 2, str(tmp_path / "b")).disks[0].anomalous


def test_inspect_missing_files(scene):
    tmp_path, image_path, ckpt = scene
    with pytest.raises(FileNotFoundError, match="box file"):
        inspect(image_path, str(tmp_path / "missing.txt"), ckpt, 0.5, str(tmp_path))


def test_inspect_rejects_autoencoder(scene):
    tmp_path, image_path, _ = scene
    ae_path = str(tmp_path / "ae.occm")
    save_checkpoint(ae_path, build_autoencoder(default_autoencoder_config((3, 16, 16))))
    (tmp_path / "boxes.txt").write_text("")
    with pytest.raises(ValueError, match="one-class network"):
        inspect(image_path, str(tmp_path / "boxes.txt"), ae_path, 0.5, str(tmp_path))


def test_threshold_from_report(tmp_path):
    path = str(tmp_path / "eval_report.json")
    write_json(path, {"instances": [{"threshold": 0.25}, {"threshold": "inf"}]})
    assert threshold_from_report(path, 0) == (0.25, f"eval:{path}#0")
    with pytest.raises(ValueError, match="non-finite"):
        threshold_from_report(path, 1)
    with pytest.raises(ValueError, match="no instance 2"):
        threshold_from_report(path, 2)
