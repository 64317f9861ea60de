"""Desk-scale training trends on the default synthetic set (500/50 train, 100/50 test, 64x64).

Run with `pytest -m slow`. The trend runs go through the CLI so that their reports,
score dumps and checkpoints can be reused by the determinism, sweep and inspection tests.
"""
import json
import os

import numpy as np
import pytest

from src.data import SynthConfig, stack_maps, synth_generate, write_image
from src.evaluation import fcdd_scorer, gtmap_auc
from src.helpers import canonical_json, strip_timestamps
from src.main import main
from src.model import default_autoencoder_config, desk_config, load_checkpoint
from src.pipeline import inspect
from src.trainer import desk_train_config, normal_only, train, train_autoencoder

pytestmark = pytest.mark.slow

TREND_MODES = ("unsup_no_anom", "unsup_with_anom", "ss_modified")


@pytest.fixture(scope="module")
def synth():
    return synth_generate(SynthConfig())


def run_mode(out, mode, *extra):
    assert main(["train", "--mode", mode, "--out", out, *extra]) == 0
    assert main(["eval", "--out", out]) == 0
    return out


def read_report(out):
    with open(os.path.join(out, "eval_report.json")) as f:
        return json.load(f)


def instance_aucs(report):
    return [r["auc"] for r in report["instances"]]


@pytest.fixture(scope="module")
def trend_runs(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("trend"))
    return {mode: run_mode(os.path.join(root, mode), mode) for mode in TREND_MODES}


def test_unsupervised_loss_non_increasing_over_first_20_epochs(synth):
    out = train(normal_only(synth), desk_config(), desk_train_config(epochs=20, n_instances=5))
    monotone = [bool(np.all(np.diff(i.log.epoch_losses[:20]) <= 0)) for i in out]
    assert sum(monotone) >= 4, [i.log.epoch_losses for i in out]


def test_autoencoder_loss_decreases_over_20_epochs(synth):
    out = train_autoencoder(normal_only(synth), default_autoencoder_config(),
                            desk_train_config(epochs=20, n_instances=5))
    assert sum(i.log.epoch_losses[-1] < i.log.epoch_losses[0] for i in out) >= 4


def test_auc_ordering_across_supervision(trend_runs):
    means = {mode: read_report(out)["aggregate"]["auc_mean"] for mode, out in trend_runs.items()}
    assert means["unsup_no_anom"] <= means["unsup_with_anom"] <= means["ss_modified"], means
    assert means["ss_modified"] - means["unsup_no_anom"] >= 0.05, means


def test_semi_supervised_gtmap_auc(trend_runs, synth):
    report = read_report(trend_runs["ss_modified"])
    assert report["aggregate"]["gtmap_auc_mean"] >= 0.90

    net, extra = load_checkpoint(os.path.join(trend_runs["ss_modified"], "checkpoints", "instance_0.occm"))
    heatmaps = fcdd_scorer(synth, extra["sigma"])(net).heatmaps[:3]
    maps = stack_maps(synth.test[:3], heatmaps.shape[2:])
    assert maps.any() and not maps.all()

    pixels, truth = heatmaps.reshape(-1), maps.reshape(-1)
    pos, neg = np.sort(pixels[truth == 1]), np.sort(pixels[truth == 0])
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    oracle = (below.sum() + 0.5 * ties.sum()) / (pos.size * neg.size)
    assert gtmap_auc(list(heatmaps), list(maps)) == pytest.approx(oracle, abs=1e-12)


def test_five_training_anomalies_beat_none(trend_runs, tmp_path):
    reference = instance_aucs(read_report(trend_runs["unsup_no_anom"]))
    five = instance_aucs(read_report(run_mode(str(tmp_path / "five"), "ss_modified", "--train-anomalies", "5")))
    assert sum(a >= b for a, b in zip(five, reference)) >= 4, (five, reference)


def test_repeated_runs_are_byte_identical(trend_runs, tmp_path):
    for mode, first in trend_runs.items():
        second = run_mode(str(tmp_path / mode), mode)
        assert (canonical_json(strip_timestamps(read_report(first)))
                == canonical_json(strip_timestamps(read_report(second))))
        for k in range(5):
            name = f"scores_instance_{k}.csv"
            with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
                assert a.read() == b.read(), f"{mode}/{name}"


def test_anomalous_disk_outscores_normal_disk_in_aerial_scene(trend_runs, synth, tmp_path):
    normal = next(s for s in synth.test if s.label == 0)
    anomalous = next(s for s in synth.test if s.label == 1)
    scene = np.full((3, 96, 192), 0.5)
    scene[:, 16:80, 16:80] = normal.image
    scene[:, 16:80, 112:176] = anomalous.image
    image = str(tmp_path / "scene.png")
    write_image(image, scene)
    boxes = tmp_path / "scene.txt"
    boxes.write_text(f"1 0.25 0.5 {64 / 192} {64 / 96} 0.9\n"
                     f"1 0.75 0.5 {64 / 192} {64 / 96} 0.8\n")

    wins = 0
    for k in range(5):
        checkpoint = os.path.join(trend_runs["ss_modified"], "checkpoints", f"instance_{k}.occm")
        report = inspect(image, str(boxes), checkpoint, 0.0, str(tmp_path / f"inspect_{k}"))
        assert [d.rect for d in report.disks] == [[16, 16, 80, 80], [112, 16, 176, 80]]
        wins += report.disks[1].score > report.disks[0].score
    assert wins >= 4
