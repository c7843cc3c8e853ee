import csv
import json
import shutil

import numpy as np
import pytest

from dendrite_cascade import cli
from dendrite_cascade.config import load_config
from dendrite_cascade.cpdn import load_model, save_model
from dendrite_cascade.evaluation import metrics_from_counts
from dendrite_cascade.hsr import load_hsr
from dendrite_cascade.pipeline import run_pipeline
from dendrite_cascade.synthgen import load_split, write_png
from oracles import FIXTURES

TINY = """
# small enough to train in seconds
image_size = 32
cores_min = 1
cores_max = 3
min_core_separation = 10
arm_length_min = 4
arm_length_max = 7
base_channels = 4
depth = 1
epochs1 = 2
epochs2 = 2
epochs_hsr = 1
hsr_channels = 4, 4, 4
crop_half_size = 8
patch_size = 32
seed = 5
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert run("synth", "--config", cfg, "--count", 10, "--out", root / "data") == 0
    assert run("train", "--config", cfg, "--data", root / "data", "--out", root / "models") == 0
    return root


def test_synth_split_and_echo(tiny):
    manifest = json.loads((tiny / "data" / "manifest.json").read_text())
    assert [len(manifest["split"][k]) for k in ("train", "val", "test")] == [6, 2, 2]
    assert load_config(tiny / "data" / "config.txt") == load_config(tiny / "tiny.cfg")


def test_synth_is_byte_identical(tiny, tmp_path):
    assert run("synth", "--config", tiny / "tiny.cfg", "--count", 10, "--out", tmp_path / "again") == 0
    for path in (tiny / "data").rglob("*"):
        if path.is_file():
            assert path.read_bytes() == (tmp_path / "again" / path.relative_to(tiny / "data")).read_bytes()


def test_unknown_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("alpha = 0.4\nalpah = 0.5\n")
    assert run("synth", "--config", bad, "--count", 10, "--out", tmp_path / "d") == 2
    assert "alpah" in capsys.readouterr().err


def test_unwritable_output_exit_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("synth", "--count", 10, "--out", blocker / "sub") == 3


def test_train_outputs(tiny):
    models = tiny / "models"
    for name in ("d1.ckpt", "d2.ckpt", "hsr.ckpt", "config.txt", "loss_d1.csv", "loss_d2.csv",
                 "loss_hsr.csv", "train_summary.csv", "loss_curves.png"):
        assert (models / name).exists(), name
    assert len(read_csv(models / "loss_d1.csv")) == 3
    assert load_model(models / "d1.ckpt").role == "D1"
    assert load_hsr(models / "hsr.ckpt").channels == (4, 4, 4)


def test_train_is_deterministic_and_resumable(tiny, tmp_path):
    cfg, data = tiny / "tiny.cfg", tiny / "data"
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path / "again", "--no-plots") == 0
    for name in ("d1.ckpt", "d2.ckpt", "hsr.ckpt"):
        assert (tmp_path / "again" / name).read_bytes() == (tiny / "models" / name).read_bytes()
    # pretend the run died after D1
    resumed = tmp_path / "resumed"
    resumed.mkdir()
    shutil.copy(tiny / "models" / "d1.ckpt", resumed / "d1.ckpt")
    before = (resumed / "d1.ckpt").read_bytes()
    assert run("train", "--config", cfg, "--data", data, "--out", resumed, "--resume", "--no-plots") == 0
    assert (resumed / "d1.ckpt").read_bytes() == before
    for name in ("d2.ckpt", "hsr.ckpt"):
        assert (resumed / name).read_bytes() == (tiny / "models" / name).read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_exit_4(tiny, tmp_path, capsys):
    cfg = tmp_path / "boom.cfg"
    cfg.write_text(TINY + "lr1 = 1e300\n")
    assert run("train", "--config", cfg, "--data", tiny / "data", "--out", tmp_path / "m", "--no-plots") == 4
    assert "[d1]" in capsys.readouterr().err


def test_checkpoint_mismatch_exit_5(tiny, tmp_path):
    broken = tmp_path / "models"
    shutil.copytree(tiny / "models", broken)
    shutil.copy(broken / "hsr.ckpt", broken / "d1.ckpt")
    assert run("eval", "--models", broken, "--data", tiny / "data") == 5
    blob = bytearray((tiny / "models" / "d2.ckpt").read_bytes())
    blob[-9] ^= 0xFF
    shutil.copy(tiny / "models" / "d1.ckpt", broken / "d1.ckpt")
    (broken / "d2.ckpt").write_bytes(bytes(blob))
    assert run("detect", "--models", broken, "--data", tiny / "data", "--out", tmp_path / "o") == 5


def test_empty_split_exit_6(tiny, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(tiny / "data", data)
    manifest = json.loads((data / "manifest.json").read_text())
    manifest["split"]["test"] = []
    (data / "manifest.json").write_text(json.dumps(manifest))
    assert run("eval", "--models", tiny / "models", "--data", data) == 6
    assert run("eval", "--models", tiny / "models", "--data", tmp_path / "nowhere") == 6


def test_eval_writes_pooled_counts(tiny, tmp_path):
    assert run("eval", "--models", tiny / "models", "--data", tiny / "data", "--out", tmp_path / "e") == 0
    rows = read_csv(tmp_path / "e" / "metrics.csv")
    per = read_csv(tmp_path / "e" / "per_image.csv")
    assert rows[0] == ["total", "tp", "fp", "recall", "precision", "fscore"]
    for col in (1, 2, 3):
        assert int(rows[1][col - 1]) == sum(int(r[col]) for r in per[1:])
    first = (tmp_path / "e" / "metrics.csv").read_bytes()
    assert run("eval", "--models", tiny / "models", "--data", tiny / "data", "--out", tmp_path / "e2") == 0
    assert (tmp_path / "e2" / "metrics.csv").read_bytes() == first


def test_eval_fixture(capsys, tmp_path):
    assert run("eval", "--fixture", FIXTURES / "comparison_counts.csv", "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "recall=0.9638 precision=0.9710 fscore=0.9674" in out
    assert len(read_csv(tmp_path / "fixture_metrics.csv")) == 4


def test_detect_matches_pipeline(tiny, tmp_path):
    out = tmp_path / "det"
    assert run("detect", "--models", tiny / "models", "--data", tiny / "data", "--out", out) == 0
    d1, d2 = load_model(tiny / "models" / "d1.ckpt"), load_model(tiny / "models" / "d2.ckpt")
    hsr = load_hsr(tiny / "models" / "hsr.ckpt")
    cfg = load_config(tiny / "models" / "config.txt")
    for s in load_split(tiny / "data", "test"):
        rows = read_csv(out / s.name / "pred.csv")
        assert rows[0] == ["row", "col", "stage"]
        res = run_pipeline(s.image, d1, d2, hsr, cfg.pipeline)
        esd = [(int(r), int(c)) for r, c, st in rows[1:] if st == "esd"]
        hsd = [(int(r), int(c)) for r, c, st in rows[1:] if st == "hsd"]
        assert esd == res.esd_points and hsd == res.hsd_points
        assert not set(esd) & set(hsd)
        from PIL import Image
        im = Image.open(out / s.name / "overlay.png")
        assert im.mode == "RGB"


def test_detect_empty_scene(tiny, tmp_path):
    # detectors that never fire, so the scene has nothing to report
    quiet = tmp_path / "quiet"
    shutil.copytree(tiny / "models", quiet)
    for name in ("d1.ckpt", "d2.ckpt"):
        model = load_model(quiet / name)
        model.params["head.b"].data[...] = -50.0
        save_model(model, quiet / name)
    blank = tmp_path / "blank.png"
    write_png(blank, np.zeros((3, 32, 32)))
    assert run("detect", "--models", quiet, "--out", tmp_path / "o", blank) == 0
    assert read_csv(tmp_path / "o" / "blank" / "pred.csv") == [["row", "col", "stage"]]


def test_sweep_crop_rows(tiny, tmp_path):
    assert run("sweep", "crop", "--models", tiny / "models", "--data", tiny / "data",
               "--out", tmp_path, "--settings", "none", "16x16") == 0
    rows = read_csv(tmp_path / "sweep_crop.csv")
    assert [r[0] for r in rows] == ["setting", "none", "16x16"]
    assert (tmp_path / "sweep_crop.png").exists()


def test_sweep_intensity_default_rows(tiny, tmp_path):
    assert run("sweep", "intensity", "--models", tiny / "models", "--data", tiny / "data",
               "--out", tmp_path, "--no-plots") == 0
    assert [r[0] for r in read_csv(tmp_path / "sweep_intensity.csv")][1:] == ["0", "128", "255", "gaussian",
                                                                              "0+gaussian"]


def test_ablate_rows_and_check(tiny, tmp_path, monkeypatch):
    assert run("ablate", "--models", tiny / "models", "--data", tiny / "data", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert rows[0] == ["setting", "recall", "precision", "fscore"]
    assert [r[0] for r in rows[1:]] == ["ESD", "+HSD", "+HSR"]

    def worse(*args, **kwargs):
        return {"ESD": metrics_from_counts(10, 8, 0), "+HSD": metrics_from_counts(10, 7, 0),
                "+HSR": metrics_from_counts(10, 7, 0)}

    monkeypatch.setattr(cli, "ablation_run", worse)
    assert run("ablate", "--models", tiny / "models", "--data", tiny / "data", "--check") == 7
    assert run("ablate", "--models", tiny / "models", "--data", tiny / "data") == 0
