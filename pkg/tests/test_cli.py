import os

import numpy as np
import pytest

from headavatar.cli import main
from headavatar.train import load_checkpoint

TINY_CFG = """plane_res = 16
plane_channels = 4
enc_channels = 4 6 8
emb_dim = 4
w_dim = 8
decoder_hidden = 16
feat_dim = 4
pe_bands = 2
n_coarse = 8
n_fine = 4
ray_batch = 64
log_every = 0
"""


def _tree_bytes(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.txt").write_text("n_frames = 4\nn_test = 1\nimage_size = 32\n")
    (root / "train.txt").write_text(TINY_CFG)
    assert main(["synth", "--config", str(root / "synth.txt"), "--seed", "7", "--out", str(root / "data")]) == 0
    return root


def test_gradcheck_default_suite_passes():
    assert main(["gradcheck"]) == 0


def test_synth_is_reproducible(workdir):
    assert main(["synth", "--config", str(workdir / "synth.txt"), "--seed", "7", "--out",
                 str(workdir / "again")]) == 0
    assert _tree_bytes(workdir / "data") == _tree_bytes(workdir / "again")


def test_unknown_flag_is_usage_error(capsys):
    assert main(["synth", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_command_is_usage_error():
    assert main([]) == 1


def test_stage2_without_checkpoint_exits_1(workdir, capsys):
    rc = main(["train", "--stage", "2", "--data", str(workdir / "data"), "--out", str(workdir / "nothing")])
    assert rc == 1
    assert "stage-1 checkpoint" in capsys.readouterr().err


def test_missing_dataset_is_runtime_failure(workdir):
    assert main(["train", "--data", str(workdir / "nope"), "--out", str(workdir / "x")]) == 2


def test_bad_config_is_usage_error(workdir):
    (workdir / "bad.txt").write_text("condition_mode = nonsense\n")
    rc = main(["train", "--config", str(workdir / "bad.txt"), "--data", str(workdir / "data"), "--out",
               str(workdir / "bad")])
    assert rc == 1


def test_full_pipeline(workdir):
    data, run = str(workdir / "data"), str(workdir / "run")
    cfg = str(workdir / "train.txt")
    assert main(["train", "--stage", "1", "--config", cfg, "--data", data, "--out", run, "--iters", "2"]) == 0
    assert main(["train", "--stage", "2", "--data", data, "--out", run, "--iters", "1"]) == 0
    state = load_checkpoint(os.path.join(run, "stage2.havc"))
    assert state.stage == 2 and state.iteration == 3
    header = open(os.path.join(run, "losses_stage2.tsv")).readline()
    assert "recon" in header and "adv_d" in header
    ck = os.path.join(run, "stage2.havc")
    assert main(["render", "--checkpoint", ck, "--data", data, "--frame", "1", "--out", run + "/render"]) == 0
    assert os.path.exists(os.path.join(run, "render", "frame1_rgb.png"))
    assert os.path.exists(os.path.join(run, "render", "frame1_feature.fmap"))
    assert os.path.exists(os.path.join(run, "render", "weights.wvol"))
    assert main(["eval", "--checkpoint", ck, "--data", data, "--out", run + "/eval"]) == 0
    assert os.path.exists(os.path.join(run, "eval", "metrics.tsv"))
    assert main(["extract-mesh", "--checkpoint", ck, "--data", data, "--resolution", "12", "--iso", "0.5",
                 "--out", run + "/mesh"]) == 0
    assert os.path.exists(os.path.join(run, "mesh", "frame0.obj"))
    drive = workdir / "drive.txt"
    drive.write_text("\n".join(" ".join(map(str, np.r_[np.zeros(8), [0.1, 0, 0, 0, 0, 0]])) for _ in range(2)))
    assert main(["reenact", "--checkpoint", ck, "--data", data, "--driving", str(drive), "--out",
                 run + "/reenact"]) == 0
    assert sorted(os.listdir(os.path.join(run, "reenact"))) == ["frame0000.png", "frame0001.png"]
    drive.write_text("0.1 0.2\n")
    assert main(["reenact", "--checkpoint", ck, "--data", data, "--driving", str(drive), "--out",
                 run + "/reenact2"]) == 1
