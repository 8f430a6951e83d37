import glob
import json
import os

import numpy as np
import pytest

from ddpm_cd import data
from ddpm_cd.cli import main
from ddpm_cd.config import load_config, profile
from ddpm_cd.errors import ConfigError

TINY = [
    "--set", "denoiser.base_width=4", "--set", "denoiser.channel_mults=1,2,2,2,2",
    "--set", "schedule.T=20", "--set", "pretrain.steps=4", "--set", "pretrain.batch_size=2",
    "--set", "pretrain.corpus_size=8", "--set", "pretrain.image_size=16", "--set", "pretrain.log_every=2",
    "--set", "data.image_size=16", "--set", "data.patch_size=16", "--set", "data.n_train=4",
    "--set", "data.n_val=2", "--set", "data.n_test=2", "--set", "cd.epochs=2", "--set", "head.reduction=4",
    "--set", "cd.timesteps=2,4,16",
]


def run(tmp_path, *argv):
    code = main([argv[0], "--output-root", str(tmp_path / "runs"), *TINY, *argv[1:]])
    dirs = sorted(glob.glob(str(tmp_path / "runs" / f"{argv[0]}-*")), key=os.path.getmtime)
    return code, dirs[-1] if dirs else None


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    code, d = run(tmp, "pretrain")
    assert code == 0
    return os.path.join(d, "denoiser.ddpmcd")


def test_pretrain_writes_run_directory(checkpoint):
    d = os.path.dirname(checkpoint)
    for name in ("config.ini", "run.log", "losses.txt", "denoiser.ddpmcd"):
        assert os.path.exists(os.path.join(d, name))
    assert not os.path.exists(os.path.join(d, "FAILED"))
    cfg = load_config(os.path.join(d, "config.ini"))
    assert cfg.denoiser.base_width == 4 and cfg.schedule.T == 20


def test_sample_and_extract(tmp_path, checkpoint):
    code, d = run(tmp_path, "sample", "--checkpoint", checkpoint, "-n", "2")
    assert code == 0 and len(glob.glob(os.path.join(d, "sample_*.png"))) == 2
    code, d = run(tmp_path, "extract-features", "--checkpoint", checkpoint, "--pair", "1")
    assert code == 0
    assert len(glob.glob(os.path.join(d, "viz", "*.png"))) == 2 * 3 * 5
    assert len(glob.glob(os.path.join(d, "cache", "*"))) == 2


def test_train_then_eval(tmp_path, checkpoint, capsys):
    code, d = run(tmp_path, "train-cd", "--checkpoint", checkpoint)
    assert code == 0
    epochs = json.load(open(os.path.join(d, "epochs.json")))
    assert len(epochs) == 2 and epochs[-1]["lr_end"] == 0.0 and "f1" in epochs[0]["val"]
    head = os.path.join(d, "head.ddpmcd")
    code, d2 = run(tmp_path, "eval", "--checkpoint", checkpoint, "--head", head, "--save-predictions")
    assert code == 0
    train_metrics = json.load(open(os.path.join(d, "test_metrics.json")))
    eval_metrics = json.load(open(os.path.join(d2, "metrics.json")))
    assert train_metrics["counts"] == eval_metrics["counts"]


def test_eval_perfect_predictions(tmp_path, capsys):
    ds = data.synth_cd_dataset(3, 16, 0.2, seed=0)
    root = tmp_path / "ds"
    data.write_manifest(root, {"train": ds[:1], "val": ds[1:2], "test": ds[2:]})
    pred = tmp_path / "pred"
    pred.mkdir()
    data.save_mask(pred / f"{ds[2].id}.png", ds[2].mask)
    code, d = run(tmp_path, "eval", "--predictions", str(pred), "--set", f"data.root={root}")
    assert code == 0
    assert "100.00" in capsys.readouterr().out.splitlines()[-1]
    assert json.load(open(os.path.join(d, "metrics.json")))["f1"] == 1.0


def test_ablation_table(tmp_path, checkpoint, capsys):
    code, d = run(tmp_path, "ablate-timesteps", "--checkpoint", checkpoint, "--tsets", "2;2,4")
    assert code == 0
    lines = open(os.path.join(d, "ablation.txt")).read().splitlines()
    assert lines[0].split() == ["timesteps", "F1", "IoU", "OA"]
    assert [l.split()[0] for l in lines[2:]] == ["2", "2,4"]
    assert all(len(l.split()) == 4 for l in lines[2:])


@pytest.mark.parametrize("fixture", ["overlap", "missing", "badlabel"])
def test_malformed_manifests_exit_2(tmp_path, fixture):
    from PIL import Image
    ds = data.synth_cd_dataset(3, 16, 0.2, seed=0)
    root = tmp_path / fixture
    data.write_manifest(root, {"train": ds[:1], "val": ds[1:2], "test": ds[2:]})
    if fixture == "overlap":
        with open(root / "test.txt", "a") as fh:
            fh.write(f"{ds[0].id}.png\n")
    elif fixture == "missing":
        (root / "A" / f"{ds[1].id}.png").unlink()
    else:
        arr = np.zeros((16, 16), np.uint8)
        arr[0, 0] = 37
        Image.fromarray(arr, mode="L").save(root / "label" / f"{ds[2].id}.png")
    code, d = run(tmp_path, "make-synthetic", "--set", f"data.root={root}")
    assert code == 2
    assert os.path.exists(os.path.join(d, "FAILED"))


def test_exit_codes(tmp_path, monkeypatch):
    assert main(["no-such-command"]) == 1
    assert main(["pretrain", "--output-root", str(tmp_path), "--set", "data.image_size=20"]) == 2
    monkeypatch.setenv("DDPM_CD_OUTPUT", str(tmp_path / "env"))
    assert main(["make-synthetic", "--set", "data.n_train=1", "--set", "data.n_val=1",
                 "--set", "data.n_test=1"]) == 0
    assert glob.glob(str(tmp_path / "env" / "make-synthetic-*"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exits_3(tmp_path):
    code, d = run(tmp_path, "pretrain", "--set", "pretrain.lr=1e30", "--set", "pretrain.warmup_steps=0",
                  "--set", "pretrain.grad_clip=0", "--set", "pretrain.steps=6")
    assert code == 3 and os.path.exists(os.path.join(d, "FAILED"))


def test_config_profiles_and_overrides(tmp_path):
    full = profile("full")
    assert (full.schedule.T, full.data.image_size, full.cd.epochs) == (1000, 256, 120)
    assert profile().cd_timesteps() == (10, 20, 80)
    p = tmp_path / "c.ini"
    p.write_text("[cd]\nepochs = 7\n[run]\nseed = 3\n")
    cfg = load_config(str(p), ["cd.epochs=9"])
    assert cfg.cd.epochs == 9 and cfg.run.seed == 3
    for bad in (["nosection=1"], ["cd.nokey=1"], ["cd.epochs=abc"]):
        with pytest.raises(ConfigError):
            load_config(None, bad)
    assert load_config(None, [], "desk").to_ini() == load_config(None, []).to_ini()
