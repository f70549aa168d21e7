import filecmp
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from hoirefine import cli, nn
from hoirefine.pipeline import Model, ModelConfig

TINY = {"channels": [4, 8], "depth_bins": 4, "feat_dim": 8, "width": 8, "heads": 2, "ff": 8, "layers": 1}


def run(*argv):
    return cli.main([str(a) for a in argv])


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(os.path.join(a, d), os.path.join(b, d))
                                               for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    assert run("gen", "--num", 6, "--seed", 7, "--out", d / "data") == 0
    return d


def test_gen_deterministic(work, tmp_path):
    assert run("gen", "--num", 6, "--seed", 7, "--out", tmp_path / "again") == 0
    assert same_tree(work / "data", tmp_path / "again")
    meta = json.loads((work / "data" / "meta.json").read_text())
    assert meta["seed"] == 7 and meta["scene_config"]["focal"] == 70.0


def test_gen_refuses_overwrite(work, capsys):
    assert run("gen", "--num", 2, "--out", work / "data") == 1
    err = capsys.readouterr().err.strip()
    assert err.count("\n") == 0 and "already exists" in err


def test_gen_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"focal": 70, "bogus": 1}))
    assert run("gen", "--config", cfg, "--num", 1, "--out", tmp_path / "d") == 1
    assert "bogus" in capsys.readouterr().err


def test_train_zero_epochs_is_init(work):
    out = work / "t0"
    assert run("train", "--data", work / "data", "--out", out, "--config", work / "tiny.json",
               "--epochs", 0, "--seed", 3) == 0
    meta, state = nn.read_checkpoint(out / "epoch_000")
    ref = Model(ModelConfig.from_dict(TINY), seed=3)
    for name, p in ref.store.items():
        np.testing.assert_array_equal(state[name], p.data.astype(np.float32))
    assert meta["init_seed"] == 3 and meta["dataset"]["seed"] == 7
    assert (out / "loss.csv").exists() and (out / "best").is_dir()


def test_train_deterministic(work):
    args = ("--data", work / "data", "--config", work / "tiny.json", "--epochs", 1, "--batch", 2)
    assert run("train", *args, "--out", work / "ta") == 0
    assert run("train", *args, "--out", work / "tb") == 0
    assert same_tree(work / "ta", work / "tb")


def test_eval_and_report(work, capsys):
    assert run("train", "--data", work / "data", "--out", work / "te", "--config", work / "tiny.json",
               "--epochs", 0) == 0
    rep = work / "r.json"
    assert run("eval", "--data", work / "data", "--ckpt", work / "te" / "best", "--report", rep) == 0
    assert run("eval", "--data", work / "data", "--ckpt", work / "te" / "best", "--report",
               work / "r2.json") == 0
    assert rep.read_bytes() == (work / "r2.json").read_bytes()
    d = json.loads(rep.read_text())
    assert d["meta"]["checkpoint"]["model"]["width"] == 8 and d["num_samples"] == 6
    capsys.readouterr()
    assert run("report", "--in", rep) == 0
    assert "cd_object" in capsys.readouterr().out


def test_eval_gt_as_pred(work):
    rep = work / "gt.json"
    assert run("eval", "--data", work / "data", "--gt-as-pred", "--report", rep) == 0
    agg = json.loads(rep.read_text())["aggregate"]
    assert agg["cd_human"] < 1e-6 and agg["cd_object"] < 1e-6
    assert agg["contact_rec_p"] == 1.0 and agg["contact_rec_r"] == 1.0


def test_eval_config_mismatch(work, tmp_path, capsys):
    ck = tmp_path / "ck"
    nn.save_checkpoint(Model(ModelConfig.from_dict(TINY)).store, ck,
                       {"model": dict(TINY, width=16, heads=2), "init_seed": 0})
    assert run("eval", "--data", work / "data", "--ckpt", ck, "--report", tmp_path / "r.json") == 1
    err = capsys.readouterr().err
    assert "error" in err and "cf." in err


def test_missing_inputs(work, tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 1
    assert "does not exist" in capsys.readouterr().err
    assert run("eval", "--data", work / "data", "--report", tmp_path / "r.json") == 1
    assert "--ckpt" in capsys.readouterr().err
    assert run("report", "--in", tmp_path / "missing.json") == 1


def test_sensitivity(work, capsys):
    assert run("train", "--data", work / "data", "--out", work / "ts", "--config", work / "tiny.json",
               "--epochs", 0) == 0
    prefix = work / "sens"
    assert run("sensitivity", "--ckpt", work / "ts" / "best", "--data", work / "data",
               "--sample", 1, "--patch", 32, "--stride", 16, "--out", prefix) == 0
    d = json.loads((work / "sens.json").read_text())
    assert np.array(d["grid"]).shape == (3, 3)
    assert (work / "sens.pgm").read_bytes().startswith(b"P5\n3 3\n255\n")
    assert run("sensitivity", "--ckpt", work / "ts" / "best", "--data", work / "data",
               "--sample", 99, "--out", work / "x") == 1
    assert "out of range" in capsys.readouterr().err


def test_bad_flag_exits_nonzero(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("train", "--data", tmp_path, "--out", tmp_path / "o", "--epochs", "many")
    assert exc.value.code != 0


def test_console_entry_point(tmp_path):
    env = dict(os.environ, HOIREFINE_LOG="info")
    p = subprocess.run([sys.executable, "-m", "hoirefine.cli", "gen", "--num", "1", "--out", str(tmp_path / "d")],
                       capture_output=True, text=True, env=env)
    assert p.returncode == 0 and "wrote 1 samples" in p.stderr
