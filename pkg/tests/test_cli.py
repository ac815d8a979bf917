import re
import shutil
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from glimpse_iqa.cli import cmd_eval, cmd_train, cmd_visualize, main
from glimpse_iqa.config import SEED_ENV
from glimpse_iqa.data import load_index_csv
from glimpse_iqa.gradcheck import gradcheck
from glimpse_iqa.imgproc import loc_to_pixel, local_contrast_normalize
from glimpse_iqa.net import ModelConfig, forward_episode, init_params, load_checkpoint, save_checkpoint

from test_train import TINY


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


@pytest.fixture
def toy_config(fixtures_dir, tmp_path):
    """The bundled toy config, copied so relative paths still hit the fixture."""
    path = tmp_path / "toy.ini"
    text = (fixtures_dir / "toy.ini").read_text()
    path.write_text(text.replace("root = synth30/index.csv",
                                 f"root = {fixtures_dir / 'synth30' / 'index.csv'}"))
    return path


def test_fixture_has_thirty_images(fixtures_dir):
    index = load_index_csv(fixtures_dir / "synth30" / "index.csv")
    assert len(index) == 30 and len(index.references) == 5


def test_train_smoke_writes_both_checkpoints(toy_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(toy_config), "--out", str(out)]) == 0
    assert "best.ckpt" in capsys.readouterr().out
    for name in ("best.ckpt", "last.ckpt", "metrics.csv"):
        assert (out / name).is_file()
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0] == "epoch,lr,sigma,epsilon,mean_loss,mean_reward,train_acc,val_srocc,val_lcc"
    assert len(rows) == 3
    _, _, meta = load_checkpoint(out / "last.ckpt")
    assert meta["epoch"] == 1
    assert not list(out.glob("*.tmp"))


def test_missing_dataset_fails_cleanly(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[data]\nsource = index\nroot = nowhere/index.csv\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ") and "does not exist" in err[0]
    assert not list(tmp_path.rglob("*.ckpt*"))


def test_bad_config_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nepochs = 2\nepoch = 3\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
    assert f"{cfg}:3" in capsys.readouterr().err


def test_train_metrics_byte_identical(toy_config, tmp_path):
    a = cmd_train(toy_config, tmp_path / "a")
    b = cmd_train(toy_config, tmp_path / "b")
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "best.ckpt").read_bytes() == (b / "best.ckpt").read_bytes()


def test_seed_flag_and_env_change_the_run(toy_config, tmp_path, monkeypatch):
    base = (cmd_train(toy_config, tmp_path / "a") / "metrics.csv").read_bytes()
    flag = (cmd_train(toy_config, tmp_path / "b", seed=11) / "metrics.csv").read_bytes()
    monkeypatch.setenv(SEED_ENV, "11")
    env = (cmd_train(toy_config, tmp_path / "c") / "metrics.csv").read_bytes()
    assert flag == env != base


def test_golden_toy_checkpoint(fixtures_dir, toy_config, tmp_path):
    report, out = cmd_eval(fixtures_dir / "toy.ckpt", toy_config, tmp_path / "eval")
    assert report.to_csv() == (fixtures_dir / "toy_report.csv").read_text()
    assert (out / "report.csv").read_text() == (fixtures_dir / "toy_report.csv").read_text()
    assert (out / "summary.txt").is_file() and (out / "confusion.csv").is_file()


def test_eval_twice_identical(fixtures_dir, toy_config, tmp_path, capsys):
    outputs = []
    for name in ("e1", "e2"):
        assert main(["eval", "--checkpoint", str(fixtures_dir / "toy.ckpt"), "--config",
                     str(toy_config), "--out", str(tmp_path / name)]) == 0
        outputs.append({p.name: p.read_bytes() for p in (tmp_path / name).iterdir()})
    assert outputs[0] == outputs[1] and len(outputs[0]) == 3
    assert "SROCC" in capsys.readouterr().out


def test_corrupted_checkpoint_refused(fixtures_dir, toy_config, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    data = bytearray((fixtures_dir / "toy.ckpt").read_bytes())
    data[-40] ^= 0x01
    bad.write_bytes(bytes(data))
    assert main(["eval", "--checkpoint", str(bad), "--config", str(toy_config),
                 "--out", str(tmp_path / "e")]) == 1
    assert "checksum" in capsys.readouterr().err
    assert not (tmp_path / "e").exists()


def test_shape_mismatch_prints_named_diff(fixtures_dir, toy_config, tmp_path, capsys):
    cfg = tmp_path / "wide.ini"
    cfg.write_text(toy_config.read_text().replace("rnn_hidden = 32", "rnn_hidden = 24"))
    assert main(["eval", "--checkpoint", str(fixtures_dir / "toy.ckpt"), "--config", str(cfg),
                 "--out", str(tmp_path / "e")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: checkpoint does not match config")
    assert "rnn1.W_hh" in err and "rnn2.W_gh" in err and "conv1.k3.weight" not in err


T5 = ModelConfig(patch=8, scales=(8, 16, 32), conv_channels=(8, 8, 8, 16), hidden=16,
                 rnn_hidden=32, n_classes=3, T=5, loc_init_scale=0.5)


@pytest.fixture
def t5_checkpoint(tmp_path):
    path = tmp_path / "t5.ckpt"
    save_checkpoint(path, init_params(T5, np.random.default_rng(4)), T5)
    return path


def test_visualize_contract(t5_checkpoint, fixtures_dir, tmp_path):
    image = fixtures_dir / "synth30" / "images" / "r000_t02_l3.png"
    svg_path = tmp_path / "scan.svg"
    assert main(["visualize", "--checkpoint", str(t5_checkpoint), "--image", str(image),
                 "--out", str(svg_path)]) == 0
    root = ET.fromstring(svg_path.read_text())
    ns = {"s": "http://www.w3.org/2000/svg"}
    w, h = int(root.get("width")), int(root.get("height"))
    groups = root.findall("s:g[@class='fixation']", ns)
    assert [g.get("data-step") for g in groups] == ["1", "2", "3", "4", "5"]
    assert [g.find("s:text", ns).text for g in groups] == ["1", "2", "3", "4", "5"]

    params, cfg, _ = load_checkpoint(t5_checkpoint)
    from glimpse_iqa.data import read_image
    gray = read_image(image)
    trace = forward_episode(params, local_contrast_normalize(gray)[None], np.zeros(2), None, config=cfg)
    for g, loc in zip(groups, trace.locations[:, 0]):
        rects = g.findall("s:rect", ns)
        assert len(rects) == 3
        for r in rects:
            x, y, rw, rh = (float(r.get(k)) for k in ("x", "y", "width", "height"))
            assert 0 <= x and 0 <= y and x + rw <= w and y + rh <= h and rw > 0 and rh > 0
        row, col = loc_to_pixel(loc, h, w)
        assert float(g.get("data-row")) == row and float(g.get("data-col")) == col
    # the locations are not all at the centre, so the contract is non-trivial
    assert len({g.get("data-row") for g in groups}) > 1


def test_visualize_deterministic_and_unreadable_image(t5_checkpoint, fixtures_dir, tmp_path, capsys):
    image = fixtures_dir / "synth30" / "images" / "r001_t00_l1.png"
    a = cmd_visualize(t5_checkpoint, image, tmp_path / "a.svg")
    b = cmd_visualize(t5_checkpoint, image, tmp_path / "b.svg")
    np.testing.assert_array_equal(a, b)
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not an image")
    assert main(["visualize", "--checkpoint", str(t5_checkpoint), "--image", str(junk),
                 "--out", str(tmp_path / "c.svg")]) == 1
    assert capsys.readouterr().err.startswith("error: ")


def test_gradcheck_negative_control_and_coverage():
    report = gradcheck(TINY, perturb={"rnn2.W_hh": 1.01})
    assert not report.passed and report.failures == ["rnn2.W_hh"]
    assert re.search(r"^rnn2\.W_hh .*FAIL$", report.table(), re.MULTILINE)
    names = [r.name for r in report.rows]
    assert names == list(init_params(TINY, np.random.default_rng(0)))
    assert len(names) == len(set(names))
    assert report.table().splitlines()[-1].startswith("FAIL")


def test_synth_verb(tmp_path):
    cfg = tmp_path / "s.ini"
    cfg.write_text("[data]\nn_refs = 3\nsize = 40\nlevels = 2\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
    index = load_index_csv(tmp_path / "ds" / "index.csv")
    assert len(index) == 12 and index.samples[0].load().shape == (40, 40)
    shutil.rmtree(tmp_path / "ds")
    cfg.write_text("[data]\nsource = tid2008\nroot = x\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 1


def test_missing_required_flag_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--config", "x.ini"])
    assert exc.value.code != 0
