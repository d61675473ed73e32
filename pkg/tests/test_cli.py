import pytest

from layerfuse.cli import main
from layerfuse.fusion import FusionKind
from layerfuse.persistence import load_checkpoint


@pytest.fixture(scope="module")
def gen(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--count", "60", "--seed", "1", "--out", str(root / "train.jsonl")]) == 0
    assert main(["generate", "--count", "20", "--seed", "2", "--out", str(root / "val.jsonl")]) == 0
    (root / "run.cfg").write_text(
        f"data.train = {root / 'train.jsonl'}\ndata.val = {root / 'val.jsonl'}\ndata.test = {root / 'val.jsonl'}\n"
        "encoder.d = 16\nencoder.L = 2\nencoder.heads = 2\ntrain.epochs = 1\nseed = 5\n")
    return root


def test_train_flags_override_config(gen, tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--config", str(gen / "run.cfg"), "--encoder.d", "8", "--fusion.kind", "CoarseGrained",
                 "--out-dir", str(out)])
    assert code == 0
    _, meta = load_checkpoint(out / "checkpoint.lfck")
    assert meta["encoder"]["d"] == 8 and meta["fusion_kind"] == "CoarseGrained" and meta["seed"] == 5
    assert main(["train", "--config", str(gen / "run.cfg"), "--seed", "9", "--out-dir", str(out)]) == 0
    assert load_checkpoint(out / "checkpoint.lfck")[1]["seed"] == 9


def test_eval_and_analyze(gen, tmp_path, capsys):
    assert main(["train", "--config", str(gen / "run.cfg"), "--out-dir", str(tmp_path)]) == 0
    ck, data = str(tmp_path / "checkpoint.lfck"), str(gen / "val.jsonl")
    assert main(["eval", "--checkpoint", ck, "--data", data, "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "eval.csv").exists()
    capsys.readouterr()
    assert main(["analyze", "attention", "--checkpoint", ck, "--data", data, "--out", str(tmp_path / "a.csv")]) == 0
    assert "IoU>0" in capsys.readouterr().out
    assert main(["analyze", "pca", "--checkpoint", ck, "--data", data, "--sample-id", "3", "--source", "1",
                 "--out", str(tmp_path / "p.csv")]) == 0
    assert (tmp_path / "p.csv").read_text().startswith("region_id,x,y,iou_band")
    assert main(["analyze", "margin", "--checkpoint", ck, "--data", data, "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "margin.csv").read_text().startswith("sample_id,margin_top,margin_fused")
    assert main(["analyze", "pca", "--checkpoint", ck, "--data", data, "--sample-id", "999"]) == 1


def test_generate_with_spec_file(tmp_path):
    spec = tmp_path / "scene.spec"
    spec.write_text("n_min = 3\nn_max = 4\ncolors = red, blue\nnoise_sigma = 0.0\n")
    out = tmp_path / "d.jsonl"
    assert main(["generate", "--spec", str(spec), "--count", "5", "--seed", "0", "--out", str(out)]) == 0
    assert '"colors":["red","blue"]' in out.read_text().splitlines()[0]
    spec.write_text("sparkle = 3\n")
    assert main(["generate", "--spec", str(spec), "--count", "5", "--out", str(out)]) == 1


def test_unknown_flag_is_one_line(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--encoder.width", "3"])
    assert exc.value.code == 2
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


def test_runtime_error_is_one_line(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(tmp_path / "none")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("layerfuse eval: error:")


def test_gradcheck_gate(capsys, tmp_path):
    assert main(["gradcheck", "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    for kind in FusionKind:
        assert out.count(f"fusion/{kind.value} ") == 1
    assert "FAIL" not in out
    assert (tmp_path / "gradcheck.csv").exists()
    assert main(["gradcheck", "--threshold", "0", "--L", "1", "--d", "8"]) == 1


def test_gradcheck_enforces_small_config(capsys):
    assert main(["gradcheck", "--d", "64"]) == 1
    assert "limited" in capsys.readouterr().err
