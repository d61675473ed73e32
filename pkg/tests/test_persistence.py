import json

import numpy as np
import pytest

from layerfuse.numeric import ParamStore
from layerfuse.persistence import (CheckpointFormatError, CorruptCheckpointError, DatasetError,
                                   DatasetVersionError, RunConfig, load_checkpoint, load_dataset,
                                   parse_config_text, save_checkpoint)
from layerfuse.synthgen import SceneSpec, generate_dataset


@pytest.fixture
def store():
    rng = np.random.default_rng(0)
    return ParamStore({"b": rng.normal(size=(3, 4)), "a.x": rng.normal(size=7), "s": np.array(2.5),
                       "z": np.zeros((2, 0, 3))})


def test_round_trip_is_bitwise(tmp_path, store):
    save_checkpoint(store, {"seed": 3, "note": "x"}, tmp_path / "c.lfck")
    loaded, meta = load_checkpoint(tmp_path / "c.lfck")
    assert loaded.equals(store)
    assert meta == {"seed": 3, "note": "x"}
    save_checkpoint(loaded, meta, tmp_path / "d.lfck")
    assert (tmp_path / "c.lfck").read_bytes() == (tmp_path / "d.lfck").read_bytes()


def test_truncated_checkpoint(tmp_path, store):
    path = tmp_path / "c.lfck"
    save_checkpoint(store, {}, path)
    raw = path.read_bytes()
    for cut in (2, 10, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_wrong_magic_names_bytes(tmp_path, store):
    path = tmp_path / "c.lfck"
    save_checkpoint(store, {}, path)
    path.write_bytes(b"PK\x03\x04" + path.read_bytes()[4:])
    with pytest.raises(CheckpointFormatError, match=r"PK\\x03\\x04"):
        load_checkpoint(path)


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "d.jsonl"
    generate_dataset(SceneSpec(), 12, 0, path)
    return path


def test_generated_dataset_loads_in_order(dataset):
    header, samples = load_dataset(dataset)
    assert [s.id for s in samples] == list(range(12))
    assert header["grammar_version"] == 1


def _rewrite(path, lineno, edit):
    lines = path.read_text().splitlines()
    obj = json.loads(lines[lineno - 1])
    edit(obj)
    lines[lineno - 1] = json.dumps(obj)
    path.write_text("\n".join(lines) + "\n")


def test_degenerate_box_cites_line(dataset):
    def flip(rec):
        box = rec["regions"][1]["box"]
        box[0], box[2] = box[2], box[0]

    _rewrite(dataset, 5, flip)
    with pytest.raises(DatasetError, match=r"d\.jsonl:5"):
        load_dataset(dataset)


def test_header_version_mismatch(dataset):
    _rewrite(dataset, 1, lambda h: h.update(grammar_version=2))
    with pytest.raises(DatasetVersionError):
        load_dataset(dataset)


@pytest.mark.parametrize("edit", [
    lambda r: r.update(tokens=[999]),
    lambda r: r.update(target_index=50),
    lambda r: r.pop("tokens"),
    lambda r: r["regions"][0].update(features=[1.0]),
])
def test_bad_records(dataset, edit):
    _rewrite(dataset, 3, edit)
    with pytest.raises(DatasetError, match=":3"):
        load_dataset(dataset)


def test_config_round_trip_and_errors():
    cfg = parse_config_text("# run\nencoder.d = 32\nfusion.kind = TopLayer\noptim.lr = 0.01\nseed = 7\n")
    assert (cfg.encoder.d, cfg.fusion.kind, cfg.optim.lr, cfg.seed) == (32, "TopLayer", 0.01, 7)
    again = parse_config_text(cfg.dumps())
    assert again.as_dict() == cfg.as_dict()
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("encoder.width = 3")
    with pytest.raises(ValueError):
        parse_config_text("encoder.d = many")
    bad = RunConfig()
    bad.fusion.kind = "Nope"
    with pytest.raises(ValueError):
        bad.validate()
