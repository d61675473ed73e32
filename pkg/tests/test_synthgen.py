import hashlib
import json
from collections import Counter

import numpy as np
import pytest

from layerfuse.head import Box
from layerfuse.rng import Rng
from layerfuse.synthgen import (CATEGORIES, COLORS, ORDINALS, SceneSpec, build_vocab, generate_dataset,
                                generate_sample, generate_scene, render_command)

POSITION_WORDS = {("on", "the", "left"): "left", ("on", "the", "right"): "right",
                  ("in", "the", "middle"): "middle", ("up", "ahead"): "ahead"}


def oracle_matches(words, regions):
    """Regions satisfying a command, evaluated directly from the words and region attributes."""
    cat = next(w for w in words if w in CATEGORIES)
    color = next((w for w in words if w in COLORS), None)
    ordinal = next((ORDINALS.index(w) + 1 for w in words if w in ORDINALS), None)
    position = None
    for phrase, name in POSITION_WORDS.items():
        k = len(phrase)
        if tuple(words[-k:]) == phrase:
            position = name

    def where(box):
        cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
        if cy < 0.35:
            return "ahead"
        return "left" if cx < 1 / 3 else "right" if cx > 2 / 3 else "middle"

    def rank(i):
        same = sorted((j for j, r in enumerate(regions) if r.category == cat),
                      key=lambda j: ((regions[j].box.x1 + regions[j].box.x2) / 2, j))
        return same.index(i) + 1

    hits = [i for i, r in enumerate(regions) if r.category == cat
            and (color is None or r.color == color)
            and (position is None or where(r.box) == position)
            and (ordinal is None or rank(i) == ordinal)]
    return hits


def test_every_command_singles_out_the_target():
    vocab = build_vocab()
    spec = SceneSpec()
    kinds = Counter()
    for i in range(600):
        s = generate_sample(spec, 123, i, vocab)
        words = [vocab[t] for t in s.tokens]
        assert oracle_matches(words, s.regions) == [s.target_index], words
        kinds["ordinal" if any(w in ORDINALS for w in words) else
              "color" if any(w in COLORS for w in words) else "category"] += 1
    # the default distractor policy rules out bare-category commands
    assert kinds["category"] == 0 and kinds["ordinal"] > 0


def test_single_region_scene():
    spec = SceneSpec(n_min=1, n_max=1, distractor_policy=0)
    vocab = build_vocab()
    s = generate_sample(spec, 0, 0, vocab)
    words = [vocab[t] for t in s.tokens]
    assert s.n == 1 and s.target_index == 0
    assert not any(w in ORDINALS for w in words)


def test_noise_free_features_are_one_hot():
    spec = SceneSpec(noise_sigma=0.0)
    regions, _ = generate_scene(spec, Rng(4))
    for r in regions:
        f = r.features
        assert set(np.unique(f)) == {0.0, 1.0}
        assert f[:8].sum() == 1 and f[8:].sum() == 1
        assert CATEGORIES[int(np.argmax(f[:8]))] == r.category
        assert COLORS[int(np.argmax(f[8:]))] == r.color


def test_distractors_share_target_category():
    spec = SceneSpec()
    for seed in range(200):
        regions, target = generate_scene(spec, Rng(seed))
        same = sum(r.category == regions[target].category for j, r in enumerate(regions) if j != target)
        assert same >= 2
        assert spec.n_min <= len(regions) <= spec.n_max


def test_same_seed_same_scene_and_tokens():
    spec, vocab = SceneSpec(), build_vocab()
    a, b = generate_sample(spec, 5, 17, vocab), generate_sample(spec, 5, 17, vocab)
    assert a.to_record() == b.to_record()
    regions, target = generate_scene(spec, Rng(9))
    assert render_command(regions, target, Rng(1), vocab) == render_command(regions, target, Rng(1), vocab)


def test_dataset_bytes_reproducible(tmp_path, monkeypatch):
    spec = SceneSpec()
    generate_dataset(spec, 40, 3, tmp_path / "a.jsonl")
    generate_dataset(spec, 40, 3, tmp_path / "b.jsonl")
    monkeypatch.setenv("THREADS", "2")
    generate_dataset(spec, 40, 3, tmp_path / "c.jsonl")
    a = (tmp_path / "a.jsonl").read_bytes()
    assert a == (tmp_path / "b.jsonl").read_bytes() == (tmp_path / "c.jsonl").read_bytes()


def test_count_zero_rejected(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(SceneSpec(), 0, 1, tmp_path / "x.jsonl")


def test_disjoint_seeds_share_no_samples(tmp_path):
    spec = SceneSpec()
    generate_dataset(spec, 300, 1, tmp_path / "train.jsonl")
    generate_dataset(spec, 300, 2, tmp_path / "val.jsonl")

    def digests(path):
        out = set()
        for line in path.read_text().splitlines()[1:]:
            rec = json.loads(line)
            del rec["id"], rec["seed"]
            out.add(hashlib.sha256(json.dumps(rec, sort_keys=True).encode()).hexdigest())
        return out

    train, val = digests(tmp_path / "train.jsonl"), digests(tmp_path / "val.jsonl")
    assert len(train) == 300 and len(val) == 300
    assert not train & val


def test_category_only_baseline_stays_near_chance():
    """Guessing uniformly among regions of the named category hits about 1/(distractors+1)."""
    spec, vocab = SceneSpec(), build_vocab()
    expected = []
    for i in range(2000):
        s = generate_sample(spec, 77, i, vocab)
        same = sum(r.category == s.regions[s.target_index].category for r in s.regions)
        expected.append(1 / same)
    assert np.mean(expected) <= 1 / (spec.distractor_policy + 1) + 1e-12


def test_vocab_covers_all_words():
    vocab = build_vocab()
    assert len(vocab) == len(set(vocab))
    for w in CATEGORIES + COLORS + ORDINALS:
        assert w in vocab


def test_bad_specs_rejected():
    with pytest.raises(ValueError):
        SceneSpec(n_min=5, n_max=3)
    with pytest.raises(ValueError):
        SceneSpec(n_max=13)
    with pytest.raises(ValueError):
        SceneSpec(n_min=2, distractor_policy=2)
