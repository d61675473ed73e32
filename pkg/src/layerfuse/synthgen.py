"""Seeded synthetic grounding scenes with template commands.

Each region is an (category, color) object with a box; its feature vector is
one-hot(category) ++ one-hot(color) plus gaussian noise.  Commands follow
``[FILLER] ACTION the [ORDINAL] COLOR CATEGORY [POSITION]`` and are always
checked by brute force to select exactly one region.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .head import Box, iou
from .rng import Rng, derive_seed

FORMAT_VERSION = 1
GRAMMAR_VERSION = 1

CATEGORIES = ("car", "truck", "bus", "van", "bicycle", "pedestrian", "barrier", "cone")
COLORS = ("red", "blue", "green", "white", "black", "yellow")
ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth",
            "seventh", "eighth", "ninth", "tenth", "eleventh", "twelfth")
ACTIONS = (("follow",), ("stop", "behind"), ("park", "near"), ("pass",), ("approach",),
           ("wait", "for"), ("turn", "toward"), ("pick", "up"), ("get", "close", "to"),
           ("drive", "past"), ("yield", "to"))
FILLERS = (("please",), ("now",), ("slowly",), ("carefully",), ("when", "it", "is", "safe", ","))
POSITIONS = {
    "left": ("on", "the", "left"),
    "right": ("on", "the", "right"),
    "middle": ("in", "the", "middle"),
    "ahead": ("up", "ahead"),
}
TEMPLATES = (
    "[FILLER] ACTION the CATEGORY",
    "[FILLER] ACTION the COLOR CATEGORY",
    "[FILLER] ACTION the COLOR CATEGORY POSITION",
    "[FILLER] ACTION the ORDINAL COLOR CATEGORY",
)


def build_vocab(categories: Sequence[str] = CATEGORIES, colors: Sequence[str] = COLORS) -> list[str]:
    words: list[str] = []
    groups = [w for phrase in ACTIONS for w in phrase]
    groups += [w for phrase in FILLERS for w in phrase]
    groups += ["the", *ORDINALS, *colors, *categories]
    groups += [w for phrase in POSITIONS.values() for w in phrase]
    for w in groups:
        if w not in words:
            words.append(w)
    return words


class InfeasibleSceneError(RuntimeError):
    pass


class RenderError(RuntimeError):
    pass


@dataclass
class SceneSpec:
    n_min: int = 6
    n_max: int = 12
    categories: tuple[str, ...] = CATEGORIES
    colors: tuple[str, ...] = COLORS
    distractor_policy: int = 2
    noise_sigma: float = 0.1
    box_min: float = 0.08
    box_max: float = 0.3
    max_overlap: float = 0.7
    max_retries: int = 1000

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.colors = tuple(self.colors)
        if len(self.categories) < 2 or len(self.colors) < 2:
            raise ValueError("need at least 2 categories and 2 colors")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError(f"bad region count range [{self.n_min}, {self.n_max}]")
        if self.n_max > len(ORDINALS):
            raise ValueError(f"at most {len(ORDINALS)} regions supported")
        if self.distractor_policy < 0 or (self.n_min > 1 and self.distractor_policy >= self.n_min):
            raise ValueError("distractor_policy must be smaller than the region count")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 < self.box_min <= self.box_max < 1:
            raise ValueError("box size range must satisfy 0 < box_min <= box_max < 1")

    @property
    def feature_dim(self) -> int:
        return len(self.categories) + len(self.colors)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class RegionProposal:
    box: Box
    features: np.ndarray
    category: str | None = None
    color: str | None = None


@dataclass
class GroundingSample:
    id: int
    regions: list[RegionProposal]
    tokens: list[int]
    target_index: int
    seed: int = 0
    grammar_version: int = GRAMMAR_VERSION

    @property
    def target_box(self) -> Box:
        return self.regions[self.target_index].box

    @property
    def n(self) -> int:
        return len(self.regions)

    def iou_targets(self) -> np.ndarray:
        gt = self.target_box
        return np.array([iou(r.box, gt) for r in self.regions])

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "regions": [{"box": r.box.as_list(), "features": [float(x) for x in r.features],
                         "category": r.category, "color": r.color} for r in self.regions],
            "tokens": list(self.tokens),
            "target_index": self.target_index,
            "grammar_version": self.grammar_version,
            "seed": self.seed,
        }


# ------------------------------------------------------------------- predicate

def position_of(box: Box) -> str:
    cx, cy = box.center
    if cy < 0.35:
        return "ahead"
    if cx < 1 / 3:
        return "left"
    if cx > 2 / 3:
        return "right"
    return "middle"


def ordinal_rank(boxes: Sequence[Box], categories: Sequence[str], index: int) -> int:
    """1-based left-to-right rank of region ``index`` among regions of its category."""
    same = [i for i, c in enumerate(categories) if c == categories[index]]
    same.sort(key=lambda i: (boxes[i].center[0], i))
    return same.index(index) + 1


@dataclass(frozen=True)
class Description:
    category: str
    color: str | None = None
    position: str | None = None
    ordinal: int | None = None


def satisfies(desc: Description, boxes, categories, colors, index: int) -> bool:
    if categories[index] != desc.category:
        return False
    if desc.color is not None and colors[index] != desc.color:
        return False
    if desc.position is not None and position_of(boxes[index]) != desc.position:
        return False
    if desc.ordinal is not None and ordinal_rank(boxes, categories, index) != desc.ordinal:
        return False
    return True


def matching_regions(desc: Description, boxes, categories, colors) -> list[int]:
    return [i for i in range(len(boxes)) if satisfies(desc, boxes, categories, colors, i)]


def parse_command(words: Sequence[str]) -> Description:
    """Recover the description from a rendered command (inverse of the template)."""
    words = list(words)
    try:
        i = words.index("the")
    except ValueError as exc:
        raise RenderError(f"no determiner in command {words}") from exc
    rest = words[i + 1:]
    ordinal = None
    if rest and rest[0] in ORDINALS:
        ordinal = ORDINALS.index(rest[0]) + 1
        rest = rest[1:]
    color = None
    tail_pos = None
    for name, phrase in POSITIONS.items():
        k = len(phrase)
        if tuple(rest[-k:]) == phrase and len(rest) > k:
            tail_pos = name
            rest = rest[:-k]
            break
    if len(rest) == 2:
        color, category = rest
    elif len(rest) == 1:
        category = rest[0]
    else:
        raise RenderError(f"cannot parse object phrase {rest}")
    return Description(category, color, tail_pos, ordinal)


# -------------------------------------------------------------------- generation

def _sample_box(spec: SceneSpec, rng: Rng) -> Box:
    w = rng.uniform(spec.box_min, spec.box_max)
    h = rng.uniform(spec.box_min, spec.box_max)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return Box(x1, y1, x1 + w, y1 + h)


def generate_scene(spec: SceneSpec, rng: Rng) -> tuple[list[RegionProposal], int]:
    """Sample regions and pick the target. Returns ``(regions, target_index)``."""
    n = rng.integers(spec.n_min, spec.n_max + 1)
    target_cat = rng.integers(0, len(spec.categories))
    n_same = min(n, spec.distractor_policy + 1)
    others = [c for c in range(len(spec.categories)) if c != target_cat]
    cats = [target_cat] * n_same + [rng.choice(others) for _ in range(n - n_same)]
    colors = [rng.integers(0, len(spec.colors)) for _ in range(n)]
    order = rng.permutation(n)
    cats = [cats[i] for i in order]
    colors = [colors[i] for i in order]
    target = order.index(0)

    boxes: list[Box] = []
    for _ in range(n):
        for _attempt in range(spec.max_retries):
            box = _sample_box(spec, rng)
            if all(iou(box, b) <= spec.max_overlap for b in boxes):
                boxes.append(box)
                break
        else:
            raise InfeasibleSceneError(
                f"could not place {n} boxes with pairwise IoU <= {spec.max_overlap}")

    F = spec.feature_dim
    noise = rng.normal((n, F), scale=spec.noise_sigma) if spec.noise_sigma > 0 else np.zeros((n, F))
    regions = []
    for i in range(n):
        feat = np.zeros(F)
        feat[cats[i]] = 1.0
        feat[len(spec.categories) + colors[i]] = 1.0
        regions.append(RegionProposal(boxes[i], feat + noise[i],
                                      spec.categories[cats[i]], spec.colors[colors[i]]))
    return regions, target


def _candidates(regions: Sequence[RegionProposal], target: int) -> list[Description]:
    t = regions[target]
    boxes = [r.box for r in regions]
    cats = [r.category for r in regions]
    return [
        Description(t.category),
        Description(t.category, t.color),
        Description(t.category, t.color, position_of(t.box)),
        Description(t.category, t.color, ordinal=ordinal_rank(boxes, cats, target)),
    ]


def describe(desc: Description, rng: Rng) -> list[str]:
    words: list[str] = []
    if rng.random() < 0.3:
        words += rng.choice(FILLERS)
    words += rng.choice(ACTIONS)
    words.append("the")
    if desc.ordinal is not None:
        words.append(ORDINALS[desc.ordinal - 1])
    if desc.color is not None:
        words.append(desc.color)
    words.append(desc.category)
    if desc.position is not None:
        words += POSITIONS[desc.position]
    return words


def render_command(regions: Sequence[RegionProposal], target: int, rng: Rng,
                   vocab: Sequence[str], max_retries: int = 8) -> list[int]:
    """Token ids of the simplest command that singles out ``regions[target]``."""
    if not 0 <= target < len(regions):
        raise RenderError(f"target {target} not in scene of {len(regions)} regions")
    boxes = [r.box for r in regions]
    cats = [r.category for r in regions]
    cols = [r.color for r in regions]
    index = {w: i for i, w in enumerate(vocab)}
    for desc in _candidates(regions, target):
        if matching_regions(desc, boxes, cats, cols) != [target]:
            continue
        for _ in range(max_retries):
            words = describe(desc, rng)
            # brute-force re-check of what was actually emitted
            if matching_regions(parse_command(words), boxes, cats, cols) == [target]:
                return [index[w] for w in words]
    raise RenderError("no uniquely identifying command found")


def generate_sample(spec: SceneSpec, seed: int, index: int, vocab: Sequence[str]) -> GroundingSample:
    sample_seed = derive_seed(seed, index)
    rng = Rng(sample_seed)
    regions, target = generate_scene(spec, rng)
    tokens = render_command(regions, target, rng, vocab)
    return GroundingSample(index, regions, tokens, target, sample_seed)


def header(spec: SceneSpec) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "grammar_version": GRAMMAR_VERSION,
        "vocab": build_vocab(spec.categories, spec.colors),
        "templates": list(TEMPLATES),
        "spec": asdict(spec),
    }


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _line(args) -> str:
    spec, seed, index, vocab = args
    return dumps(generate_sample(spec, seed, index, vocab).to_record())


def generate_dataset(spec: SceneSpec, count: int, seed: int, path) -> None:
    """Write ``count`` samples (plus a header line) as line-delimited JSON.

    Sample ``i`` is generated from ``derive_seed(seed, i)`` alone, so output
    does not depend on generation order.  Set THREADS>1 to fan out over
    processes; lines are still written in id order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    head = header(spec)
    vocab = head["vocab"]
    jobs = [(spec, seed, i, vocab) for i in range(count)]
    threads = int(os.environ.get("THREADS", "1"))
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            lines = list(pool.map(_line, jobs, chunksize=64))
    else:
        lines = [_line(j) for j in jobs]
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dumps(head) + "\n")
        for line in lines:
            fh.write(line + "\n")
    os.replace(tmp, path)
