"""Dataset construction: rendered samples, vocabulary, splits, and files.

Scenes are rendered into two 4-channel 16x16 grids (pseudo-RGB from a
per-class palette plus a height channel acting as depth); each obstacle
also yields a 32-dim region descriptor (class one-hot + box geometry).
Datasets are written as line-delimited JSON with a header record, next to
a plain-text vocabulary (one token per line, line number = id).
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import encode_positional, region_feature, RegionFeature
from .params import FormatError
from .scenes import (
    DESTINATION_KINDS, GRID_SIZE, MAX_OBSTACLE_HEIGHT, OBSTACLE_CLASSES,
    TARGET_CLASSES, TARGET_HEIGHT, Event, Scene, SceneConfig, Outcome,
    generate_scene, make_captions, simulate_placement, target_footprint,
)

DATA_MAGIC = "NNCAPDATA"
DATA_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")

# Proportions of the reference corpus splits (4186/474/657 of 5317).
DEFAULT_SPLIT_RATIOS = (4186 / 5317, 474 / 5317, 657 / 5317)

_HEIGHT_SCALE = 8.0  # heights <= 5 map into (0, 1)


def _palette(n: int, saturation: float, value: float,
             offset: float = 0.0) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb((i / n + offset) % 1.0, saturation, value)
            for i in range(n)]
    return np.round(np.array(cols), 3)

OBSTACLE_COLORS = _palette(len(OBSTACLE_CLASSES), 0.75, 0.9)
TARGET_COLORS = _palette(len(TARGET_CLASSES), 0.9, 0.75, offset=0.03)
DEST_COLORS = _palette(len(DESTINATION_KINDS), 0.3, 0.35)

_OBSTACLE_INDEX = {name: i for i, name in enumerate(OBSTACLE_CLASSES)}
_TARGET_INDEX = {name: i for i, name in enumerate(TARGET_CLASSES)}
_DEST_INDEX = {name: i for i, name in enumerate(DESTINATION_KINDS)}


def render_scene(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Render (dest_grid, targ_grid), both (4, 16, 16) float32 in [0, 1].

    The destination shows the surface color with obstacles painted over it;
    the target grid shows only the target footprint at its placement cell,
    so the overlap that decides a collision is visible to the model.
    """
    dest = np.zeros((4, GRID_SIZE, GRID_SIZE), dtype=np.float32)
    base = DEST_COLORS[_DEST_INDEX[scene.destination_kind]]
    dest[0:3] = base[:, None, None]
    for ob in scene.obstacles:
        x1, y1, x2, y2 = ob.box
        dest[0:3, y1:y2, x1:x2] = OBSTACLE_COLORS[_OBSTACLE_INDEX[ob.cls]][:, None, None]
        dest[3, y1:y2, x1:x2] = ob.height / _HEIGHT_SCALE

    targ = np.zeros((4, GRID_SIZE, GRID_SIZE), dtype=np.float32)
    x1, y1, x2, y2 = target_footprint(scene)
    targ[0:3, y1:y2, x1:x2] = TARGET_COLORS[_TARGET_INDEX[scene.target]][:, None, None]
    targ[3, y1:y2, x1:x2] = TARGET_HEIGHT / _HEIGHT_SCALE
    return dest, targ


def scene_regions(scene: Scene) -> list[RegionFeature]:
    """Ground-truth region descriptors: class one-hot plus box geometry."""
    out = []
    for ob in scene.obstacles:
        onehot = np.zeros(len(OBSTACLE_CLASSES))
        onehot[_OBSTACLE_INDEX[ob.cls]] = 1.0
        visual = np.concatenate([onehot, encode_positional(ob.box, GRID_SIZE)])
        out.append(region_feature(visual, ob.box))
    return out


# ---------------------------------------------------------------------------
# vocabulary

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Bidirectional token <-> id map with fixed reserved ids."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise FormatError(
                f"vocabulary must start with {RESERVED_TOKENS}, got {tokens[:4]}")
        self.tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise FormatError("vocabulary contains duplicate tokens")

    @classmethod
    def from_corpus(cls, captions) -> "Vocabulary":
        words = sorted({w for cap in captions for w in cap})
        return cls(list(RESERVED_TOKENS) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: list[str]) -> list[int]:
        return [self._ids.get(w, UNK_ID) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    seed: int
    destination_kind: str
    event: str
    collision_label: bool
    dest_grid: np.ndarray               # (4, 16, 16) float32
    targ_grid: np.ndarray               # (4, 16, 16) float32
    regions: list[RegionFeature]
    boxes: list[tuple[int, int, int, int]]  # raw obstacle boxes, cells
    caption_train: list[int]
    captions_eval: list[list[int]]


@dataclass
class _RawSample:
    scene: Scene
    outcome: Outcome
    dest_grid: np.ndarray
    targ_grid: np.ndarray
    caption_train: list[str]
    captions_eval: list[list[str]]


def _splitmix64(seed: int, index: int) -> int:
    mask = (1 << 64) - 1
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


def make_raw_sample(master_seed: int, index: int,
                    config: SceneConfig | None = None) -> _RawSample:
    scene_seed = _splitmix64(master_seed, 2 * index)
    caption_seed = _splitmix64(master_seed, 2 * index + 1)
    scene = generate_scene(scene_seed, config)
    outcome = simulate_placement(scene)
    caption_train, captions_eval = make_captions(
        scene, outcome, np.random.default_rng(caption_seed))
    dest, targ = render_scene(scene)
    return _RawSample(scene, outcome, dest, targ, caption_train, captions_eval)


def _encode_sample(raw: _RawSample, vocab: Vocabulary) -> Sample:
    return Sample(
        seed=raw.scene.seed,
        destination_kind=raw.scene.destination_kind,
        event=raw.outcome.event.value,
        collision_label=raw.outcome.collided,
        dest_grid=raw.dest_grid,
        targ_grid=raw.targ_grid,
        regions=scene_regions(raw.scene),
        boxes=[ob.box for ob in raw.scene.obstacles],
        caption_train=vocab.encode(raw.caption_train),
        captions_eval=[vocab.encode(c) for c in raw.captions_eval],
    )


# ---------------------------------------------------------------------------
# splits


def split_sizes(n: int, ratios) -> tuple[int, ...]:
    """Largest-remainder allocation of ``n`` into len(ratios) parts."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios {ratios} must sum to 1")
    raw = [n * r for r in ratios]
    base = [int(np.floor(x + 1e-9)) for x in raw]
    short = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (base[i] - raw[i], i))
    for i in order[:short]:
        base[i] += 1
    return tuple(base)


def _stratified_split(kinds: list[str], n_train: int, n_val: int, n: int,
                      rng: np.random.Generator) -> dict[str, list[int]]:
    """Assign sample indices to splits, stratum by stratum.

    Per-stratum quotas use cumulative integer allocation, which makes the
    global split sizes land exactly on the requested totals.
    """
    strata: dict[str, list[int]] = {}
    for i, kind in enumerate(kinds):
        strata.setdefault(kind, []).append(i)
    out = {name: [] for name in SPLIT_NAMES}
    cum = 0
    cum_train = cum_val = 0
    for kind in sorted(strata):
        members = strata[kind]
        if len(members) < len(SPLIT_NAMES):
            raise ValueError(
                f"stratum {kind!r} has only {len(members)} samples; too thin "
                f"to stratify into {len(SPLIT_NAMES)} splits")
        rng.shuffle(members)
        cum += len(members)
        t = cum * n_train // n - cum_train
        v = cum * n_val // n - cum_val
        cum_train += t
        cum_val += v
        if t + v > len(members):
            raise ValueError(
                f"stratum {kind!r} too thin for the requested ratios")
        out["train"].extend(members[:t])
        out["val"].extend(members[t:t + v])
        out["test"].extend(members[t + v:])
    for name in SPLIT_NAMES:
        out[name].sort()
    return out


@dataclass
class Dataset:
    splits: dict[str, list[Sample]]
    vocab: Vocabulary

    def __getitem__(self, split: str) -> list[Sample]:
        return self.splits[split]


def build_dataset(n: int, seed: int, split_ratios=DEFAULT_SPLIT_RATIOS,
                  scene_config: SceneConfig | None = None) -> Dataset:
    """Generate ``n`` samples, split them stratified by destination kind,
    and build the vocabulary from the training captions only."""
    if len(split_ratios) != len(SPLIT_NAMES):
        raise ValueError(f"need {len(SPLIT_NAMES)} split ratios")
    raws = [make_raw_sample(seed, i, config=scene_config) for i in range(n)]
    n_train, n_val, _ = split_sizes(n, split_ratios)
    assignment = _stratified_split(
        [r.scene.destination_kind for r in raws], n_train, n_val, n,
        np.random.default_rng(_splitmix64(seed, 1 << 40)))
    train_captions = []
    for i in assignment["train"]:
        train_captions.extend(raws[i].captions_eval)
    vocab = Vocabulary.from_corpus(train_captions)
    splits = {name: [_encode_sample(raws[i], vocab) for i in assignment[name]]
              for name in SPLIT_NAMES}
    return Dataset(splits=splits, vocab=vocab)


# ---------------------------------------------------------------------------
# persistence


def _grid_to_json(grid: np.ndarray) -> list:
    return [[[round(float(v), 6) for v in row] for row in ch] for ch in grid]


def _sample_record(s: Sample) -> dict:
    return {
        "seed": s.seed,
        "destination_kind": s.destination_kind,
        "event": s.event,
        "collision_label": s.collision_label,
        "dest_grid": _grid_to_json(s.dest_grid),
        "targ_grid": _grid_to_json(s.targ_grid),
        "regions": [
            # one-hot and /16 geometry entries have exact short reprs
            {"vec": [float(v) for v in rf.visual], "box": list(box)}
            for rf, box in zip(s.regions, s.boxes)
        ],
        "caption_train": s.caption_train,
        "captions_eval": s.captions_eval,
    }


def _sample_from_record(rec: dict) -> Sample:
    regions = [region_feature(np.array(r["vec"]), tuple(r["box"]))
               for r in rec["regions"]]
    return Sample(
        seed=rec["seed"],
        destination_kind=rec["destination_kind"],
        event=rec["event"],
        collision_label=rec["collision_label"],
        dest_grid=np.array(rec["dest_grid"], dtype=np.float32),
        targ_grid=np.array(rec["targ_grid"], dtype=np.float32),
        regions=regions,
        boxes=[tuple(r["box"]) for r in rec["regions"]],
        caption_train=list(rec["caption_train"]),
        captions_eval=[list(c) for c in rec["captions_eval"]],
    )


def save_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset.vocab.save(out_dir / "vocab.txt")
    for name in SPLIT_NAMES:
        samples = dataset.splits[name]
        header = {"magic": DATA_MAGIC, "version": DATA_VERSION,
                  "split": name, "count": len(samples),
                  "vocab_size": len(dataset.vocab)}
        with open(out_dir / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
            for s in samples:
                fh.write(json.dumps(_sample_record(s), sort_keys=True,
                                    separators=(",", ":")) + "\n")


def load_split(data_dir: str | Path, split: str) -> list[Sample]:
    path = Path(data_dir) / f"{split}.jsonl"
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("magic") != DATA_MAGIC:
            raise FormatError(f"{path}: bad dataset magic {header.get('magic')!r}")
        if header.get("version") != DATA_VERSION:
            raise FormatError(f"{path}: unsupported dataset version "
                              f"{header.get('version')!r}")
        samples = [_sample_from_record(json.loads(line)) for line in fh]
    if len(samples) != header["count"]:
        raise FormatError(f"{path}: header promises {header['count']} samples, "
                          f"found {len(samples)}")
    return samples


def load_dataset(data_dir: str | Path) -> Dataset:
    vocab = Vocabulary.load(Path(data_dir) / "vocab.txt")
    splits = {name: load_split(data_dir, name) for name in SPLIT_NAMES}
    return Dataset(splits=splits, vocab=vocab)
