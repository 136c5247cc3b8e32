"""Synthetic shapes world: paired images and captions.

Scenes hold 1-3 colored shapes on an 8x8 grid of 8x8-pixel cells (64x64
rasters). Captions are template realizations that always name each object's
color and shape, plus the spatial relation when one is declared. Every word
carries a category (color / shape / relation / other) so category-preserving
word swaps are well defined.

Captions are canonical: objects are mentioned in sorted (color, shape) order,
a multi-object scene always declares the relation between the first two
mentioned objects with its deterministic orientation, scenes never repeat a
(color, shape) combination, and the template is a hash of the caption
content. Two scenes with the same describable content therefore share one
caption string exactly, which keeps retrieval-style evaluations well posed
(otherwise a candidate pool can contain a differently-worded caption that is
equally true of the query image).

Everything is deterministic: an example is a pure function of
(seed, split, index, attempt), and `generate_dataset` retries attempts only to
keep scene signatures unique across splits.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

IMAGE_SIZE = 64
GRID_SIZE = 8          # grid is GRID_SIZE x GRID_SIZE cells
CELL_PIXELS = 8
NUM_CELLS = GRID_SIZE * GRID_SIZE
MAX_OBJECTS = 3
CAPTION_LEN = 17       # token budget including BOS and EOS

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple", "cyan")
RELATIONS = ("above", "below", "left_of", "right_of")

# uint8 palette so float rasters are exact multiples of 1/255 and PNG
# round-trips are lossless
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 210, 40),
    "purple": (150, 50, 200),
    "cyan": (45, 200, 210),
}
BACKGROUND = (236, 236, 236)

SHADE_LEVELS = 8       # per-object brightness step, scales rgb by 0.75..1.0
SHADE_MIN = 0.75
SHAPE_BOX = 6          # shapes live in a 6x6 box jittered inside the cell
JITTER_MAX = CELL_PIXELS - SHAPE_BOX  # dx, dy in {0, 1, 2}

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"

_LEADS = ("a", "the", "there is a", "an image of a", "a picture of a")
_LEADS_SECOND = ("a", "the", "a", "a", "a")  # article for later objects


class SceneError(ValueError):
    """Raised when a SceneSpec violates its invariants."""


def _shape_mask(shape: str) -> np.ndarray:
    ys, xs = np.mgrid[0:SHAPE_BOX, 0:SHAPE_BOX]
    cy = cx = (SHAPE_BOX - 1) / 2.0
    if shape == "square":
        return np.ones((SHAPE_BOX, SHAPE_BOX), dtype=bool)
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= 9.0
    if shape == "triangle":
        return np.abs(xs - cx) <= (ys + 1) * 0.5
    raise SceneError(f"unknown shape {shape!r}")


_SHAPE_MASKS = {s: _shape_mask(s) for s in SHAPES}
# pixel-count signature per shape, used by the independent caption checker
SHAPE_PIXEL_COUNTS = {s: int(m.sum()) for s, m in _SHAPE_MASKS.items()}


def shaded_rgb(color: str, shade: int) -> tuple[int, int, int]:
    """uint8 rgb of a palette color at one of SHADE_LEVELS brightness steps."""
    factor = SHADE_MIN + (1.0 - SHADE_MIN) * shade / (SHADE_LEVELS - 1)
    return tuple(int(round(c * factor)) for c in PALETTE[color])


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    cell: int
    shade: int = SHADE_LEVELS - 1
    jitter: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SceneError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise SceneError(f"unknown color {self.color!r}")
        if not 0 <= self.cell < NUM_CELLS:
            raise SceneError(f"cell {self.cell} out of range")
        if not 0 <= self.shade < SHADE_LEVELS:
            raise SceneError(f"shade {self.shade} out of range")
        dx, dy = self.jitter
        if not (0 <= dx <= JITTER_MAX and 0 <= dy <= JITTER_MAX):
            raise SceneError(f"jitter {self.jitter} out of range")

    @property
    def row(self) -> int:
        return self.cell // GRID_SIZE

    @property
    def col(self) -> int:
        return self.cell % GRID_SIZE


def relation_holds(relation: str, a: ObjectSpec, b: ObjectSpec) -> bool:
    if relation == "above":
        return a.row < b.row
    if relation == "below":
        return a.row > b.row
    if relation == "left_of":
        return a.col < b.col
    if relation == "right_of":
        return a.col > b.col
    raise SceneError(f"unknown relation {relation!r}")


def true_relations(a: ObjectSpec, b: ObjectSpec) -> list[str]:
    return [r for r in RELATIONS if relation_holds(r, a, b)]


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...]
    relation: Optional[str] = None

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise SceneError(f"scene needs 1..{MAX_OBJECTS} objects, got {len(self.objects)}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise SceneError(f"objects overlap cells: {cells}")
        if self.relation is not None:
            if len(self.objects) < 2:
                raise SceneError("relation declared with fewer than 2 objects")
            if self.relation not in RELATIONS:
                raise SceneError(f"unknown relation {self.relation!r}")
            if not relation_holds(self.relation, self.objects[0], self.objects[1]):
                raise SceneError(
                    f"relation {self.relation!r} is not geometrically true of objects 0 and 1")

    def signature(self) -> tuple:
        objs = tuple((o.shape, o.color, o.cell, o.shade, o.jitter) for o in self.objects)
        return (objs, self.relation)


def canonical_relation(a: ObjectSpec, b: ObjectSpec) -> str:
    """The deterministic relation orientation: vertical beats horizontal."""
    if a.row != b.row:
        return "above" if a.row < b.row else "below"
    return "left_of" if a.col < b.col else "right_of"


def canonical_scene(objects: list[ObjectSpec]) -> SceneSpec:
    """Sort objects by (color, shape) and declare the canonical relation."""
    ordered = tuple(sorted(objects, key=lambda o: (o.color, o.shape)))
    relation = canonical_relation(ordered[0], ordered[1]) if len(ordered) >= 2 else None
    return SceneSpec(objects=ordered, relation=relation)


def render_scene(scene: SceneSpec) -> np.ndarray:
    """Render a scene to a 64x64x3 float raster in [0, 1].

    Pixel values are exact multiples of 1/255, so uint8 encoding is lossless.
    """
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[...] = np.array(BACKGROUND, dtype=np.uint8)
    for obj in scene.objects:
        mask = _SHAPE_MASKS[obj.shape]
        rgb = np.array(shaded_rgb(obj.color, obj.shade), dtype=np.uint8)
        y0 = obj.row * CELL_PIXELS + obj.jitter[1]
        x0 = obj.col * CELL_PIXELS + obj.jitter[0]
        patch = img[y0:y0 + SHAPE_BOX, x0:x0 + SHAPE_BOX]
        patch[mask] = rgb
    return img.astype(np.float64) / 255.0


def _object_phrases(scene: SceneSpec) -> list[str]:
    return [f"{o.color} {o.shape}" for o in scene.objects]


def content_template(scene: SceneSpec) -> int:
    """Template index as a stable hash of the caption content, so scenes with
    identical describable content realize the identical caption string."""
    content = " ".join(_object_phrases(scene)) + " " + str(scene.relation)
    return zlib.crc32(content.encode()) % len(_LEADS)


def realize_caption(scene: SceneSpec, template_seed: int) -> list[str]:
    """Realize one of 5 paraphrase templates as a list of words (no BOS/EOS)."""
    t = template_seed % len(_LEADS)
    lead, second = _LEADS[t], _LEADS_SECOND[t]
    phrases = _object_phrases(scene)
    parts = [f"{lead} {phrases[0]}"]
    if scene.relation is not None:
        parts.append(f"{scene.relation} {second} {phrases[1]}")
        rest = phrases[2:]
    else:
        rest = phrases[1:]
    for p in rest:
        parts.append(f"and {second} {p}")
    words = " ".join(parts).split()
    if len(words) > CAPTION_LEN - 2:
        raise SceneError("caption template exceeded token budget")
    return words


def _all_template_words() -> list[str]:
    words = set()
    for lead in _LEADS:
        words.update(lead.split())
    words.update(("and",))
    words.update(COLORS)
    words.update(SHAPES)
    words.update(RELATIONS)
    return sorted(words)


class TextVocabulary:
    """Closed word vocabulary with special ids and a word->category map."""

    def __init__(self, words: Optional[Sequence[str]] = None):
        words = list(words) if words is not None else _all_template_words()
        self.id_to_token = [PAD, BOS, EOS] + words
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.pad_id = self.token_to_id[PAD]
        self.bos_id = self.token_to_id[BOS]
        self.eos_id = self.token_to_id[EOS]
        self.categories = {}
        for t in self.id_to_token:
            if t in COLORS:
                self.categories[t] = "color"
            elif t in SHAPES:
                self.categories[t] = "shape"
            elif t in RELATIONS:
                self.categories[t] = "relation"
            elif t in (PAD, BOS, EOS):
                self.categories[t] = "special"
            else:
                self.categories[t] = "other"

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, words: Sequence[str], pad_to: Optional[int] = CAPTION_LEN) -> list[int]:
        """BOS + word ids + EOS, optionally padded to a fixed length."""
        unknown = [w for w in words if w not in self.token_to_id]
        if unknown:
            raise KeyError(f"unknown caption words: {unknown}")
        ids = [self.bos_id] + [self.token_to_id[w] for w in words] + [self.eos_id]
        if pad_to is not None:
            if len(ids) > pad_to:
                raise ValueError(f"caption of {len(ids)} tokens exceeds budget {pad_to}")
            ids = ids + [self.pad_id] * (pad_to - len(ids))
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Words between BOS and EOS, ignoring padding."""
        words = []
        for i in ids:
            t = self.id_to_token[int(i)]
            if t == BOS or t == PAD:
                continue
            if t == EOS:
                break
            words.append(t)
        return words

    def save(self, vocab_path: Path, categories_path: Path) -> None:
        vocab_path.write_text("\n".join(self.id_to_token) + "\n")
        lines = [f"{t}\t{self.categories[t]}" for t in self.id_to_token]
        categories_path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, vocab_path: Path) -> "TextVocabulary":
        tokens = vocab_path.read_text().splitlines()
        if tokens[:3] != [PAD, BOS, EOS]:
            raise ValueError("vocab file missing special tokens in header positions")
        return cls(tokens[3:])


@dataclass
class PairedExample:
    id: str
    split: str
    scene: SceneSpec
    image: np.ndarray                 # 64x64x3 float in [0,1]
    caption: list[str]                # primary caption words
    caption_tokens: list[int]         # encoded, padded to CAPTION_LEN
    references: list[list[str]]       # 1 or 5 caption realizations
    template: int


@dataclass
class Dataset:
    seed: int
    vocab: TextVocabulary
    examples: dict = field(default_factory=dict)  # split -> list[PairedExample]

    def split(self, name: str) -> list[PairedExample]:
        return self.examples[name]


# `scorer` is an optional extra pool (disjoint like the others) used to train
# the consistency scorer, which stands in for a web-scale pretrained model
_SPLIT_IDS = {"train": 0, "val": 1, "test": 2, "scorer": 3}


def _object_count(index: int, offset: int) -> int:
    return 1 + (index + offset) % 3

def _draws_before(index: int, offset: int) -> int:
    # closed form of sum_{t<index} (1 + (t+offset) % 3)
    full, rem = divmod(index, 3)
    partial = sum(1 + (t + offset) % 3 for t in range(index - rem, index))
    return index - rem + full * 3 + partial


def _color_at(seed: int, split: str, draw_index: int) -> str:
    """Balanced color stream: each block of 6 consecutive draws is an
    independently shuffled permutation of the palette, so per-split counts
    stay within +-1 of uniform while within-scene color combinations remain
    unrestricted (a fixed repeating cycle would confine every scene to
    consecutive cycle colors and give each split a disjoint combination
    distribution)."""
    block, pos = divmod(draw_index, len(COLORS))
    rng = np.random.default_rng([seed, _SPLIT_IDS[split], 888, block])
    return COLORS[int(rng.permutation(len(COLORS))[pos])]


def draw_example(seed: int, split: str, index: int, attempt: int,
                 count_offset: int,
                 forced_combo: Optional[tuple[str, str]] = None) -> SceneSpec:
    """Draw a scene as a pure function of its arguments.

    Colors come from the balanced per-split stream (uniform up to +-1);
    `forced_combo` pins object 0's (shape, color) so the train split covers
    every combination.
    """
    rng = np.random.default_rng([seed, _SPLIT_IDS[split], index, attempt])
    n = _object_count(index, count_offset)
    cells = rng.choice(NUM_CELLS, size=n, replace=False)
    base_draw = _draws_before(index, count_offset)
    objects = []
    taken = set()
    for j in range(n):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = _color_at(seed, split, base_draw + j)
        if j == 0 and forced_combo is not None:
            shape, color = forced_combo
        # scenes never repeat a (color, shape) combination; cycling the shape
        # always finds a free one since colors within a scene are distinct
        # except for a possible forced first object
        for _ in range(len(SHAPES)):
            if (color, shape) not in taken:
                break
            shape = SHAPES[(SHAPES.index(shape) + 1) % len(SHAPES)]
        taken.add((color, shape))
        objects.append(ObjectSpec(
            shape=shape, color=color, cell=int(cells[j]),
            shade=int(rng.integers(SHADE_LEVELS)),
            jitter=(int(rng.integers(JITTER_MAX + 1)), int(rng.integers(JITTER_MAX + 1))),
        ))
    return canonical_scene(objects)


def generate_dataset(seed: int, counts: dict[str, int],
                     captions_per_image: int = 1) -> Dataset:
    """Generate disjoint train/val/test splits of paired examples.

    Deterministic in (seed, counts, captions_per_image); scene signatures are
    unique across all splits; the train split covers every (shape, color)
    combination.
    """
    for split, c in counts.items():
        if split not in _SPLIT_IDS:
            raise ValueError(f"unknown split {split!r}")
        if c < 1:
            raise ValueError(f"split {split!r} needs at least 1 example")
    if captions_per_image not in (1, len(_LEADS)):
        raise ValueError(f"captions_per_image must be 1 or {len(_LEADS)}")

    vocab = TextVocabulary()
    combos = [(s, c) for s in SHAPES for c in COLORS]
    np.random.default_rng([seed, 999]).shuffle(combos)

    ds = Dataset(seed=seed, vocab=vocab)
    used: set = set()
    for split in ("train", "val", "test", "scorer"):
        if split not in counts:
            continue
        split_rng = np.random.default_rng([seed, _SPLIT_IDS[split], 777])
        count_offset = int(split_rng.integers(3))
        examples = []
        for index in range(counts[split]):
            forced = combos[index] if split == "train" and index < len(combos) else None
            for attempt in range(1000):
                scene = draw_example(seed, split, index, attempt,
                                     count_offset, forced)
                if scene.signature() not in used:
                    break
            else:
                raise RuntimeError("could not draw a unique scene in 1000 attempts")
            used.add(scene.signature())
            template = content_template(scene)
            caption = realize_caption(scene, template)
            if captions_per_image == 1:
                references = [caption]
            else:
                references = [realize_caption(scene, t) for t in range(len(_LEADS))]
            examples.append(PairedExample(
                id=f"{split}-{index:05d}", split=split, scene=scene,
                image=render_scene(scene), caption=caption,
                caption_tokens=vocab.encode(caption), references=references,
                template=template,
            ))
        ds.examples[split] = examples
    return ds


def check_caption_against_image(image: np.ndarray, caption: list[str]) -> bool:
    """Rule-based faithfulness check, independent of the generator.

    Recovers objects from pixels alone (per-cell color blobs classified by
    pixel-count signature and nearest palette chroma) and verifies that every
    (color, shape) word pair in the caption matches a recovered object and
    that a relation word, if present, is geometrically true of the first two
    mentioned objects.
    """
    bg = np.array(BACKGROUND, dtype=np.float64) / 255.0
    found = {}  # cell -> (color, shape)
    for cell in range(NUM_CELLS):
        r, c = divmod(cell, GRID_SIZE)
        block = image[r * CELL_PIXELS:(r + 1) * CELL_PIXELS,
                      c * CELL_PIXELS:(c + 1) * CELL_PIXELS]
        nonbg = np.abs(block - bg).sum(axis=2) > 1e-9
        count = int(nonbg.sum())
        if count == 0:
            continue
        shape = None
        for s, n in SHAPE_PIXEL_COUNTS.items():
            if count == n:
                shape = s
        if shape is None:
            return False
        rgb = block[nonbg][0]
        norms = {name: np.array(v) / np.linalg.norm(v) for name, v in PALETTE.items()}
        unit = rgb / np.linalg.norm(rgb)
        color = max(norms, key=lambda k: float(unit @ norms[k]))
        found[cell] = (color, shape)

    pairs = [(caption[i], caption[i + 1]) for i in range(len(caption) - 1)
             if caption[i] in COLORS and caption[i + 1] in SHAPES]
    if not pairs:
        return False
    remaining = dict(found)
    mentioned_cells = []
    for color, shape in pairs:
        cell = next((k for k, v in remaining.items() if v == (color, shape)), None)
        if cell is None:
            return False
        mentioned_cells.append(cell)
        del remaining[cell]
    relations = [w for w in caption if w in RELATIONS]
    if relations:
        if len(mentioned_cells) < 2:
            return False
        a = ObjectSpec(shape=pairs[0][1], color=pairs[0][0], cell=mentioned_cells[0])
        b = ObjectSpec(shape=pairs[1][1], color=pairs[1][0], cell=mentioned_cells[1])
        if not relation_holds(relations[0], a, b):
            return False
    return True


def write_dataset(ds: Dataset, out_dir: Path) -> None:
    """Write manifest (JSON lines), PNG rasters, vocab.txt and categories.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_dir = out_dir / "images"
    img_dir.mkdir(exist_ok=True)
    records = []
    for split in ("train", "val", "test", "scorer"):
        for ex in ds.examples.get(split, []):
            records.append({
                "id": ex.id,
                "split": split,
                "objects": [{"shape": o.shape, "color": o.color, "cell": o.cell,
                             "shade": o.shade, "jitter": list(o.jitter)}
                            for o in ex.scene.objects],
                "relation": ex.scene.relation,
                "caption": " ".join(ex.caption),
                "references": [" ".join(r) for r in ex.references],
                "template": ex.template,
            })
            arr = np.round(ex.image * 255.0).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(img_dir / f"{ex.id}.png")
    manifest = "\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n"
    (out_dir / "manifest").write_text(manifest)
    (out_dir / "seed").write_text(str(ds.seed) + "\n")
    ds.vocab.save(out_dir / "vocab.txt", out_dir / "categories.txt")


def load_dataset(data_dir: Path) -> Dataset:
    data_dir = Path(data_dir)
    vocab = TextVocabulary.load(data_dir / "vocab.txt")
    seed = int((data_dir / "seed").read_text().strip())
    ds = Dataset(seed=seed, vocab=vocab)
    for line in (data_dir / "manifest").read_text().splitlines():
        rec = json.loads(line)
        objects = tuple(ObjectSpec(shape=o["shape"], color=o["color"], cell=o["cell"],
                                   shade=o["shade"], jitter=tuple(o["jitter"]))
                        for o in rec["objects"])
        scene = SceneSpec(objects=objects, relation=rec["relation"])
        image = np.asarray(Image.open(data_dir / "images" / f"{rec['id']}.png"),
                           dtype=np.float64) / 255.0
        caption = rec["caption"].split()
        ds.examples.setdefault(rec["split"], []).append(PairedExample(
            id=rec["id"], split=rec["split"], scene=scene, image=image,
            caption=caption, caption_tokens=vocab.encode(caption),
            references=[r.split() for r in rec["references"]],
            template=rec["template"],
        ))
    return ds
