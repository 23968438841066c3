"""Synthetic single-object caption dataset, vocabularies and file formats.

Manifest (UTF-8, one sample per line, tab-separated)::

    id  image-path  caption  attr1 attr2 attr3 attr4 attr5  x,y,w,h  split

Vocabulary files hold one token per line; the line number is the id and
the first four lines are always ``<pad> <start> <end> <unk>``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import RngStream
from .errors import FormatError, GenerationError, ValidationError
from .imageio import image_io

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = (PAD, START, END, UNK)
PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3
SPLITS = ("train", "val", "test")

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.6, 0.0, 0.8),
    "orange": (1.0, 0.5, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "pink": (1.0, 0.6, 0.8),
}
BACKGROUND_RGB = {
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
}
SHAPES = ("circle", "square", "triangle", "bar")
TEXTURES = ("solid", "striped", "dotted")
SHADE = 0.5  # texture marks are the object colour scaled by this


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, strip trailing punctuation."""
    out = []
    for tok in text.lower().split():
        tok = tok.rstrip(".,;:!?")
        if tok:
            out.append(tok)
    return out


@dataclass
class Sample:
    id: str
    image: np.ndarray  # 3 x H x W in [0, 1]
    caption: List[str]
    attributes: List[str]  # caption content words, caption order
    bbox: Tuple[int, int, int, int]  # x, y, w, h
    split: str = "train"


@dataclass
class SyntheticSpec:
    image_size: int = 64
    shapes: Sequence[str] = SHAPES
    colors: Sequence[str] = ("red", "green", "blue", "yellow", "purple", "orange")
    textures: Sequence[str] = TEXTURES
    backgrounds: Sequence[str] = ("white", "black", "gray")
    samples_per_class: int = 128
    seed: int = 0
    min_frac: float = 0.25  # object box side as a fraction of the image
    max_frac: float = 0.5

    @classmethod
    def from_config(cls, cfg) -> "SyntheticSpec":
        return cls(cfg.image_size, tuple(cfg.shapes), tuple(cfg.colors), tuple(cfg.textures),
                   tuple(cfg.backgrounds), cfg.samples_per_class, cfg.seed)

    def check(self) -> None:
        if self.image_size < 32:
            raise GenerationError(f"image_size {self.image_size} < 32")
        for label, names, known in (("shape", self.shapes, SHAPES), ("color", self.colors, COLOR_RGB),
                                    ("texture", self.textures, TEXTURES),
                                    ("background", self.backgrounds, BACKGROUND_RGB)):
            if not names:
                raise GenerationError(f"empty {label} set")
            bad = [n for n in names if n not in known]
            if bad:
                raise GenerationError(f"unknown {label}(s): {', '.join(bad)}")
        if not 0 < self.min_frac <= self.max_frac:
            raise GenerationError("need 0 < min_frac <= max_frac")
        if int(round(self.max_frac * self.image_size)) > self.image_size:
            raise GenerationError("object size exceeds the image")
        if self.samples_per_class < 1:
            raise GenerationError("samples_per_class must be >= 1")


def shape_mask(shape: str, side: int, horizontal: bool = True) -> np.ndarray:
    """Boolean side x side mask of a shape filling its box."""
    r = np.arange(side)[:, None] + 0.5
    c = np.arange(side)[None, :] + 0.5
    half = side / 2.0
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    if shape == "circle":
        return (r - half) ** 2 + (c - half) ** 2 <= half ** 2
    if shape == "triangle":
        return np.abs(c - half) <= r / 2.0
    if shape == "bar":
        thick = max(side // 3, 2)
        lo = (side - thick) // 2
        m = np.zeros((side, side), dtype=bool)
        if horizontal:
            m[lo:lo + thick, :] = True
        else:
            m[:, lo:lo + thick] = True
        return m
    raise GenerationError(f"unknown shape {shape!r}")


def texture_mask(texture: str, h: int, w: int) -> np.ndarray:
    """Where the darker shade goes, relative to the object box."""
    r = np.arange(h)[:, None]
    c = np.arange(w)[None, :]
    if texture == "solid":
        return np.zeros((h, w), dtype=bool)
    if texture == "striped":
        return np.broadcast_to((r // 2) % 2 == 1, (h, w))
    if texture == "dotted":
        return ((r % 4) // 2 == 1) & ((c % 4) // 2 == 1)
    raise GenerationError(f"unknown texture {texture!r}")


def render_sample(index: int, shape: str, spec: SyntheticSpec, rng: RngStream) -> Sample:
    S = spec.image_size
    color = spec.colors[rng.integers(0, len(spec.colors))]
    texture = spec.textures[rng.integers(0, len(spec.textures))]
    background = spec.backgrounds[rng.integers(0, len(spec.backgrounds))]
    lo = max(int(round(spec.min_frac * S)), 4)
    hi = max(int(round(spec.max_frac * S)), lo)
    side = rng.integers(lo, hi + 1)
    x0 = rng.integers(0, S - side + 1)
    y0 = rng.integers(0, S - side + 1)
    horizontal = rng.uniform() < 0.5
    mask = np.zeros((S, S), dtype=bool)
    mask[y0:y0 + side, x0:x0 + side] = shape_mask(shape, side, horizontal)
    shade = np.zeros((S, S), dtype=bool)
    shade[y0:y0 + side, x0:x0 + side] = texture_mask(texture, side, side)
    rgb = np.array(COLOR_RGB[color])
    img = np.empty((3, S, S))
    img[:] = np.array(BACKGROUND_RGB[background])[:, None, None]
    img[:, mask & ~shade] = rgb[:, None]
    img[:, mask & shade] = (SHADE * rgb)[:, None]
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    bbox = (int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))
    caption = ["a", color, texture, shape, "on", "a", background, "background"]
    attrs = [color, texture, shape, background, "background"]
    return Sample(f"s{index:05d}", img, caption, attrs, bbox)


def _workers() -> int:
    try:
        return max(int(os.environ.get("CAPNET_THREADS", "0")), 0)
    except ValueError:
        return 0


def generate_synthetic(spec: SyntheticSpec) -> List[Sample]:
    """Render ``samples_per_class`` images per shape, each with its own seeded stream."""
    spec.check()
    for c in spec.colors:
        for b in spec.backgrounds:
            rgb = np.array(COLOR_RGB[c])
            if np.allclose(rgb, BACKGROUND_RGB[b]) or np.allclose(SHADE * rgb, BACKGROUND_RGB[b]):
                raise GenerationError(f"color {c} is indistinguishable from background {b}")
    root = RngStream(spec.seed)
    jobs = [(i, shape) for i, shape in enumerate(s for s in spec.shapes for _ in range(spec.samples_per_class))]

    def one(job):
        i, shape = job
        return render_sample(i, shape, spec, root.spawn(i))

    n = _workers()
    if n > 0:
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


# ---------------------------------------------------------------------------
# vocabularies
# ---------------------------------------------------------------------------

@dataclass
class Vocabulary:
    tokens: List[str]
    counts: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValidationError("vocabulary must start with <pad>, <start>, <end>, <unk>")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValidationError("vocabulary tokens must be unique")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def id(self, tok: str) -> int:
        return self.index.get(tok, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        try:
            return cls([ln for ln in lines if ln != ""])
        except ValidationError as exc:
            raise FormatError(f"{path}: {exc}") from None


def attribute_word_list(spec_or_cfg) -> List[str]:
    """Nouns/adjectives of the caption template (parts of speech are known)."""
    words = list(spec_or_cfg.colors) + list(spec_or_cfg.textures) + list(spec_or_cfg.shapes)
    words += list(spec_or_cfg.backgrounds) + ["background"]
    return words


def build_vocab(captions: Iterable[Sequence[str]], max_attr_words: int = 1000,
                attr_words: Optional[Iterable[str]] = None) -> Tuple[Vocabulary, Vocabulary]:
    """Caption vocabulary (every training token) and attribute vocabulary
    (top ``max_attr_words`` eligible words by count, ties lexicographic).

    Both list words by descending count after the reserved tokens.
    """
    counts: Dict[str, int] = {}
    n = 0
    for cap in captions:
        n += 1
        for tok in cap:
            counts[tok] = counts.get(tok, 0) + 1
    if n == 0 or not counts:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED:
        counts.pop(tok, None)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    caption_vocab = Vocabulary(list(RESERVED) + ordered, dict(counts))
    allowed = None if attr_words is None else set(attr_words)
    eligible = [t for t in ordered if allowed is None or t in allowed][:max_attr_words]
    attr_vocab = Vocabulary(list(RESERVED) + eligible, {t: counts[t] for t in eligible})
    return caption_vocab, attr_vocab


def select_attributes(caption: Sequence[str], attr_vocab: Vocabulary, n: int = 5) -> List[int]:
    """In-vocabulary caption words, most frequent first, padded with <pad>.

    Attribute ids are assigned in descending-frequency order, so sorting by
    id is sorting by frequency with lexicographic ties.
    """
    ids = sorted({attr_vocab.index[t] for t in caption if t in attr_vocab.index and attr_vocab.index[t] >= 4})
    ids = ids[:n]
    return ids + [PAD_ID] * (n - len(ids))


def attribute_labels(attr_ids: Sequence[int], n_attr: int) -> np.ndarray:
    y = np.zeros(n_attr)
    for i in attr_ids:
        if i != PAD_ID:
            y[i] = 1.0
    return y


def split_dataset(samples: List[Sample], fractions=(0.70, 0.15, 0.15), seed: int = 0) -> List[Sample]:
    """Seeded shuffle, then contiguous train/val/test cut.

    Validation and test sizes are floored; the remainder goes to train.
    Returns the samples in shuffled order with their ``split`` set.
    """
    if len(samples) < 3:
        raise ValidationError("need at least 3 samples to split")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValidationError(f"split fractions {fractions} must be three non-negatives summing to 1")
    n = len(samples)
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    n_test = int(np.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test
    order = RngStream(seed).spawn(0x5B1D).permutation(n)
    out = []
    for rank, idx in enumerate(order):
        s = samples[idx]
        split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        out.append(Sample(s.id, s.image, list(s.caption), list(s.attributes), s.bbox, split))
    return out


def encode_caption(caption: Sequence[str], vocab: Vocabulary) -> List[int]:
    return [START_ID] + [vocab.id(t) for t in caption] + [END_ID]


def decode_caption(ids: Sequence[int], vocab: Vocabulary) -> List[str]:
    return [vocab.tokens[i] for i in ids if i >= 4 or i == UNK_ID]


def pad_captions(encoded: Sequence[Sequence[int]]) -> np.ndarray:
    T = max(len(e) for e in encoded)
    out = np.zeros((len(encoded), T), dtype=np.int64)
    for i, e in enumerate(encoded):
        out[i, :len(e)] = e
    return out


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(samples: Sequence[Sample], out_dir, name: str = "manifest.tsv") -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"images/{s.id}.ppm"
        image_io(out / rel, "write", s.image)
        attrs = list(s.attributes) + [PAD] * (5 - len(s.attributes))
        lines.append("\t".join([s.id, rel, " ".join(s.caption), " ".join(attrs[:5]),
                                ",".join(str(v) for v in s.bbox), s.split]))
    path = out / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path, image_size: Optional[int] = None) -> List[Sample]:
    path = Path(path)
    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
        sid, rel, caption, attrs, bbox, split = parts
        if split not in SPLITS:
            raise FormatError(f"{path}:{lineno}: bad split {split!r}")
        try:
            box = tuple(int(v) for v in bbox.split(","))
        except ValueError:
            box = ()
        if len(box) != 4:
            raise FormatError(f"{path}:{lineno}: bad bbox {bbox!r}")
        size = None if image_size is None else (image_size, image_size)
        img = image_io(path.parent / rel, "read", size=size)
        if img.ndim != 3:
            raise FormatError(f"{path}:{lineno}: {rel} is not an RGB image")
        words = [a for a in attrs.split() if a != PAD]
        samples.append(Sample(sid, img, tokenize(caption), words, box, split))
    return samples
