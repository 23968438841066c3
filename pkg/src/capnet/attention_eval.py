"""Attention-map localization: upsample, normalize, threshold, take the
largest connected component's box and score it against ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .imageio import encode_pnm


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValidationError(f"box {self} has non-positive size")

    @property
    def area(self) -> int:
        return self.w * self.h

    def __str__(self) -> str:
        return f"{self.x},{self.y},{self.w},{self.h}"


@dataclass
class AttentionMap:
    weights: np.ndarray  # g x g
    word: str = ""
    step: int = 0
    beta: float = float("nan")


def upsample_attention(amap, target: Tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a g x g map to H x W."""
    w = amap.weights if isinstance(amap, AttentionMap) else np.asarray(amap, dtype=np.float64)
    gh, gw = w.shape
    H, W = target
    if H < gh or W < gw:
        raise ValidationError(f"target {target} smaller than the {gh}x{gw} grid")

    def coords(n_in, n_out):
        if n_out == 1:
            pos = np.zeros(1)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(gh, H)
    c0, c1, fc = coords(gw, W)
    top = w[r0][:, c0] * (1 - fc) + w[r0][:, c1] * fc
    bot = w[r1][:, c0] * (1 - fc) + w[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return np.maximum(out, 0.0)


def normalize_map(m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Affine rescale to [0, 1); a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo + eps)


def segment_threshold(m: np.ndarray, th: float = 0.6) -> np.ndarray:
    if not 0 <= th < 1:
        raise ValidationError(f"threshold {th} outside [0, 1)")
    return np.asarray(m) > th


def largest_component_bbox(mask: np.ndarray, connectivity: int = 4) -> Optional[BBox]:
    """Box of the largest connected component (ties: the one holding the
    smallest row-major pixel index); ``None`` for an empty mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    if connectivity == 4:
        structure = ndimage.generate_binary_structure(2, 1)
    elif connectivity == 8:
        structure = np.ones((3, 3), dtype=bool)
    else:
        raise ValidationError("connectivity must be 4 or 8")
    labels, n = ndimage.label(mask, structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    # labels are assigned in row-major order of first pixel, so argmax's
    # first-hit rule is exactly the tie rule
    best = int(np.argmax(sizes)) + 1
    rows, cols = np.nonzero(labels == best)
    return BBox(int(cols.min()), int(rows.min()), int(cols.max() - cols.min() + 1),
                int(rows.max() - rows.min() + 1))


def siou(pred: Optional[BBox], truth: BBox) -> float:
    if pred is None:
        return 0.0
    ix = max(0, min(pred.x + pred.w, truth.x + truth.w) - max(pred.x, truth.x))
    iy = max(0, min(pred.y + pred.h, truth.y + truth.h) - max(pred.y, truth.y))
    inter = ix * iy
    union = pred.area + truth.area - inter
    return inter / union


def predict_box(weights: np.ndarray, size: Tuple[int, int], th: float = 0.6,
                connectivity: int = 4) -> Optional[BBox]:
    up = upsample_attention(weights, size)
    return largest_component_bbox(segment_threshold(normalize_map(up), th), connectivity)


@dataclass
class SampleTrace:
    """Per-sample input to localization: word -> attention map, plus truth."""
    maps: Dict[str, AttentionMap]
    truth: BBox
    image_size: Tuple[int, int]


def localization_accuracy(traces: Sequence[SampleTrace], categories: Iterable[str], th: float = 0.6,
                          connectivity: int = 4) -> Tuple[Dict[str, Tuple[int, Optional[float]]], Optional[float]]:
    """Mean sIOU per category word over samples whose caption contains it.

    Returns ({category: (count, mean or None)}, overall mean over all scored
    (sample, category) pairs or None). Categories never generated get
    ``(0, None)``.
    """
    per: Dict[str, List[float]] = {c: [] for c in categories}
    for tr in traces:
        for word, amap in tr.maps.items():
            if word not in per:
                continue
            s = np.asarray(amap.weights).sum()
            if abs(s - 1.0) > 1e-10:
                raise ValidationError(f"attention map for {word!r} sums to {s}, not 1")
            box = predict_box(amap.weights, tr.image_size, th, connectivity)
            per[word].append(siou(box, tr.truth))
    table = {c: (len(v), (float(np.mean(v)) if v else None)) for c, v in per.items()}
    scores = [x for v in per.values() for x in v]
    return table, (float(np.mean(scores)) if scores else None)


def localization_csv(table: Mapping[str, Tuple[int, Optional[float]]]) -> str:
    lines = ["category,count,mean_siou"]
    for c in sorted(table):
        n, m = table[c]
        lines.append(f"{c},{n},{'n/a' if m is None else f'{m:.4f}'}")
    return "\n".join(lines) + "\n"


def heatmap_pgm(weights: np.ndarray, size: Tuple[int, int]) -> bytes:
    return encode_pnm(normalize_map(upsample_attention(weights, size)))


def write_attention_maps(out_dir, sample_id: str, words: Sequence[str], traces, grid_side: int,
                         size: Tuple[int, int], th: float = 0.6, connectivity: int = 4) -> List[Path]:
    """Per-word PGM heatmaps plus a sidecar ``<id>_attention.txt``
    (``step word beta bbox`` per line)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    lines = ["step\tword\tbeta\tbbox"]
    for step, (word, tr) in enumerate(zip(words, traces)):
        w = tr.alpha.reshape(grid_side, grid_side)
        p = out / f"{sample_id}_{step:02d}_{word.strip('<>')}.pgm"
        p.write_bytes(heatmap_pgm(w, size))
        written.append(p)
        box = predict_box(w, size, th, connectivity)
        lines.append(f"{step}\t{word}\t{tr.beta:.6f}\t{'none' if box is None else box}")
    side = out / f"{sample_id}_attention.txt"
    side.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(side)
    return written
