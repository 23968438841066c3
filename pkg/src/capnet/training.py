"""Training loops for the attribute extractor and the captioner, caption
inference, and the four-mode ablation harness."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint
from .config import Config
from .core import AdamState, ParamStore, RngStream, adam_step, lr_schedule
from .dataset import (PAD_ID, Sample, SyntheticSpec, Vocabulary, attribute_labels, attribute_word_list,
                      build_vocab, decode_caption, encode_caption, generate_synthetic, pad_captions,
                      select_attributes, split_dataset)
from .encoder import attribute_loss_from_logits, extractor_backward, extractor_forward
from .errors import EvaluationError, ValidationError
from .attention_eval import AttentionMap, BBox, SampleTrace
from .metrics import CorpusPair, MetricsReport, evaluate_corpus, report_csv
from .model import generate, init_attribute_extractor, init_captioner, loss_and_grad

LOG_HEADER = "epoch,lr,train_loss,val_loss"
ABLATION_ORDER = ("adaptive", "vanilla", "attr_only", "full")


@dataclass
class Split:
    """Array view of one dataset split."""
    ids: List[str]
    images: np.ndarray  # N x 3 x S x S
    captions: np.ndarray  # N x T padded ids with <start>/<end>
    attr_ids: np.ndarray  # N x n_attributes, frequency order, <pad>-filled
    labels: np.ndarray  # N x |attr vocab| multi-hot
    references: List[List[str]]
    bboxes: List[Tuple[int, int, int, int]]
    object_words: List[str]

    def __len__(self) -> int:
        return len(self.ids)


def prepare_split(samples: Sequence[Sample], cap_vocab: Vocabulary, attr_vocab: Vocabulary,
                  n_attributes: int = 5, shapes: Sequence[str] = ()) -> Split:
    if not samples:
        raise ValidationError("empty split")
    attr = np.array([select_attributes(s.caption, attr_vocab, n_attributes) for s in samples], dtype=np.int64)
    shape_set = set(shapes)
    return Split(
        ids=[s.id for s in samples],
        images=np.stack([s.image for s in samples]),
        captions=pad_captions([encode_caption(s.caption, cap_vocab) for s in samples]),
        attr_ids=attr,
        labels=np.stack([attribute_labels(a, len(attr_vocab)) for a in attr]),
        references=[list(s.caption) for s in samples],
        bboxes=[tuple(s.bbox) for s in samples],
        object_words=[next((t for t in s.caption if t in shape_set), "") for s in samples],
    )


@dataclass
class Prepared:
    cap_vocab: Vocabulary
    attr_vocab: Vocabulary
    splits: Dict[str, Split]


def prepare(samples: Sequence[Sample], cfg: Config,
            vocabs: Optional[Tuple[Vocabulary, Vocabulary]] = None) -> Prepared:
    """Array views per split; vocabularies are built from the training
    captions unless given."""
    if vocabs is None:
        train = [s for s in samples if s.split == "train"]
        if not train:
            raise ValidationError("training split is empty")
        vocabs = build_vocab([s.caption for s in train], cfg.max_attr_words, attribute_word_list(cfg))
    cap_vocab, attr_vocab = vocabs
    splits = {}
    for name in ("train", "val", "test"):
        part = [s for s in samples if s.split == name]
        if part:
            splits[name] = prepare_split(part, cap_vocab, attr_vocab, cfg.n_attributes, cfg.shapes)
    return Prepared(cap_vocab, attr_vocab, splits)


@dataclass
class TrainResult:
    params: ParamStore
    adam: AdamState
    curve: List[Tuple[int, float, float, float]] = field(default_factory=list)

    def checkpoint(self, cfg: Config) -> Checkpoint:
        return Checkpoint(cfg, self.params, self.adam)

    def log_csv(self) -> str:
        rows = [LOG_HEADER]
        for e, lr, tr, va in self.curve:
            rows.append(f"{e},{lr!r},{tr!r},{'' if math.isnan(va) else repr(va)}")
        return "\n".join(rows) + "\n"


def _batches(n: int, batch_size: int, rng: RngStream):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _finite(value: float, what: str, epoch: int, step: int) -> float:
    if not np.isfinite(value):
        raise EvaluationError(f"non-finite {what} loss {value} at epoch {epoch}, step {step}")
    return value


def _fit(params: ParamStore, adam: AdamState, epochs: int, n_train: int, batch_size: int, seed: int,
         step_fn: Callable[[np.ndarray], Tuple[float, int]], val_fn: Optional[Callable[[], float]],
         trainable: Optional[List[str]], what: str,
         on_epoch: Optional[Callable[[Tuple[int, float, float, float]], None]], decay: bool = True) -> List:
    """Shared epoch loop: seeded shuffles, Adam, per-epoch lr schedule."""
    curve = []
    root = RngStream(seed).spawn(0x7EA1)
    for epoch in range(1, epochs + 1):
        total = weight = 0.0
        for step, idx in enumerate(_batches(n_train, batch_size, root.spawn(epoch))):
            params.zero_grad()
            loss, w = step_fn(idx)
            _finite(loss, what, epoch, step)
            adam_step(params, adam, trainable)
            total += loss * w
            weight += w
        val = val_fn() if val_fn is not None else float("nan")
        if val_fn is not None:
            _finite(val, f"validation {what}", epoch, -1)
        row = (epoch, adam.learning_rate, total / weight, val)
        curve.append(row)
        if on_epoch:
            on_epoch(row)
        if decay:
            adam.learning_rate = lr_schedule(epoch, adam.learning_rate)
    return curve


# ---------------------------------------------------------------------------
# attribute extractor
# ---------------------------------------------------------------------------

def extractor_loss(params: ParamStore, cfg: Config, images: np.ndarray, labels: np.ndarray,
                   backward: bool = True) -> float:
    logits, cache = extractor_forward(images, params, cfg.grid_side)
    loss, dlogits = attribute_loss_from_logits(logits, labels, cfg.beta_n)
    if backward:
        extractor_backward(dlogits, cache, params)
    return loss


def _mean_over(split_n: int, fn: Callable[[np.ndarray], Tuple[float, int]], batch: int = 64) -> float:
    total = weight = 0.0
    for lo in range(0, split_n, batch):
        loss, w = fn(np.arange(lo, min(split_n, lo + batch)))
        total += loss * w
        weight += w
    return total / weight


def train_attribute_extractor(train: Split, cfg: Config, val: Optional[Split] = None,
                              on_epoch=None) -> TrainResult:
    """Weighted-BCE training on the multi-hot ground-truth attribute labels."""
    if len(train) == 0:
        raise ValidationError("training split is empty")
    params = init_attribute_extractor(cfg, train.labels.shape[1])
    adam = AdamState.for_params(params, learning_rate=cfg.attr_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                epsilon=cfg.adam_eps)

    def step(idx):
        return extractor_loss(params, cfg, train.images[idx], train.labels[idx]), len(idx)

    val_fn = None
    if val is not None and len(val):
        val_fn = lambda: _mean_over(len(val), lambda i: (  # noqa: E731
            extractor_loss(params, cfg, val.images[i], val.labels[i], backward=False), len(i)))
    curve = _fit(params, adam, cfg.attr_epochs, len(train), cfg.batch_size, cfg.seed, step, val_fn,
                 None, "attribute", on_epoch, cfg.lr_decay)
    return TrainResult(params, adam, curve)


def predict_attributes(extractor: ParamStore, cfg: Config, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """Top-``n_attributes`` extractor words per image, in vocabulary (frequency) order.

    Training slots hold ground-truth words sorted by id, so predictions are
    put in the same order.
    """
    out = []
    for lo in range(0, images.shape[0], batch):
        logits, _ = extractor_forward(images[lo:lo + batch], extractor, cfg.grid_side)
        # rank by logit: same order as the sigmoid, but confident words do
        # not collapse into ties at exactly 1.0
        logits[:, :4] = -np.inf  # reserved tokens are never attributes
        for row in logits:
            order = np.lexsort((np.arange(row.size), -row))[:cfg.n_attributes]
            out.append(np.sort(order))
    return np.array(out, dtype=np.int64)


def attribute_recall(pred: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of ground-truth (non-pad) attribute ids found in the predictions."""
    hit = total = 0
    for p, t in zip(pred, truth):
        want = {int(i) for i in t if i != PAD_ID}
        hit += len(want & {int(i) for i in p})
        total += len(want)
    return hit / total if total else float("nan")


# ---------------------------------------------------------------------------
# captioner
# ---------------------------------------------------------------------------

def _target_count(captions: np.ndarray) -> int:
    return int(np.count_nonzero(captions[:, 1:]))


def train_captioner(train: Split, cfg: Config, n_caption: int, n_attr: int,
                    val: Optional[Split] = None, on_epoch=None,
                    extractor: Optional[ParamStore] = None) -> TrainResult:
    """Teacher-forced cross-entropy.

    Attributes come from the ground truth, or from ``extractor`` when
    ``train_attr_source`` is ``extractor``.
    """
    if len(train) == 0:
        raise ValidationError("training split is empty")
    train_attrs, val_attrs = train.attr_ids, None if val is None else val.attr_ids
    if cfg.uses_attributes and cfg.train_attr_source == "extractor":
        if extractor is None:
            raise ValidationError("train_attr_source=extractor needs a trained attribute extractor")
        train_attrs = predict_attributes(extractor, cfg, train.images)
        if val is not None:
            val_attrs = predict_attributes(extractor, cfg, val.images)
    params = init_captioner(cfg, n_caption, n_attr)
    adam = AdamState.for_params(params, learning_rate=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                epsilon=cfg.adam_eps)
    trainable = None
    if cfg.freeze_encoder:
        trainable = [n for n in params.names() if not n.startswith("encoder.")]

    def step(idx):
        caps = train.captions[idx]
        return loss_and_grad(params, cfg, train.images[idx], caps, train_attrs[idx]), _target_count(caps)

    def val_loss():
        def one(i):
            caps = val.captions[i]
            return (loss_and_grad(params, cfg, val.images[i], caps, val_attrs[i], backward=False),
                    _target_count(caps))
        return _mean_over(len(val), one)

    val_fn = val_loss if val is not None and len(val) else None
    curve = _fit(params, adam, cfg.epochs, len(train), cfg.batch_size, cfg.seed, step, val_fn,
                 trainable, "caption", on_epoch, cfg.lr_decay)
    return TrainResult(params, adam, curve)


def inference_attributes(split: Split, cfg: Config, extractor: Optional[ParamStore]) -> Optional[np.ndarray]:
    if not cfg.uses_attributes:
        return None
    if cfg.attr_source == "ground_truth":
        return split.attr_ids
    if extractor is None:
        raise ValidationError("attr_source=extractor needs a trained attribute extractor")
    return predict_attributes(extractor, cfg, split.images)


def caption_split(params: ParamStore, cfg: Config, split: Split, cap_vocab: Vocabulary,
                  extractor: Optional[ParamStore] = None):
    """Greedy captions for every sample.

    Returns (captions, step tokens, attention traces); step tokens keep any
    emitted reserved token so they stay aligned with the traces.
    """
    attrs = inference_attributes(split, cfg, extractor)
    ids, traces = generate(params, cfg, split.images, attrs, cfg.max_len)
    steps = [[cap_vocab.tokens[i] for i in t] for t in ids]
    return [decode_caption(t, cap_vocab) for t in ids], steps, traces


def score_captions(split: Split, captions: Sequence[List[str]]) -> MetricsReport:
    corpus = CorpusPair({k: list(c) for k, c in zip(split.ids, captions)},
                        {k: [r] for k, r in zip(split.ids, split.references)})
    return evaluate_corpus(corpus)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def ablation_data(cfg: Config, seed: int) -> Prepared:
    samples = generate_synthetic(SyntheticSpec.from_config(cfg.replace(seed=seed)))
    return prepare(split_dataset(samples, seed=seed), cfg)


def run_ablation(data: Prepared, base: Config, seed: Optional[int] = None,
                 modes: Sequence[str] = ABLATION_ORDER, log: Optional[Callable[[str], None]] = None
                 ) -> List[Tuple[str, MetricsReport]]:
    """Train every mode on the same data and seed, score on the test split.

    One attribute extractor is trained per call and shared by the modes
    that inject attributes.
    """
    cfg0 = base.replace(seed=base.seed if seed is None else seed)
    train, val, test = data.splits["train"], data.splits.get("val"), data.splits["test"]
    extractor = None
    needs = cfg0.attr_source == "extractor" or cfg0.train_attr_source == "extractor"
    if needs and any(m in ("full", "attr_only") for m in modes):
        extractor = train_attribute_extractor(train, cfg0, val).params
    rows = []
    for mode in modes:
        cfg = cfg0.replace(mode=mode)
        res = train_captioner(train, cfg, len(data.cap_vocab), len(data.attr_vocab), val, extractor=extractor)
        caps, _, _ = caption_split(res.params, cfg, test, data.cap_vocab, extractor)
        rep = score_captions(test, caps)
        if log:
            log(rep.csv_row(mode))
        rows.append((mode, rep))
    return rows


def ablation_csv(rows: Sequence[Tuple[str, MetricsReport]]) -> str:
    return report_csv(rows)


# ---------------------------------------------------------------------------
# attention localization
# ---------------------------------------------------------------------------

def localization_traces(split: Split, tokens: Sequence[List[str]], traces, grid_side: int,
                        categories: Sequence[str], uniform: bool = False) -> List[SampleTrace]:
    """Attention map at the step that emitted each category word.

    ``uniform`` swaps every map for the constant 1/k map (the baseline).
    """
    cats = set(categories)
    k = grid_side * grid_side
    out = []
    for toks, steps, box in zip(tokens, traces, split.bboxes):
        maps = {}
        for step, (tok, tr) in enumerate(zip(toks, steps)):
            if tok in cats and tok not in maps:
                w = np.full(k, 1.0 / k) if uniform else tr.alpha
                maps[tok] = AttentionMap(w.reshape(grid_side, grid_side), tok, step, tr.beta)
        size = tuple(split.images.shape[2:])
        out.append(SampleTrace(maps, BBox(*box), size))
    return out


# ---------------------------------------------------------------------------
# memorization harness
# ---------------------------------------------------------------------------

OVERFIT_DEFAULTS = dict(samples_per_class=8, epochs=300, lr=1e-3, lr_decay=False,
                        mode="full", attr_source="ground_truth")


@dataclass
class OverfitResult:
    data: Prepared
    params: ParamStore
    cfg: Config
    captions: List[List[str]]
    tokens: List[List[str]]
    traces: list
    report: MetricsReport

    @property
    def exact(self) -> float:
        train = self.data.splits["train"]
        return float(np.mean([c == r for c, r in zip(self.captions, train.references)]))


def overfit_harness(base: Optional[Config] = None, on_epoch=None, **overrides) -> OverfitResult:
    """Train on a tiny corpus and caption the same images.

    Every sample goes to the training split. The lr schedule is off by
    default: compounded over 300 epochs it stalls learning near epoch 45.
    """
    cfg = (base or Config()).replace(**{**OVERFIT_DEFAULTS, **overrides})
    samples = generate_synthetic(SyntheticSpec.from_config(cfg))
    for s in samples:
        s.split = "train"
    data = prepare(samples, cfg)
    train = data.splits["train"]
    extractor = None
    if cfg.uses_attributes and "extractor" in (cfg.attr_source, cfg.train_attr_source):
        extractor = train_attribute_extractor(train, cfg).params
    res = train_captioner(train, cfg, len(data.cap_vocab), len(data.attr_vocab), on_epoch=on_epoch,
                          extractor=extractor)
    caps, steps, traces = caption_split(res.params, cfg, train, data.cap_vocab, extractor)
    return OverfitResult(data, res.params, cfg, caps, steps, traces, score_captions(train, caps))
