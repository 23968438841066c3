"""End-to-end captioner: encoder trunk + decoder, loss/gradient and decoding."""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import decoder as dec
from .config import Config
from .core import ParamStore, RngStream
from .encoder import FeatureGrid, encode_batch, features_backward, init_extractor, init_trunk
from .errors import ValidationError


def init_captioner(cfg: Config, n_caption: int, n_attr: int, seed: Optional[int] = None) -> ParamStore:
    rng = RngStream(cfg.seed if seed is None else seed)
    params = ParamStore()
    init_trunk(params, "encoder", rng.spawn(1), cfg.conv_channels, cfg.d)
    dec.init_decoder(params, cfg, n_caption, n_attr, rng.spawn(2))
    return params


def init_attribute_extractor(cfg: Config, n_attr: int, seed: Optional[int] = None) -> ParamStore:
    rng = RngStream(cfg.seed if seed is None else seed).spawn(3)
    params = ParamStore()
    init_extractor(params, rng, n_attr, cfg.conv_channels, cfg.d, cfg.extractor_channels, cfg.extractor_fc)
    return params


def _attrs(attr_ids, B: int, cfg: Config, params: ParamStore) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if not cfg.uses_attributes:
        return np.zeros((B, 0)), None
    if attr_ids is None:
        raise ValidationError(f"mode {cfg.mode!r} needs attribute ids")
    ids = np.atleast_2d(np.asarray(attr_ids, dtype=np.int64))
    return dec.attribute_vector(ids, params, cfg), ids


def loss_and_grad(params: ParamStore, cfg: Config, images: np.ndarray, captions: np.ndarray,
                  attr_ids=None, backward: bool = True) -> float:
    """Mean token NLL of a batch; accumulates gradients into ``params``."""
    feats, enc_cache = encode_batch(images, params, cfg.grid_side)
    A, ids = _attrs(attr_ids, images.shape[0], cfg, params)
    loss, dR, dvg, dA = dec.sequence_loss(feats, A, captions, params, cfg, backward)
    if backward:
        if ids is not None:
            dec.attribute_vector_backward(dA, ids, params, cfg)
        if not cfg.freeze_encoder:
            k = feats.regions.shape[1]
            dR = dR + dvg[:, None, :] / k
            features_backward(dR, enc_cache, params)
    return float(loss)


def caption_nll(caption_ids: Sequence[int], V: FeatureGrid, A: Optional[np.ndarray],
                params: ParamStore, cfg: Config) -> float:
    """Teacher-forced mean NLL of one encoded caption given its features."""
    ids = np.asarray(caption_ids, dtype=np.int64)
    if ids.size < 2:
        raise ValidationError("caption must contain at least <start> and one target token")
    feats = FeatureGrid(V.regions[None], V.global_[None], V.grid_side)
    A2 = np.zeros((1, 0)) if A is None else np.atleast_2d(A)
    loss, *_ = dec.sequence_loss(feats, A2, ids[None], params, cfg, backward=False)
    return float(loss)


def generate(params: ParamStore, cfg: Config, images: np.ndarray, attr_ids=None,
             max_len: Optional[int] = None, batch: int = 64):
    """Greedy captions (token id lists) and attention traces for images."""
    tokens: List[List[int]] = []
    traces: list = []
    for lo in range(0, images.shape[0], batch):
        x = images[lo:lo + batch]
        feats, _ = encode_batch(x, params, cfg.grid_side)
        a = None if attr_ids is None else np.asarray(attr_ids)[lo:lo + batch]
        A, _ = _attrs(a, x.shape[0], cfg, params)
        t, tr = dec.decode_batch(feats, A, params, cfg, max_len or cfg.max_len)
        tokens += t
        traces += tr
    return tokens, traces


# ---------------------------------------------------------------------------
# end-to-end gradient check on a tiny model
# ---------------------------------------------------------------------------

TINY_DIMS = dict(image_size=8, grid_side=2, conv_channels=4, d=8, hidden=16, caption_embed=8,
                 attr_embed=4, att_dim=8)


def tiny_grad_check(mode: str = "full", seed: int = 0, tol: float = 1e-4, eps: float = 3e-5,
                    scale: float = 0.3, vocab: int = 20, n_attr: int = 12, caption_len: int = 5):
    """Central-difference check of every captioner gradient at d=8, H=16, k=4.

    Parameters are redrawn as ``scale * N(0, 1)``: at the default init the
    attention and sentinel gradients are ~1e-8, below what a central
    difference can resolve in float64, so the check runs at a generic point
    where every pathway carries signal.
    """
    from .core import grad_check

    cfg = Config(mode=mode, seed=seed, **TINY_DIMS).validate()
    params = init_captioner(cfg, vocab, n_attr, seed=seed)
    rng = RngStream(seed).spawn(0x6C)
    for n in params.names():
        params[n] = scale * rng.normal(params[n].shape)
    image = rng.uniform((1, 3, cfg.image_size, cfg.image_size))
    caption = np.concatenate([[dec.START], rng.integers(4, vocab, caption_len), [dec.END]])[None]
    attrs = np.sort(rng.permutation(n_attr - 4)[:cfg.n_attributes] + 4)[None]

    def f(ps):
        return loss_and_grad(ps, cfg, image, caption, attrs)

    def f_only(ps):
        return loss_and_grad(ps, cfg, image, caption, attrs, backward=False)

    return grad_check(f, params, eps=eps, tol=tol, seed=seed, loss_only=f_only)
