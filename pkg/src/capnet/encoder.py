"""Small trainable CNN encoder and the sigmoid attribute extractor.

Trunk (shared architecture, separate weights for captioner and extractor)::

    conv 5x5 pad 2 (3 -> c1) -> relu -> maxpool 2x2 -> conv 5x5 pad 2 (c1 -> d)
    -> relu -> adaptive average pool to g x g

The captioner reads the g*g pooled cells as region vectors. The extractor
adds conv 5x5 -> relu -> global max pool -> fully connected -> relu -> one
sigmoid output per attribute word.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ParamStore, RngStream, sigmoid
from .errors import ConfigurationError, DimensionError, ValidationError


@dataclass
class FeatureGrid:
    regions: np.ndarray  # (k, d) or (B, k, d)
    global_: np.ndarray  # (d,) or (B, d)
    grid_side: int

    @property
    def k(self) -> int:
        return self.regions.shape[-2]


@dataclass
class AttributeProbs:
    probs: np.ndarray  # (n_attr,) or (B, n_attr)


# ---------------------------------------------------------------------------
# layers (batched: x is B x C x H x W)
# ---------------------------------------------------------------------------

def _pair(v) -> Tuple[int, int]:
    return (v, v) if np.isscalar(v) else (int(v[0]), int(v[1]))


def conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride=1, padding=0):
    """Batched valid cross-correlation via im2col. Returns (out, cache)."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv channel mismatch: input {x.shape} vs kernels {w.shape}")
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise DimensionError(f"kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    out = cols @ w.reshape(O, -1).T
    if b is not None:
        out += b
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, w, (sh, sw), (ph, pw), (Ho, Wo))


def conv2d_backward(dout: np.ndarray, cache):
    xshape, cols, w, (sh, sw), (ph, pw), (Ho, Wo) = cache
    B, C, H, W = xshape
    O, _, kh, kw = w.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
    dxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, ph:ph + H, pw:pw + W]
    return dx, dw, db


def maxpool2d(x: np.ndarray, window, stride=None):
    """Batched max pooling; ties go to the first element in row-major order."""
    wh, ww = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    B, C, H, W = x.shape
    if wh > H or ww > W:
        raise DimensionError(f"pool window {(wh, ww)} exceeds input {x.shape}")
    Ho = (H - wh) // sh + 1
    Wo = (W - ww) // sw + 1
    win = sliding_window_view(x, (wh, ww), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, wh * ww)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(Ho)[:, None] * sh + arg // ww
    cols = np.arange(Wo)[None, :] * sw + arg % ww
    plane = (np.arange(B)[:, None, None, None] * C + np.arange(C)[None, :, None, None]) * (H * W)
    idx = plane + rows * W + cols
    return out, (x.shape, idx)


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    xshape, idx = cache
    size = int(np.prod(xshape))
    return np.bincount(idx.ravel(), weights=dout.ravel(), minlength=size).reshape(xshape)


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input cells floor(i*n/g) .. ceil((i+1)*n/g) - 1."""
    if n_out > n_in:
        raise DimensionError(f"cannot pool {n_in} cells down to {n_out}")
    P = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        P[i, lo:hi] = 1.0 / (hi - lo)
    return P


def adaptive_avgpool(x: np.ndarray, g: int):
    P = adaptive_pool_matrix(x.shape[2], g)
    Q = adaptive_pool_matrix(x.shape[3], g)
    return P @ x @ Q.T, (P, Q)


def adaptive_avgpool_backward(dout: np.ndarray, cache) -> np.ndarray:
    P, Q = cache
    return P.T @ dout @ Q


# single-image forms of the two primitive layers

def conv_forward(inp: np.ndarray, kernels: np.ndarray, stride=(1, 1), padding=(0, 0)) -> np.ndarray:
    if inp.ndim != 3 or kernels.ndim != 4:
        raise DimensionError(f"conv_forward expects c x h x w input and o x c x kh x kw kernels, "
                             f"got {inp.shape} and {kernels.shape}")
    out, _ = conv2d(inp[None], kernels, None, stride, padding)
    return out[0]


def maxpool_forward(inp: np.ndarray, window, stride) -> np.ndarray:
    if inp.ndim != 3:
        raise DimensionError(f"maxpool_forward expects c x h x w input, got {inp.shape}")
    out, _ = maxpool2d(inp[None], window, stride)
    return out[0]


# ---------------------------------------------------------------------------
# trunk
# ---------------------------------------------------------------------------

def init_trunk(params: ParamStore, prefix: str, rng: RngStream, channels: int, d: int) -> None:
    params.add(f"{prefix}.conv1.W", rng.normal((channels, 3, 5, 5)) * np.sqrt(2.0 / 75))
    params.add(f"{prefix}.conv1.b", np.zeros(channels))
    params.add(f"{prefix}.conv2.W", rng.normal((d, channels, 5, 5)) * np.sqrt(2.0 / (25 * channels)))
    params.add(f"{prefix}.conv2.b", np.zeros(d))


def trunk_forward(x: np.ndarray, params: ParamStore, prefix: str, grid_side: int):
    """x: B x 3 x H x W -> B x d x g x g."""
    try:
        w1, b1 = params[f"{prefix}.conv1.W"], params[f"{prefix}.conv1.b"]
        w2, b2 = params[f"{prefix}.conv2.W"], params[f"{prefix}.conv2.b"]
    except KeyError as exc:
        raise ConfigurationError(f"parameter store lacks trunk weights {exc}") from None
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected B x 3 x H x W images, got {x.shape}")
    a1, c1 = conv2d(x, w1, b1, 1, 2)
    r1 = np.maximum(a1, 0.0)
    p1, cp = maxpool2d(r1, 2, 2)
    a2, c2 = conv2d(p1, w2, b2, 1, 2)
    r2 = np.maximum(a2, 0.0)
    if r2.shape[2] < grid_side or r2.shape[3] < grid_side:
        raise DimensionError(f"feature map {r2.shape[2:]} smaller than grid {grid_side}")
    out, ca = adaptive_avgpool(r2, grid_side)
    return out, (c1, a1, cp, c2, a2, ca)


def trunk_backward(dout: np.ndarray, cache, params: ParamStore, prefix: str, accumulate: bool = True):
    c1, a1, cp, c2, a2, ca = cache
    dr2 = adaptive_avgpool_backward(dout, ca)
    da2 = dr2 * (a2 > 0)
    dp1, dw2, db2 = conv2d_backward(da2, c2)
    dr1 = maxpool2d_backward(dp1, cp)
    da1 = dr1 * (a1 > 0)
    dx, dw1, db1 = conv2d_backward(da1, c1)
    if accumulate:
        params.accumulate(f"{prefix}.conv1.W", dw1)
        params.accumulate(f"{prefix}.conv1.b", db1)
        params.accumulate(f"{prefix}.conv2.W", dw2)
        params.accumulate(f"{prefix}.conv2.b", db2)
    return dx


def grid_to_features(grid: np.ndarray) -> FeatureGrid:
    B, d, g, _ = grid.shape
    regions = grid.reshape(B, d, g * g).transpose(0, 2, 1)
    return FeatureGrid(np.ascontiguousarray(regions), regions.mean(axis=1), g)


def encode_batch(images: np.ndarray, params: ParamStore, grid_side: int = 7, prefix: str = "encoder"):
    grid, cache = trunk_forward(images, params, prefix, grid_side)
    return grid_to_features(grid), cache


def encode_image(image: np.ndarray, params: ParamStore, grid_side: int = 7,
                 image_size: Optional[int] = None) -> FeatureGrid:
    """Encode one 3 x H x W image into k = grid_side**2 region vectors."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected a 3 x H x W image, got {image.shape}")
    if image_size is not None and image.shape[1:] != (image_size, image_size):
        raise DimensionError(f"image is {image.shape[1:]}, config expects {image_size}x{image_size}")
    fg, _ = encode_batch(image[None], params, grid_side)
    return FeatureGrid(fg.regions[0], fg.global_[0], grid_side)


def features_backward(d_regions: np.ndarray, cache, params: ParamStore, prefix: str = "encoder",
                      accumulate: bool = True):
    """Backprop region gradients (B x k x d) into the trunk."""
    B, k, d = d_regions.shape
    g = int(round(np.sqrt(k)))
    dgrid = d_regions.transpose(0, 2, 1).reshape(B, d, g, g)
    return trunk_backward(dgrid, cache, params, prefix, accumulate)


# ---------------------------------------------------------------------------
# attribute extractor
# ---------------------------------------------------------------------------

EXTRACTOR = "extractor"


def init_extractor(params: ParamStore, rng: RngStream, n_attr: int, channels: int = 16, d: int = 64,
                   head_channels: int = 64, fc: int = 64) -> None:
    init_trunk(params, f"{EXTRACTOR}.trunk", rng, channels, d)
    params.add(f"{EXTRACTOR}.head.W", rng.normal((head_channels, d, 5, 5)) * np.sqrt(2.0 / (25 * d)))
    params.add(f"{EXTRACTOR}.head.b", np.zeros(head_channels))
    params.add(f"{EXTRACTOR}.fc.W", rng.normal((fc, head_channels)) * np.sqrt(2.0 / head_channels))
    params.add(f"{EXTRACTOR}.fc.b", np.zeros(fc))
    params.add(f"{EXTRACTOR}.out.W", np.zeros((n_attr, fc)))
    params.add(f"{EXTRACTOR}.out.b", np.zeros(n_attr))


def extractor_forward(images: np.ndarray, params: ParamStore, grid_side: int = 7):
    """Returns (logits B x n_attr, cache)."""
    needed = [f"{EXTRACTOR}.{k}" for k in ("head.W", "head.b", "fc.W", "fc.b", "out.W", "out.b")]
    missing = [n for n in needed if n not in params]
    if missing:
        raise ConfigurationError(f"parameter store lacks extractor weights: {', '.join(missing)}")
    grid, tc = trunk_forward(images, params, f"{EXTRACTOR}.trunk", grid_side)
    a, hc = conv2d(grid, params[f"{EXTRACTOR}.head.W"], params[f"{EXTRACTOR}.head.b"], 1, 2)
    r = np.maximum(a, 0.0)
    pooled, pc = maxpool2d(r, r.shape[2:])
    pooled = pooled[:, :, 0, 0]
    f_pre = pooled @ params[f"{EXTRACTOR}.fc.W"].T + params[f"{EXTRACTOR}.fc.b"]
    phi = np.maximum(f_pre, 0.0)
    logits = phi @ params[f"{EXTRACTOR}.out.W"].T + params[f"{EXTRACTOR}.out.b"]
    return logits, (tc, hc, a, pc, pooled, f_pre, phi)


def extractor_backward(dlogits: np.ndarray, cache, params: ParamStore) -> None:
    tc, hc, a, pc, pooled, f_pre, phi = cache
    params.accumulate(f"{EXTRACTOR}.out.W", dlogits.T @ phi)
    params.accumulate(f"{EXTRACTOR}.out.b", dlogits.sum(axis=0))
    dphi = dlogits @ params[f"{EXTRACTOR}.out.W"]
    df = dphi * (f_pre > 0)
    params.accumulate(f"{EXTRACTOR}.fc.W", df.T @ pooled)
    params.accumulate(f"{EXTRACTOR}.fc.b", df.sum(axis=0))
    dpooled = df @ params[f"{EXTRACTOR}.fc.W"]
    dr = maxpool2d_backward(dpooled[:, :, None, None], pc)
    da = dr * (a > 0)
    dgrid, dw, db = conv2d_backward(da, hc)
    params.accumulate(f"{EXTRACTOR}.head.W", dw)
    params.accumulate(f"{EXTRACTOR}.head.b", db)
    trunk_backward(dgrid, tc, params, f"{EXTRACTOR}.trunk")


PROB_CLIP = 1e-12


def attribute_probs(image: np.ndarray, params: ParamStore, grid_side: int = 7) -> AttributeProbs:
    """Sigmoid outputs, clipped like the loss so they stay inside (0, 1)
    even where float64 rounds the sigmoid to exactly 0 or 1."""
    batched = image.ndim == 4
    logits, _ = extractor_forward(image if batched else image[None], params, grid_side)
    p = np.clip(sigmoid(logits), PROB_CLIP, 1.0 - PROB_CLIP)
    return AttributeProbs(p if batched else p[0])


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("attribute labels must be 0 or 1")
    return labels


def attribute_loss(probs, labels, beta_n: float = 1.0) -> float:
    """Class-weighted binary cross-entropy with positive weight 100 * beta_n.

    Summed over attribute words, averaged over the batch (leading axis when
    2-D).
    """
    q = probs.probs if isinstance(probs, AttributeProbs) else np.asarray(probs, dtype=np.float64)
    y = _check_labels(labels)
    if q.shape != y.shape:
        raise DimensionError(f"probs {q.shape} vs labels {y.shape}")
    beta_p = 100.0 * beta_n
    q = np.clip(q, PROB_CLIP, 1.0 - PROB_CLIP)
    per = -beta_p * y * np.log(q) - beta_n * (1.0 - y) * np.log(1.0 - q)
    if per.ndim == 1:
        return float(per.sum())
    return float(per.sum(axis=-1).mean())


def attribute_loss_from_logits(logits: np.ndarray, labels: np.ndarray, beta_n: float = 1.0):
    """Batched loss and its gradient w.r.t. the logits (B x n_attr)."""
    y = _check_labels(labels)
    q = sigmoid(logits)
    loss = attribute_loss(q, y, beta_n)
    beta_p = 100.0 * beta_n
    # the clip is flat outside its range, so those coordinates get no gradient
    live = (q > PROB_CLIP) & (q < 1.0 - PROB_CLIP)
    dlogits = (-beta_p * y * (1.0 - q) + beta_n * (1.0 - y) * q) * live / logits.shape[0]
    return loss, dlogits


def top_k_attributes(probs, k: int = 5) -> List[int]:
    """Ids of the k most probable words; ties resolve to the lower id."""
    p = probs.probs if isinstance(probs, AttributeProbs) else np.asarray(probs, dtype=np.float64)
    if k <= 0:
        raise ValidationError("k must be positive")
    if k > p.shape[-1]:
        raise ValidationError(f"k={k} exceeds attribute vocabulary size {p.shape[-1]}")
    order = np.lexsort((np.arange(p.size), -p))
    return [int(i) for i in order[:k]]
