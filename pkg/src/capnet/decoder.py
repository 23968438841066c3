"""LSTM caption decoder with attribute injection and adaptive attention.

Per step t (batched over a leading axis)::

    x_t   = [E_cap[y_{t-1}] ; A]
    i,f,o,g = split(W [x_t ; h_{t-1}] + b)        m_t = f*m_{t-1} + i*g
    h_t   = o * tanh(m_t)
    gs_t  = sigmoid(W_x x_t + W_h h_{t-1})        s_t = W_proj (gs_t * tanh(m_t))
    z     = w . tanh(W_v V + W_g h_t)             alpha = softmax(z)
    c_t   = sum_i alpha_i v_i
    z_s   = w . tanh(W_s s_t + W_g h_t)           beta = softmax([z ; z_s])[-1]
    chat  = beta s_t + (1 - beta) c_t
    p_t   = softmax(W_p (W_c chat + h_t))

The image also enters through h_0 = W_ih v_g + b, m_0 = W_im v_g + b.
Ablations drop A (``adaptive``), the attention block (``attr_only``), or
both (``vanilla``); without attention p_t = softmax(W_p h_t).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .config import Config
from .core import ParamStore, RngStream, sigmoid, softmax, softmax_backward
from .encoder import FeatureGrid
from .errors import DimensionError, ValidationError, VocabularyError

START, END = 1, 2


@dataclass
class DecoderState:
    h: np.ndarray
    m: np.ndarray
    t: int = 0


@dataclass
class AttentionResult:
    alpha: np.ndarray
    beta: float
    c: np.ndarray
    s: np.ndarray
    c_hat: np.ndarray


def attr_width(cfg: Config) -> int:
    if not cfg.uses_attributes:
        return 0
    return cfg.attr_embed * (cfg.n_attributes if cfg.attr_fusion == "concat" else 1)


def init_decoder(params: ParamStore, cfg: Config, n_caption: int, n_attr: int, rng: RngStream) -> None:
    H, d, Ec, a = cfg.hidden, cfg.d, cfg.caption_embed, cfg.att_dim
    LA = attr_width(cfg)
    X = Ec + LA

    def glorot(shape):
        return rng.normal(shape) * np.sqrt(2.0 / (shape[0] + shape[-1]))

    params.add("embed.caption", rng.normal((n_caption, Ec)) * 0.1)
    if cfg.uses_attributes:
        params.add("embed.attribute", rng.normal((n_attr, cfg.attr_embed)) * 0.1)
    params.add("init.W_h", glorot((H, d)))
    params.add("init.b_h", np.zeros(H))
    params.add("init.W_m", glorot((H, d)))
    params.add("init.b_m", np.zeros(H))
    W = glorot((4 * H, X + H))
    b = np.zeros(4 * H)
    b[H:2 * H] = 1.0  # forget gate starts open
    params.add("lstm.W", W)
    params.add("lstm.b", b)
    if cfg.uses_attention:
        params.add("sentinel.W_x", glorot((H, X)))
        params.add("sentinel.W_h", glorot((H, H)))
        params.add("sentinel.W_proj", glorot((d, H)))
        params.add("attention.W_v", glorot((a, d)))
        params.add("attention.W_g", glorot((a, H)))
        params.add("attention.W_s", glorot((a, d)))
        params.add("attention.w", rng.normal(a) * np.sqrt(1.0 / a))
        if d != H:
            params.add("output.W_c", glorot((H, d)))
    params.add("output.W_p", glorot((n_caption, H)))


# ---------------------------------------------------------------------------
# single operations
# ---------------------------------------------------------------------------

def embed_tokens(ids: Sequence[int], table: str, params: ParamStore) -> np.ndarray:
    name = {"caption": "embed.caption", "attribute": "embed.attribute"}.get(table)
    if name is None:
        raise ValidationError(f"unknown embedding table {table!r}")
    E = params[name]
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
        raise VocabularyError(f"token id out of range for {table} vocabulary of size {E.shape[0]}")
    return E[ids]


def attribute_vector(attr_ids: np.ndarray, params: ParamStore, cfg: Config) -> np.ndarray:
    """(B, n_attr) ids -> (B, LA) fused attribute representation A."""
    attr_ids = np.atleast_2d(attr_ids)
    B = attr_ids.shape[0]
    if not cfg.uses_attributes:
        return np.zeros((B, 0))
    if attr_ids.shape[1] != cfg.n_attributes:
        raise DimensionError(f"expected {cfg.n_attributes} attribute ids, got {attr_ids.shape[1]}")
    rows = embed_tokens(attr_ids, "attribute", params)  # B x n x e
    if cfg.attr_fusion == "concat":
        return rows.reshape(B, -1)
    if cfg.attr_fusion == "sum":
        return rows.sum(axis=1)
    return rows.mean(axis=1)


def attribute_vector_backward(dA: np.ndarray, attr_ids: np.ndarray, params: ParamStore, cfg: Config) -> None:
    if not cfg.uses_attributes:
        return
    B, n = attr_ids.shape
    e = cfg.attr_embed
    if cfg.attr_fusion == "concat":
        drows = dA.reshape(B, n, e)
    else:
        scale = 1.0 if cfg.attr_fusion == "sum" else 1.0 / n
        drows = np.broadcast_to(dA[:, None, :] * scale, (B, n, e))
    g = params.grad("embed.attribute")
    np.add.at(g, attr_ids.ravel(), drows.reshape(-1, e))


def initial_state(feats: FeatureGrid, params: ParamStore) -> DecoderState:
    vg = feats.global_
    h = vg @ params["init.W_h"].T + params["init.b_h"]
    m = vg @ params["init.W_m"].T + params["init.b_m"]
    return DecoderState(h, m, 0)


def _lstm(xa, h_prev, m_prev, params: ParamStore):
    H = h_prev.shape[-1]
    zcat = np.concatenate([xa, h_prev], axis=-1)
    gates = zcat @ params["lstm.W"].T + params["lstm.b"]
    i = sigmoid(gates[..., :H])
    f = sigmoid(gates[..., H:2 * H])
    o = sigmoid(gates[..., 2 * H:3 * H])
    g = np.tanh(gates[..., 3 * H:])
    m = f * m_prev + i * g
    tm = np.tanh(m)
    h = o * tm
    return h, m, (zcat, i, f, o, g, tm)


def lstm_step(x: np.ndarray, A: np.ndarray, prev: DecoderState, params: ParamStore):
    """One attribute-injected LSTM step.

    Returns the next state and the sentinel gate
    ``sigmoid(W_x [x; A] + W_h h_prev)`` (``None`` for models without a
    sentinel).
    """
    xa = np.concatenate([x, A], axis=-1)
    expected = params["lstm.W"].shape[1] - prev.h.shape[-1]
    if xa.shape[-1] != expected or prev.h.shape != prev.m.shape:
        raise DimensionError(f"lstm_step input width {xa.shape[-1]} != {expected} "
                             f"(h {prev.h.shape}, m {prev.m.shape})")
    h, m, _ = _lstm(xa, prev.h, prev.m, params)
    gate = None
    if "sentinel.W_x" in params:
        gate = sigmoid(xa @ params["sentinel.W_x"].T + prev.h @ params["sentinel.W_h"].T)
    return DecoderState(h, m, prev.t + 1), gate


def visual_sentinel(x_aug: np.ndarray, prev_h: np.ndarray, m: np.ndarray, gate_g: np.ndarray) -> np.ndarray:
    """s_t = g_t * tanh(m_t); ``x_aug`` and ``prev_h`` already shaped ``gate_g``."""
    return gate_g * np.tanh(m)


def _regions(V) -> np.ndarray:
    return V.regions if isinstance(V, FeatureGrid) else np.asarray(V)


def spatial_attention(V, h: np.ndarray, params: ParamStore, return_logits: bool = False):
    R = _regions(V)
    Vproj = R @ params["attention.W_v"].T
    hg = h @ params["attention.W_g"].T
    z = np.tanh(Vproj + hg[..., None, :]) @ params["attention.w"]
    alpha = softmax(z)
    c = np.einsum("...k,...kd->...d", alpha, R)
    return (c, alpha, z) if return_logits else (c, alpha)


def adaptive_context(c: np.ndarray, s: np.ndarray, h: np.ndarray, params: ParamStore, z: np.ndarray):
    """Mix spatial context and sentinel with gate beta = softmax([z; z_s])[-1]."""
    hg = h @ params["attention.W_g"].T
    zs = np.tanh(s @ params["attention.W_s"].T + hg) @ params["attention.w"]
    ext = softmax(np.concatenate([z, zs[..., None]], axis=-1))
    beta = ext[..., -1]
    c_hat = beta[..., None] * s + (1.0 - beta[..., None]) * c
    return c_hat, beta


def vocab_distribution(c_hat: Optional[np.ndarray], h: np.ndarray, params: ParamStore) -> np.ndarray:
    u = h
    if c_hat is not None:
        u = h + (c_hat @ params["output.W_c"].T if "output.W_c" in params else c_hat)
    return softmax(u @ params["output.W_p"].T)


# ---------------------------------------------------------------------------
# batched step with cache, and its backward pass
# ---------------------------------------------------------------------------

def _step_forward(emb, A, h_prev, m_prev, R, Vproj, params: ParamStore, attention: bool):
    xa = np.concatenate([emb, A], axis=1)
    h, m, lc = _lstm(xa, h_prev, m_prev, params)
    tm = lc[5]
    cache = {"xa": xa, "h_prev": h_prev, "m_prev": m_prev, "lstm": lc, "h": h}
    if attention:
        gs = sigmoid(xa @ params["sentinel.W_x"].T + h_prev @ params["sentinel.W_h"].T)
        s_raw = gs * tm
        s = s_raw @ params["sentinel.W_proj"].T
        hg = h @ params["attention.W_g"].T
        w = params["attention.w"]
        T1 = np.tanh(Vproj + hg[:, None, :])
        z = T1 @ w
        alpha = softmax(z)
        c = np.einsum("bk,bkd->bd", alpha, R)
        T2 = np.tanh(s @ params["attention.W_s"].T + hg)
        zs = T2 @ w
        ext = softmax(np.concatenate([z, zs[:, None]], axis=1))
        beta = ext[:, -1]
        c_hat = beta[:, None] * s + (1.0 - beta[:, None]) * c
        u = h + (c_hat @ params["output.W_c"].T if "output.W_c" in params else c_hat)
        cache.update(gs=gs, s_raw=s_raw, s=s, T1=T1, alpha=alpha, c=c, T2=T2, ext=ext,
                     beta=beta, c_hat=c_hat)
    else:
        u = h
    logits = u @ params["output.W_p"].T
    cache["u"] = u
    return logits, h, m, cache


def _step_backward(dlogits, dh, dm, cache, R, params: ParamStore, attention: bool, acc):
    """Returns (dh_prev, dm_prev, demb, dA, dR, dVproj) for this step."""
    u = cache["u"]
    acc["output.W_p"] += dlogits.T @ u
    du = dlogits @ params["output.W_p"]
    dh = dh + du
    xa, h_prev, m_prev = cache["xa"], cache["h_prev"], cache["m_prev"]
    zcat, i, f, o, g, tm = cache["lstm"]
    h = cache["h"]
    dxa = np.zeros_like(xa)
    dh_prev = np.zeros_like(h_prev)
    dR = dVproj = None
    dtm = np.zeros_like(tm)
    if attention:
        s, c, c_hat, beta, ext, alpha = (cache[k] for k in ("s", "c", "c_hat", "beta", "ext", "alpha"))
        T1, T2, gs, s_raw = cache["T1"], cache["T2"], cache["gs"], cache["s_raw"]
        w = params["attention.w"]
        if "output.W_c" in params:
            acc["output.W_c"] += du.T @ c_hat
            dc_hat = du @ params["output.W_c"]
        else:
            dc_hat = du
        dbeta = np.sum(dc_hat * (s - c), axis=1)
        ds = beta[:, None] * dc_hat
        dc = (1.0 - beta[:, None]) * dc_hat
        dext = np.zeros_like(ext)
        dext[:, -1] = dbeta
        dext_logits = softmax_backward(dext, ext)
        k = alpha.shape[1]
        dalpha = np.einsum("bd,bkd->bk", dc, R)
        dR = alpha[:, :, None] * dc[:, None, :]
        dz = softmax_backward(dalpha, alpha) + dext_logits[:, :k]
        dzs = dext_logits[:, k]
        acc["attention.w"] += np.einsum("bk,bka->a", dz, T1) + dzs @ T2
        dpre1 = dz[:, :, None] * w * (1.0 - T1 * T1)
        dVproj = dpre1
        dhg = dpre1.sum(axis=1)
        dpre2 = dzs[:, None] * w * (1.0 - T2 * T2)
        acc["attention.W_s"] += dpre2.T @ s
        ds += dpre2 @ params["attention.W_s"]
        dhg += dpre2
        acc["attention.W_g"] += dhg.T @ h
        dh = dh + dhg @ params["attention.W_g"]
        acc["sentinel.W_proj"] += ds.T @ s_raw
        ds_raw = ds @ params["sentinel.W_proj"]
        dtm += ds_raw * gs
        dgs_pre = ds_raw * tm * gs * (1.0 - gs)
        acc["sentinel.W_x"] += dgs_pre.T @ xa
        acc["sentinel.W_h"] += dgs_pre.T @ h_prev
        dxa += dgs_pre @ params["sentinel.W_x"]
        dh_prev += dgs_pre @ params["sentinel.W_h"]
    do = dh * tm
    dtm += dh * o
    dm = dm + dtm * (1.0 - tm * tm)
    dgates = np.concatenate([dm * g * i * (1.0 - i),
                             dm * m_prev * f * (1.0 - f),
                             do * o * (1.0 - o),
                             dm * i * (1.0 - g * g)], axis=1)
    acc["lstm.W"] += dgates.T @ zcat
    acc["lstm.b"] += dgates.sum(axis=0)
    dzcat = dgates @ params["lstm.W"]
    X = xa.shape[1]
    dxa += dzcat[:, :X]
    dh_prev += dzcat[:, X:]
    dm_prev = dm * f
    return dh_prev, dm_prev, dxa, dR, dVproj


@dataclass
class SequenceCache:
    steps: list
    feats: FeatureGrid
    Vproj: Optional[np.ndarray]
    inputs: np.ndarray
    A: np.ndarray


def sequence_loss(feats: FeatureGrid, A: np.ndarray, captions: np.ndarray, params: ParamStore,
                  cfg: Config, backward: bool = True):
    """Teacher-forced mean token NLL over a padded batch of encoded captions.

    ``captions`` is (B, T) with <start> first and <pad>=0 after <end>.
    Returns (loss, dR, dvg, dA) where the gradients flow back to the
    encoder regions, the global feature and the attribute vector; parameter
    gradients of the decoder are accumulated into ``params``.
    """
    captions = np.asarray(captions, dtype=np.int64)
    if captions.ndim != 2 or captions.shape[1] < 2:
        raise ValidationError("captions must be (B, T>=2) with start and end tokens")
    inputs, targets = captions[:, :-1], captions[:, 1:]
    mask = (targets != 0).astype(np.float64)
    ntok = mask.sum()
    if ntok == 0:
        raise ValidationError("empty caption")
    attention = cfg.uses_attention
    R = feats.regions
    B, T = inputs.shape
    emb_all = embed_tokens(inputs, "caption", params)
    st = initial_state(feats, params)
    h, m = st.h, st.m
    Vproj = R @ params["attention.W_v"].T if attention else None
    loss = 0.0
    steps = []
    for t in range(T):
        logits, h, m, cache = _step_forward(emb_all[:, t], A, h, m, R, Vproj, params, attention)
        p = softmax(logits)
        tgt = targets[:, t]
        loss -= np.sum(np.log(p[np.arange(B), tgt] + 1e-300) * mask[:, t])
        cache["p"] = p
        steps.append(cache)
    loss /= ntok
    if not backward:
        return loss, None, None, None

    acc = {n: np.zeros_like(params[n]) for n in params.names()
           if not n.startswith("encoder.") and not n.startswith("extractor.")}
    dh = np.zeros_like(h)
    dm = np.zeros_like(m)
    dR = np.zeros_like(R)
    dVproj_total = np.zeros_like(Vproj) if attention else None
    demb = np.zeros_like(emb_all)
    dA = np.zeros_like(A)
    Ec = emb_all.shape[2]
    for t in reversed(range(T)):
        cache = steps[t]
        dlogits = cache["p"].copy()
        dlogits[np.arange(B), targets[:, t]] -= 1.0
        dlogits *= mask[:, t:t + 1] / ntok
        dh, dm, dxa, dRt, dVp = _step_backward(dlogits, dh, dm, cache, R, params, attention, acc)
        demb[:, t] = dxa[:, :Ec]
        dA += dxa[:, Ec:]
        if attention:
            dR += dRt
            dVproj_total += dVp
    vg = feats.global_
    acc["init.W_h"] += dh.T @ vg
    acc["init.b_h"] += dh.sum(axis=0)
    acc["init.W_m"] += dm.T @ vg
    acc["init.b_m"] += dm.sum(axis=0)
    dvg = dh @ params["init.W_h"] + dm @ params["init.W_m"]
    if attention:
        acc["attention.W_v"] += np.einsum("bka,bkd->ad", dVproj_total, R)
        dR += dVproj_total @ params["attention.W_v"]
    np.add.at(acc["embed.caption"], inputs.ravel(), demb.reshape(-1, Ec))
    for n, g in acc.items():
        if n in params and n != "embed.attribute":
            params.accumulate(n, g)
    return loss, dR, dvg, dA


# ---------------------------------------------------------------------------
# greedy decoding
# ---------------------------------------------------------------------------

def decode_batch(feats: FeatureGrid, A: np.ndarray, params: ParamStore, cfg: Config, max_len: int):
    """Greedy argmax decoding (ties -> lowest id) for a batch.

    Returns (token lists without start/end, per-sample lists of
    AttentionResult, one per emitted token including <end>).
    """
    if max_len < 1:
        raise ValidationError("max_len must be >= 1")
    attention = cfg.uses_attention
    R = feats.regions
    B = R.shape[0]
    st = initial_state(feats, params)
    h, m = st.h, st.m
    Vproj = R @ params["attention.W_v"].T if attention else None
    prev = np.full(B, START, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    tokens: List[List[int]] = [[] for _ in range(B)]
    traces: List[List[AttentionResult]] = [[] for _ in range(B)]
    for _ in range(max_len):
        emb = params["embed.caption"][prev]
        logits, h, m, cache = _step_forward(emb, A, h, m, R, Vproj, params, attention)
        nxt = np.argmax(logits, axis=1)
        for b in range(B):
            if done[b]:
                continue
            if attention:
                traces[b].append(AttentionResult(cache["alpha"][b].copy(), float(cache["beta"][b]),
                                                 cache["c"][b].copy(), cache["s"][b].copy(),
                                                 cache["c_hat"][b].copy()))
            if nxt[b] == END:
                done[b] = True
            else:
                tokens[b].append(int(nxt[b]))
        if done.all():
            break
        prev = nxt
    return tokens, traces


def decode_greedy(V: FeatureGrid, A: np.ndarray, params: ParamStore, cfg: Config, max_len: int):
    """Single-sample greedy decode; ``V`` holds (k, d) regions."""
    feats = FeatureGrid(V.regions[None], V.global_[None], V.grid_side)
    A2 = np.zeros((1, 0)) if A is None else np.atleast_2d(A)
    toks, traces = decode_batch(feats, A2, params, cfg, max_len)
    return toks[0], traces[0]
