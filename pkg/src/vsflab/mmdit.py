"""MMDiT-style joint attention block with Value Sign Flip.

The joint sequence is laid out as ``[IMG, POS, NEG0, NEG1]``. ``NEG1`` is a
fresh copy of ``NEG0`` made at every block entry; it only supplies keys and
values (values scaled by ``-alpha``) and produces no output row. Image
tokens use the image-stream weights, every text token (positive and both
negative copies) uses the text-stream weights.

Token tensors may be ``(n, D)`` or batched ``(B, n, D)``; all work is done
batched. ``block_forward_train``/``block_backward`` carry the hand-derived
gradient used by the trainer.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .guidance import AttnPlan, nag_combine, nasa_combine
from .tensor import MaskError, ShapeError

__all__ = [
    "Segment",
    "TokenSeq",
    "BlockParams",
    "init_block",
    "strip_padding",
    "duplicate_negative",
    "drop_negative_copy",
    "build_plan",
    "joint_attention",
    "block_forward",
    "block_forward_train",
    "block_backward",
    "split_guided_block_forward",
    "extract_neg_attn",
    "layer_norm",
    "layer_norm_backward",
    "sigmoid",
    "silu",
]

LN_EPS = 1e-6


class Segment(enum.IntEnum):
    IMG = 0
    POS = 1
    NEG0 = 2
    NEG1 = 3
    PAD = 4


@dataclass(frozen=True)
class TokenSeq:
    """Joint token sequence with contiguous IMG/POS/NEG0/NEG1 blocks.

    ``counts`` is ``(n_img, n_pos, n_neg0, n_neg1)``. Positive-prompt padding
    stays inside the POS block.
    """

    tokens: np.ndarray
    counts: tuple

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        counts = tuple(int(c) for c in self.counts)
        if len(counts) == 3:
            counts = counts + (0,)
        if len(counts) != 4 or min(counts) < 0:
            raise ValueError(f"counts must be four non-negative ints, got {self.counts}")
        if tokens.ndim not in (2, 3):
            raise ShapeError(f"tokens must be (n, D) or (B, n, D), got {tokens.shape}")
        if tokens.shape[-2] != sum(counts):
            raise ShapeError(f"{tokens.shape[-2]} token rows but counts sum to {sum(counts)}")
        if counts[3] not in (0, counts[2]):
            raise ValueError(f"NEG1 count {counts[3]} must be 0 or equal NEG0 count {counts[2]}")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "counts", counts)

    @property
    def n_img(self):
        return self.counts[0]

    @property
    def n_pos(self):
        return self.counts[1]

    @property
    def n_neg(self):
        return self.counts[2]

    @property
    def has_copy(self):
        return self.counts[3] > 0

    @property
    def segments(self):
        return np.repeat(np.arange(4), self.counts)

    def block(self, segment):
        start = sum(self.counts[: int(segment)])
        return self.tokens[..., start : start + self.counts[int(segment)], :]

    @classmethod
    def from_parts(cls, img, pos, neg=None):
        img = np.asarray(img, dtype=np.float64)
        pos = np.asarray(pos, dtype=np.float64)
        if neg is None:
            neg = np.zeros(img.shape[:-2] + (0, img.shape[-1]))
        neg = np.asarray(neg, dtype=np.float64)
        tokens = np.concatenate([img, pos, neg], axis=-2)
        return cls(tokens, (img.shape[-2], pos.shape[-2], neg.shape[-2], 0))


@dataclass
class BlockParams:
    """Weights of one block. ``tensors`` maps ``"img.wq"``-style names to arrays.

    The image stream is modulated by a conditioning vector through
    ``img.w_mod``/``img.b_mod`` (shift, scale, gate for attention and MLP).
    The text stream has its own LayerNorm affine terms. Q/K/V projections
    carry no bias, so scaling a projected value is the same as scaling the
    token's value path.
    """

    tensors: dict
    heads: int

    def __post_init__(self):
        dim = self.dim
        if dim % self.heads:
            raise ValueError(f"model dim {dim} is not divisible by {self.heads} heads")

    @property
    def dim(self):
        return self.tensors["img.wq"].shape[0]

    @property
    def head_dim(self):
        return self.dim // self.heads

    def __getitem__(self, key):
        return self.tensors[key]


def init_block(rng, dim, heads, mlp_ratio=4, cond_dim=None, gate_init=0.0, mod_scale=0.0):
    """Random block parameters.

    ``gate_init`` sets the residual gates' bias (0 gives the adaLN-zero start
    used for training; 1 gives a plain residual block). ``mod_scale`` sets
    the spread of the modulation weights.
    """
    cond_dim = dim if cond_dim is None else cond_dim
    hidden = mlp_ratio * dim
    s = 1.0 / math.sqrt(dim)
    t = {}
    for stream in ("img", "txt"):
        for name in ("wq", "wk", "wv", "wo"):
            t[f"{stream}.{name}"] = rng.normal((dim, dim), s)
        t[f"{stream}.bo"] = np.zeros(dim)
        t[f"{stream}.w1"] = rng.normal((dim, hidden), s)
        t[f"{stream}.b1"] = np.zeros(hidden)
        t[f"{stream}.w2"] = rng.normal((hidden, dim), 1.0 / math.sqrt(hidden))
        t[f"{stream}.b2"] = np.zeros(dim)
    t["txt.ln1_g"] = np.ones(dim)
    t["txt.ln1_b"] = np.zeros(dim)
    t["txt.ln2_g"] = np.ones(dim)
    t["txt.ln2_b"] = np.zeros(dim)
    t["img.w_mod"] = rng.normal((cond_dim, 6 * dim), mod_scale) if mod_scale else np.zeros((cond_dim, 6 * dim))
    b_mod = np.zeros(6 * dim)
    b_mod[2 * dim : 3 * dim] = gate_init
    b_mod[5 * dim :] = gate_init
    t["img.b_mod"] = b_mod
    return BlockParams(t, heads)


def sigmoid(x):
    # tanh form: faster than exp in numpy and never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def _silu_grad(x, sig=None):
    s = sigmoid(x) if sig is None else sig
    return s * (1.0 + x * (1.0 - s))


def layer_norm(x, eps=LN_EPS):
    """Affine-free LayerNorm over the last axis; returns ``(y, rstd)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * rstd, rstd


def layer_norm_backward(dy, y, rstd):
    return rstd * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


def strip_padding(neg_tokens, pad_mask):
    """Drop padding rows from a negative-prompt fragment, order preserved."""
    neg_tokens = np.asarray(neg_tokens, dtype=np.float64)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if pad_mask.shape != (neg_tokens.shape[-2],):
        raise ShapeError(f"pad mask of length {pad_mask.shape} for {neg_tokens.shape[-2]} rows")
    return neg_tokens[..., ~pad_mask, :]


def duplicate_negative(seq):
    """Append NEG1 as an exact copy of the NEG0 block."""
    if seq.has_copy:
        raise ValueError("sequence already carries a NEG1 block")
    if seq.n_neg == 0:
        return seq
    neg0 = seq.block(Segment.NEG0)
    tokens = np.concatenate([seq.tokens, neg0], axis=-2)
    n_i, n_p, n_n, _ = seq.counts
    return TokenSeq(tokens, (n_i, n_p, n_n, n_n))


def drop_negative_copy(seq):
    if not seq.has_copy:
        return seq
    n_i, n_p, n_n, _ = seq.counts
    return TokenSeq(seq.tokens[..., : n_i + n_p + n_n, :], (n_i, n_p, n_n, 0))


def build_plan(counts, beta=0.0, masked=True):
    """Attention allow-matrix and bias for ``[IMG, POS, NEG0, NEG1]``.

    Query rows cover IMG, POS and NEG0; key columns cover all four blocks.
    With masking on: IMG sees IMG, POS and NEG1; POS sees IMG and POS; NEG0
    sees IMG and NEG0. ``-beta`` is added on IMG x NEG1, or on IMG x NEG0
    when there is no copy and masking is off (the no-duplication ablation).
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) == 3:
        counts = counts + (0,)
    n_i, n_p, n_n, n_c = counts
    if min(counts) < 0 or n_c not in (0, n_n):
        raise ValueError(f"inconsistent counts {counts}")
    n_q = n_i + n_p + n_n
    n_k = n_q + n_c
    img, pos = slice(0, n_i), slice(n_i, n_i + n_p)
    neg0, neg1 = slice(n_i + n_p, n_q), slice(n_q, n_k)
    bias = np.zeros((n_q, n_k))
    if masked:
        allow = np.zeros((n_q, n_k), dtype=bool)
        allow[img, img] = allow[img, pos] = allow[img, neg1] = True
        allow[pos, img] = allow[pos, pos] = True
        allow[neg0, img] = allow[neg0, neg0] = True
        bias[img, neg1] = -beta
    else:
        allow = np.ones((n_q, n_k), dtype=bool)
        bias[img, neg1 if n_c else neg0] = -beta
    return AttnPlan(allow, bias)


def _as_batch(tokens):
    tokens = np.asarray(tokens, dtype=np.float64)
    return (tokens[None], True) if tokens.ndim == 2 else (tokens, False)


def _modulation(params, cond, batch):
    w, b = params["img.w_mod"], params["img.b_mod"]
    mod = b[None] if cond is None else np.asarray(cond, dtype=w.dtype) @ w + b
    mod = np.broadcast_to(mod, (batch, mod.shape[-1]))
    return mod[:, None, :]


def _additive_mask(plan):
    return np.where(plan.allow, plan.bias, -np.inf)


def _softmax_rows(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, heads):
    b, n, dim = x.shape
    return x.reshape(b, n, heads, dim // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def _value_scale(counts, alpha, flip_neg0=False):
    n_i, n_p, n_n, n_c = counts
    scale = np.ones(n_i + n_p + n_n + n_c)
    if n_c:
        scale[n_i + n_p + n_n :] = -alpha
    elif flip_neg0:
        scale[n_i + n_p :] = -alpha
    return scale


def _check_plan(plan, counts):
    n_i, n_p, n_n, n_c = counts
    expect = (n_i + n_p + n_n, n_i + n_p + n_n + n_c)
    if plan.shape != expect:
        raise ShapeError(f"plan shape {plan.shape} does not match counts {counts} (expected {expect})")
    if expect[0] and not plan.allow.any(axis=1).all():
        raise MaskError(f"row {int(np.argmin(plan.allow.any(axis=1)))} has every column masked")


def _attention_core(x, counts, params, v_scale, plan, mod):
    """Projected multi-head joint attention. ``x`` holds every row incl. NEG1."""
    n_i = counts[0]
    n_q = sum(counts[:3])
    h, d = params.heads, params.head_dim
    xi, xt = x[:, :n_i], x[:, n_i:]
    sh1, sc1 = mod[..., : params.dim], mod[..., params.dim : 2 * params.dim]
    yi, ri = layer_norm(xi)
    hi = yi * (1.0 + sc1) + sh1
    yt, rt = layer_norm(xt)
    ht = yt * params["txt.ln1_g"] + params["txt.ln1_b"]
    q = np.concatenate([hi @ params["img.wq"], ht[:, : n_q - n_i] @ params["txt.wq"]], axis=1)
    k = np.concatenate([hi @ params["img.wk"], ht @ params["txt.wk"]], axis=1)
    v_raw = np.concatenate([hi @ params["img.wv"], ht @ params["txt.wv"]], axis=1)
    v = v_raw * v_scale[:, None].astype(v_raw.dtype)
    qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    logits = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(d)
    att = _softmax_rows(logits + _additive_mask(plan).astype(logits.dtype))
    o = _merge_heads(att @ vh)
    oi = o[:, :n_i] @ params["img.wo"] + params["img.bo"]
    ot = o[:, n_i:] @ params["txt.wo"] + params["txt.bo"]
    cache = dict(yi=yi, ri=ri, hi=hi, yt=yt, rt=rt, ht=ht, qh=qh, kh=kh, vh=vh,
                 att=att, o=o, v_scale=v_scale, logits=logits)
    return oi, ot, cache


def _mlp(x, stream, params, scale=None, shift=None):
    if stream == "img":
        z, r = layer_norm(x)
        m = z * (1.0 + scale) + shift
    else:
        z, r = layer_norm(x)
        m = z * params["txt.ln2_g"] + params["txt.ln2_b"]
    u = m @ params[f"{stream}.w1"] + params[f"{stream}.b1"]
    sig = sigmoid(u)
    s = u * sig
    f = s @ params[f"{stream}.w2"] + params[f"{stream}.b2"]
    return f, dict(z=z, r=r, m=m, u=u, s=s, sig=sig)


def joint_attention(seq, params, alpha, plan, cond=None):
    """Multi-head joint attention over a duplicated sequence.

    Returns a TokenSeq with the IMG, POS and NEG0 rows of the per-stream
    output projection (NEG1 emits nothing). The image rows are not gated;
    gating belongs to the residual step in :func:`block_forward`.
    """
    tokens, single = _as_batch(seq.tokens)
    _check_plan(plan, seq.counts)
    mod = _modulation(params, cond, tokens.shape[0])
    v_scale = _value_scale(seq.counts, alpha)
    oi, ot, _ = _attention_core(tokens, seq.counts, params, v_scale, plan, mod)
    out = np.concatenate([oi, ot], axis=1)
    n_i, n_p, n_n, _ = seq.counts
    return TokenSeq(out[0] if single else out, (n_i, n_p, n_n, 0))


def block_forward_train(x, counts, params, alpha=0.0, beta=0.0, cond=None,
                        masked=True, duplicate=True, plan=None):
    """Batched block forward that also returns the cache for backprop.

    ``x`` is ``(B, n_img + n_pos + n_neg, D)`` without a NEG1 block.
    """
    n_i, n_p, n_n = (int(c) for c in counts[:3])
    dup = duplicate and n_n > 0
    if dup:
        x_full = np.concatenate([x, x[:, n_i + n_p :]], axis=1)
        full_counts = (n_i, n_p, n_n, n_n)
    else:
        x_full = x
        full_counts = (n_i, n_p, n_n, 0)
    if plan is None:
        plan = build_plan(full_counts, beta, masked)
    _check_plan(plan, full_counts)
    v_scale = _value_scale(full_counts, alpha, flip_neg0=not dup)
    dim = params.dim
    mod = _modulation(params, cond, x.shape[0])
    gate1 = mod[..., 2 * dim : 3 * dim]
    sh2, sc2, gate2 = mod[..., 3 * dim : 4 * dim], mod[..., 4 * dim : 5 * dim], mod[..., 5 * dim :]
    oi, ot, att_cache = _attention_core(x_full, full_counts, params, v_scale, plan, mod)
    xi2 = x[:, :n_i] + gate1 * oi
    xt2 = x[:, n_i:] + ot
    fi, mlp_i = _mlp(xi2, "img", params, sc2, sh2)
    ft, mlp_t = _mlp(xt2, "txt", params)
    out = np.concatenate([xi2 + gate2 * fi, xt2 + ft], axis=1)
    cache = dict(counts=full_counts, dup=dup, mod=mod, cond=cond, att=att_cache,
                 oi=oi, fi=fi, mlp_i=mlp_i, mlp_t=mlp_t, batch=x.shape[0])
    return out, cache


def _linear_grads(grads, name_w, name_b, inp, dout):
    grads[name_w] = grads.get(name_w, 0) + inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    if name_b is not None:
        grads[name_b] = grads.get(name_b, 0) + dout.sum(axis=(0, 1))


def _mlp_backward(df, stream, params, c, grads):
    _linear_grads(grads, f"{stream}.w2", f"{stream}.b2", c["s"], df)
    du = (df @ params[f"{stream}.w2"].T) * _silu_grad(c["u"], c["sig"])
    _linear_grads(grads, f"{stream}.w1", f"{stream}.b1", c["m"], du)
    dm = du @ params[f"{stream}.w1"].T
    return dm


def block_backward(dout, cache, params):
    """Gradients of a block given ``dL/d(output)``.

    Returns ``(dx, grads, dcond)``; ``dcond`` is None when the forward ran
    without a conditioning vector.
    """
    n_i, n_p, n_n, n_c = cache["counts"]
    n_q = n_i + n_p + n_n
    dim, h, d = params.dim, params.heads, params.head_dim
    mod, a = cache["mod"], cache["att"]
    sc1 = mod[..., dim : 2 * dim]
    gate1 = mod[..., 2 * dim : 3 * dim]
    sc2, gate2 = mod[..., 4 * dim : 5 * dim], mod[..., 5 * dim :]
    grads = {}
    dmod = np.zeros((cache["batch"], 1, 6 * dim), dtype=dout.dtype)

    dxi3, dxt3 = dout[:, :n_i], dout[:, n_i:]
    # image MLP (modulated, gated)
    mi = cache["mlp_i"]
    dmod[..., 5 * dim :] = (dxi3 * cache["fi"]).sum(axis=1, keepdims=True)
    dmi = _mlp_backward(dxi3 * gate2, "img", params, mi, grads)
    dmod[..., 4 * dim : 5 * dim] = (dmi * mi["z"]).sum(axis=1, keepdims=True)
    dmod[..., 3 * dim : 4 * dim] = dmi.sum(axis=1, keepdims=True)
    dxi2 = dxi3 + layer_norm_backward(dmi * (1.0 + sc2), mi["z"], mi["r"])
    # text MLP
    mt = cache["mlp_t"]
    dmt = _mlp_backward(dxt3, "txt", params, mt, grads)
    grads["txt.ln2_g"] = (dmt * mt["z"]).sum(axis=(0, 1))
    grads["txt.ln2_b"] = dmt.sum(axis=(0, 1))
    dxt2 = dxt3 + layer_norm_backward(dmt * params["txt.ln2_g"], mt["z"], mt["r"])

    # attention residual
    dmod[..., 2 * dim : 3 * dim] = (dxi2 * cache["oi"]).sum(axis=1, keepdims=True)
    doi = dxi2 * gate1
    o = a["o"]
    _linear_grads(grads, "img.wo", "img.bo", o[:, :n_i], doi)
    _linear_grads(grads, "txt.wo", "txt.bo", o[:, n_i:], dxt2)
    do = np.concatenate([doi @ params["img.wo"].T, dxt2 @ params["txt.wo"].T], axis=1)
    doh = _split_heads(do, h)
    att = a["att"]
    datt = doh @ a["vh"].transpose(0, 1, 3, 2)
    dvh = att.transpose(0, 1, 3, 2) @ doh
    dlogits = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
    dlogits /= math.sqrt(d)
    dqh = dlogits @ a["kh"]
    dkh = dlogits.transpose(0, 1, 3, 2) @ a["qh"]
    dq, dk = _merge_heads(dqh), _merge_heads(dkh)
    dv = _merge_heads(dvh) * a["v_scale"][:, None].astype(dvh.dtype)

    hi, ht = a["hi"], a["ht"]
    _linear_grads(grads, "img.wq", None, hi, dq[:, :n_i])
    _linear_grads(grads, "img.wk", None, hi, dk[:, :n_i])
    _linear_grads(grads, "img.wv", None, hi, dv[:, :n_i])
    _linear_grads(grads, "txt.wq", None, ht[:, : n_q - n_i], dq[:, n_i:])
    _linear_grads(grads, "txt.wk", None, ht, dk[:, n_i:])
    _linear_grads(grads, "txt.wv", None, ht, dv[:, n_i:])
    dhi = dq[:, :n_i] @ params["img.wq"].T + dk[:, :n_i] @ params["img.wk"].T + dv[:, :n_i] @ params["img.wv"].T
    dht = dk[:, n_i:] @ params["txt.wk"].T + dv[:, n_i:] @ params["txt.wv"].T
    dht[:, : n_q - n_i] += dq[:, n_i:] @ params["txt.wq"].T

    dmod[..., dim : 2 * dim] = (dhi * a["yi"]).sum(axis=1, keepdims=True)
    dmod[..., :dim] = dhi.sum(axis=1, keepdims=True)
    dxi = dxi2 + layer_norm_backward(dhi * (1.0 + sc1), a["yi"], a["ri"])
    grads["txt.ln1_g"] = (dht * a["yt"]).sum(axis=(0, 1))
    grads["txt.ln1_b"] = dht.sum(axis=(0, 1))
    dxt_full = layer_norm_backward(dht * params["txt.ln1_g"], a["yt"], a["rt"])
    dxt = dxt_full[:, : n_q - n_i] + dxt2
    if cache["dup"]:
        dxt[:, n_p:] += dxt_full[:, n_q - n_i :]
    dx = np.concatenate([dxi, dxt], axis=1)

    dmod = dmod[:, 0]
    cond = cache["cond"]
    grads["img.b_mod"] = dmod.sum(axis=0)
    dcond = None
    if cond is None:
        grads["img.w_mod"] = np.zeros_like(params["img.w_mod"])
    else:
        grads["img.w_mod"] = np.broadcast_to(cond, (dmod.shape[0], cond.shape[-1])).T @ dmod
        dcond = dmod @ params["img.w_mod"].T
    return dx, grads, dcond


def block_forward(seq, params, alpha=0.0, beta=0.0, cond=None, masked=True, duplicate=True):
    """One VSF block: duplicate NEG0, masked/biased joint attention with
    ``-alpha`` on NEG1 values, gated residual, per-stream MLP.

    The returned sequence has no NEG1 block; the next block duplicates the
    updated NEG0 again.
    """
    if seq.has_copy:
        raise ValueError("block_forward expects a sequence without NEG1")
    tokens, single = _as_batch(seq.tokens)
    out, _ = block_forward_train(tokens, seq.counts, params, alpha, beta, cond, masked, duplicate)
    return TokenSeq(out[0] if single else out, seq.counts[:3] + (0,))


def _guided_attention_core(x, counts, params, mod, combine):
    """Two attention passes per block: ``[IMG, POS]`` and ``[IMG, NEG]``.

    Image rows of the two passes are merged per head by ``combine``.
    """
    n_i, n_p, n_n = counts
    h, d = params.heads, params.head_dim
    xi, xt = x[:, :n_i], x[:, n_i:]
    sh1, sc1 = mod[..., : params.dim], mod[..., params.dim : 2 * params.dim]
    hi = layer_norm(xi)[0] * (1.0 + sc1) + sh1
    ht = layer_norm(xt)[0] * params["txt.ln1_g"] + params["txt.ln1_b"]
    proj = {}
    for name in ("wq", "wk", "wv"):
        proj[name] = _split_heads(
            np.concatenate([hi @ params[f"img.{name}"], ht @ params[f"txt.{name}"]], axis=1), h)
    pos_rows = np.r_[0 : n_i + n_p]
    neg_rows = np.r_[0:n_i, n_i + n_p : n_i + n_p + n_n]

    def attend(rows):
        q, k, v = (proj[n][:, :, rows] for n in ("wq", "wk", "wv"))
        att = _softmax_rows(q @ k.transpose(0, 1, 3, 2) / math.sqrt(d))
        return att @ v

    z_pos, z_neg = attend(pos_rows), attend(neg_rows)
    zi = combine(z_pos[:, :, :n_i], z_neg[:, :, :n_i])
    o = _merge_heads(np.concatenate([zi, z_pos[:, :, n_i:], z_neg[:, :, n_i:]], axis=2))
    oi = o[:, :n_i] @ params["img.wo"] + params["img.bo"]
    ot = o[:, n_i:] @ params["txt.wo"] + params["txt.bo"]
    return oi, ot


def split_guided_block_forward(x, counts, params, spec, cond=None):
    """Block forward for attention-space baselines (NASA or NAG).

    Uses one projection per row and two attention computations per block.
    """
    from .guidance import Variant

    if spec.variant is Variant.NASA:
        def combine(zp, zn):
            return nasa_combine(zp, zn, spec.alpha)
    elif spec.variant is Variant.NAG:
        def combine(zp, zn):
            return nag_combine(zp, zn, spec.phi, spec.tau, spec.blend)
    else:
        raise ValueError(f"split attention is only defined for NASA/NAG, got {spec.variant}")
    n_i = int(counts[0])
    dim = params.dim
    mod = _modulation(params, cond, x.shape[0])
    gate1 = mod[..., 2 * dim : 3 * dim]
    sh2, sc2, gate2 = mod[..., 3 * dim : 4 * dim], mod[..., 4 * dim : 5 * dim], mod[..., 5 * dim :]
    oi, ot = _guided_attention_core(x, tuple(int(c) for c in counts[:3]), params, mod, combine)
    xi2 = x[:, :n_i] + gate1 * oi
    xt2 = x[:, n_i:] + ot
    fi, _ = _mlp(xi2, "img", params, sc2, sh2)
    ft, _ = _mlp(xt2, "txt", params)
    return np.concatenate([xi2 + gate2 * fi, xt2 + ft], axis=1)


def neg_attention_map(cache, params):
    """Head-averaged raw IMG x NEG1 logits, averaged over NEG1 columns."""
    n_i, n_p, n_n, n_c = cache["counts"]
    if n_c == 0:
        raise ValueError("no duplicated negative block in this forward")
    n_q = n_i + n_p + n_n
    raw = cache["att"]["logits"][:, :, :n_i, n_q:]
    return raw.mean(axis=(1, 3))


def extract_neg_attn(seq, params, cond=None, grid=None):
    """Unnormalized image-to-negative attention per image token.

    Computes ``Q K^T / sqrt(d)`` for IMG queries against NEG1 keys without
    bias or masking, averages over heads and negative tokens, and reshapes to
    ``grid`` (defaults to a square grid).
    """
    if seq.n_neg == 0:
        raise ValueError("sequence has no negative prompt tokens")
    if not seq.has_copy:
        seq = duplicate_negative(seq)
    tokens, single = _as_batch(seq.tokens)
    mod = _modulation(params, cond, tokens.shape[0])
    n_i, n_p, n_n, _ = seq.counts
    n_q = n_i + n_p + n_n
    h, d = params.heads, params.head_dim
    hi = layer_norm(tokens[:, :n_i])[0] * (1.0 + mod[..., params.dim : 2 * params.dim]) + mod[..., : params.dim]
    hc = layer_norm(tokens[:, n_q:])[0] * params["txt.ln1_g"] + params["txt.ln1_b"]
    q = _split_heads(hi @ params["img.wq"], h)
    k = _split_heads(hc @ params["txt.wk"], h)
    maps = (q @ k.transpose(0, 1, 3, 2) / math.sqrt(d)).mean(axis=(1, 3))
    if grid is None:
        side = int(round(math.sqrt(n_i)))
        grid = (side, n_i // side) if side * (n_i // side) == n_i else (n_i,)
    maps = maps.reshape((maps.shape[0],) + tuple(grid))
    return maps[0] if single else maps

