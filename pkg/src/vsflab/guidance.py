"""Negative-prompt guidance combinators.

Every function here works on one attention head's already-projected
matrices (or on model outputs, for CFG). Multi-head bookkeeping lives in
:mod:`vsflab.mmdit`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ShapeError, as_matrix, concat_rows, l2_norm_rows, row_softmax

__all__ = [
    "Variant",
    "GuidanceSpec",
    "AttnPlan",
    "AttnInputs",
    "sdpa",
    "vsf_cross_attention",
    "joint_weights",
    "nasa_combine",
    "nag_combine",
    "cfg_combine",
    "wef_transform",
]


class Variant(str, enum.Enum):
    NONE = "none"
    CFG = "cfg"
    NASA = "nasa"
    NAG = "nag"
    VSF = "vsf"
    WEF = "wef"

    @property
    def needs_negative(self):
        return self is not Variant.NONE


@dataclass(frozen=True)
class GuidanceSpec:
    """Variant selector plus every guidance scalar.

    Fields that the active variant does not use are ignored, but they are
    still validated. ``masked`` and ``duplicate`` switch off the VSF
    attention mask and negative-token duplication for ablations.
    """

    variant: Variant = Variant.NONE
    alpha: float = 0.0
    beta: float = 0.0
    phi: float = 0.0
    tau: float = 1.0
    blend: float = 1.0
    lambda_: float = 1.0
    masked: bool = True
    duplicate: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("alpha", "beta", "phi", "tau", "blend", "lambda_"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        for name in ("alpha", "beta", "phi"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError(f"blend must lie in [0, 1], got {self.blend}")

    def as_dict(self):
        d = asdict(self)
        d["variant"] = self.variant.value
        d["lambda"] = d.pop("lambda_")
        return d


@dataclass
class AttnPlan:
    """Boolean allow-matrix plus additive logit bias over (query, key)."""

    allow: np.ndarray
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        self.allow = np.asarray(self.allow, dtype=bool)
        if self.bias is None:
            self.bias = np.zeros(self.allow.shape)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.allow.ndim != 2 or self.bias.shape != self.allow.shape:
            raise ShapeError(f"allow {self.allow.shape} and bias {self.bias.shape} must be equal 2-D shapes")

    @property
    def shape(self):
        return self.allow.shape


@dataclass
class AttnInputs:
    """Queries plus positive and negative keys/values for one head."""

    q: np.ndarray
    k_pos: np.ndarray
    v_pos: np.ndarray
    k_neg: np.ndarray
    v_neg: np.ndarray

    def __post_init__(self):
        for name in ("q", "k_pos", "v_pos", "k_neg", "v_neg"):
            setattr(self, name, as_matrix(getattr(self, name), name))
        d = self.q.shape[1]
        for name in ("k_pos", "v_pos", "k_neg", "v_neg"):
            if getattr(self, name).shape[1] != d:
                raise ShapeError(f"{name} has width {getattr(self, name).shape[1]}, expected head dim {d}")
        if self.k_pos.shape[0] != self.v_pos.shape[0] or self.k_neg.shape[0] != self.v_neg.shape[0]:
            raise ShapeError("keys and values must have matching row counts")

    @property
    def head_dim(self):
        return self.q.shape[1]

    @property
    def n_neg(self):
        return self.k_neg.shape[0]


def sdpa(q, k, v, plan=None):
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d) + bias) v``."""
    q, k, v = as_matrix(q, "q"), as_matrix(k, "k"), as_matrix(v, "v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    logits = q @ k.T / math.sqrt(q.shape[1])
    if plan is None:
        return row_softmax(logits) @ v
    if plan.shape != logits.shape:
        raise ShapeError(f"plan shape {plan.shape} does not match logits {logits.shape}")
    return row_softmax(logits, plan.allow, plan.bias) @ v


def joint_weights(inputs, plan=None):
    """Joint softmax weights over ``[K+, K-]``, split as ``(A+, A-)``."""
    k = concat_rows(inputs.k_pos, inputs.k_neg)
    logits = inputs.q @ k.T / math.sqrt(inputs.head_dim)
    if plan is None:
        w = row_softmax(logits)
    else:
        w = row_softmax(logits, plan.allow, plan.bias)
    n_p = inputs.k_pos.shape[0]
    return w[:, :n_p], w[:, n_p:]


def vsf_cross_attention(inputs, alpha, plan=None, beta=0.0):
    """Cross-attention with sign-flipped negative values.

    Keys of the negative prompt are concatenated unchanged; only their values
    are scaled by ``-alpha``. ``beta`` adds a ``-beta`` logit bias on the
    negative columns (off by default for cross-attention).
    """
    if inputs.n_neg == 0:
        raise ValueError("no negative tokens; use sdpa for unguided attention")
    k = concat_rows(inputs.k_pos, inputs.k_neg)
    v = concat_rows(inputs.v_pos, -float(alpha) * inputs.v_neg)
    if beta:
        n_q, n_p = inputs.q.shape[0], inputs.k_pos.shape[0]
        bias = np.zeros((n_q, k.shape[0]))
        bias[:, n_p:] = -float(beta)
        if plan is None:
            plan = AttnPlan(np.ones(bias.shape, dtype=bool), bias)
        else:
            plan = AttnPlan(plan.allow, plan.bias + bias)
    return sdpa(inputs.q, k, v, plan)


def _check_same(a, b, names):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{names[0]} {a.shape} and {names[1]} {b.shape} differ in shape")
    return a, b


def nasa_combine(z_pos, z_neg, alpha):
    z_pos, z_neg = _check_same(z_pos, z_neg, ("z_pos", "z_neg"))
    return z_pos - float(alpha) * z_neg


def nag_combine(z_pos, z_neg, phi, tau, blend, norm_ord=2):
    """Normalized attention guidance.

    Extrapolates away from ``z_neg``, caps each row's norm at ``tau`` times
    the matching ``z_pos`` row norm, then blends back toward ``z_pos``. Rows
    whose ``z_pos`` norm is zero pass through uncapped.
    """
    z_pos, z_neg = _check_same(z_pos, z_neg, ("z_pos", "z_neg"))
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    if not 0.0 <= blend <= 1.0:
        raise ValueError(f"blend must lie in [0, 1], got {blend}")
    z_ext = z_pos + float(phi) * (z_pos - z_neg)
    if norm_ord == 2:
        n_pos, n_ext = l2_norm_rows(z_pos), l2_norm_rows(z_ext)
    else:
        n_pos = np.linalg.norm(z_pos, ord=norm_ord, axis=-1)
        n_ext = np.linalg.norm(z_ext, ord=norm_ord, axis=-1)
    cap = tau * n_pos
    over = (n_pos > 0) & (n_ext > cap)
    scale = np.ones_like(n_ext)
    np.divide(cap, n_ext, out=scale, where=over)
    z_hat = z_ext * scale[..., None]
    return blend * z_hat + (1.0 - blend) * z_pos


def cfg_combine(u_neg, u_pos, lambda_):
    """``u_neg + lambda (u_pos - u_neg)``, written so lambda in {0, 1} is exact."""
    u_neg, u_pos = _check_same(u_neg, u_pos, ("u_neg", "u_pos"))
    lam = float(lambda_)
    return lam * u_pos + (1.0 - lam) * u_neg


def wef_transform(pos_embed, neg_embed, alpha):
    """Append the negative prompt embedding scaled by ``-alpha``; padding kept."""
    pos_embed = np.asarray(pos_embed, dtype=np.float64)
    neg_embed = np.asarray(neg_embed, dtype=np.float64)
    if pos_embed.shape[-1] != neg_embed.shape[-1]:
        raise ShapeError(f"embedding widths differ: {pos_embed.shape[-1]} vs {neg_embed.shape[-1]}")
    return np.concatenate([pos_embed, -float(alpha) * neg_embed], axis=-2)
