"""Dense float64 linear-algebra substrate.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here add the shape checks and the masked/biased softmax that the attention
code relies on; everything else is ordinary numpy.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "MaskError",
    "Rng",
    "as_matrix",
    "matmul",
    "row_softmax",
    "concat_cols",
    "concat_rows",
    "l2_norm_rows",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class MaskError(ValueError):
    """Raised when an attention row has no admissible column."""


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_softmax(logits, allow=None, bias=None):
    """Softmax over the last axis with a boolean allow-mask and additive bias.

    Disallowed entries get an effective logit of ``-inf`` and come out as
    exactly 0. Leading batch axes broadcast.

    Raises:
        ShapeError: if ``allow`` or ``bias`` cannot broadcast to ``logits``.
        MaskError: if some row has no allowed column.
    """
    z = np.asarray(logits, dtype=np.float64)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        try:
            z = z + np.broadcast_to(bias, z.shape)
        except ValueError:
            raise ShapeError(f"bias shape {bias.shape} does not match logits {z.shape}") from None
    if allow is not None:
        allow = np.asarray(allow, dtype=bool)
        try:
            allow = np.broadcast_to(allow, z.shape)
        except ValueError:
            raise ShapeError(f"allow shape {allow.shape} does not match logits {z.shape}") from None
        empty = ~allow.any(axis=-1)
        if empty.any():
            row = np.argwhere(empty)[0]
            raise MaskError(f"row {tuple(int(i) for i in row)} has every column masked")
        z = np.where(allow, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def concat_cols(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"cannot concatenate columns of {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_rows(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cannot concatenate rows of {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=0)


def l2_norm_rows(m):
    m = np.asarray(m, dtype=np.float64)
    return np.sqrt(np.sum(m * m, axis=-1))


class Rng:
    """Seeded counter-based generator (Philox 4x64).

    Draw sequences depend only on the seed and the call sequence. ``child``
    derives an independent stream from a key without touching this one, so
    per-sample noise does not depend on evaluation order.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, *keys):
        ss = np.random.SeedSequence([self.seed, *(int(k) & 0xFFFFFFFF for k in keys)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)
