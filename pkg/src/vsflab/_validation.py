"""Input checks shared by the estimator front end."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .data import IMAGE_SIZE, MAX_PROMPT_LEN, Prompt, tokenize

IMAGE_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, 3)


def check_images(X):
    """Return ``X`` as a float64 ``(n, 16, 16, 3)`` array in [0, 1].

    Flat ``(n, 768)`` input is reshaped.
    """
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim == 2 and X.shape[1] == int(np.prod(IMAGE_SHAPE)):
        X = X.reshape((-1,) + IMAGE_SHAPE)
    if X.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"expected images of shape (n, 16, 16, 3) or (n, 768), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_prompt(p, name="prompt"):
    """A :class:`Prompt` from text, a Prompt, or a sequence of token ids."""
    if isinstance(p, Prompt):
        return p
    if isinstance(p, str):
        return tokenize(p)
    try:
        return Prompt(tuple(int(i) for i in p))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{name}: cannot interpret {p!r} as a prompt ({exc})") from None


def check_prompts(y, n_samples=None):
    """Token-id matrix ``(n, 8)`` from strings, Prompts or an id array."""
    if isinstance(y, np.ndarray) and y.ndim == 2 and y.dtype.kind in "iu":
        prompts = [check_prompt(row) for row in y]
    else:
        prompts = [check_prompt(p) for p in y]
    ids = np.array([p.ids for p in prompts], dtype=np.int64).reshape(-1, MAX_PROMPT_LEN)
    if n_samples is not None and ids.shape[0] != n_samples:
        raise ValueError(f"got {ids.shape[0]} prompts for {n_samples} images")
    return ids


def check_seeds(seeds):
    if np.isscalar(seeds):
        seeds = [seeds]
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    return seeds
