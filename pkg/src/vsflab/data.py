"""Synthetic colored-shape images, a 16-word prompt vocabulary, and the
deterministic attribute oracle that scores generated images.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensor import Rng

IMAGE_SIZE = 16
MAX_PROMPT_LEN = 8

VOCAB = (
    "<pad>", "a", "an", "the", "image", "of", "one", "shape",
    "square", "circle", "cross", "red", "green", "blue", "picture", "some",
)
PAD_ID = 0
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
SHAPES = ("square", "circle", "cross")
COLORS = ("red", "green", "blue")
RADII = (3, 4)
CELL_CENTERS = (5, 8, 10)
POSITION_JITTER = 0

FULL_TEMPLATES = (
    "a {color} {shape}", "the {color} {shape}", "{color} {shape}",
    "image of a {color} {shape}", "picture of one {color} {shape}", "some {color} {shape}",
)
SHAPE_TEMPLATES = (
    "a {shape}", "the {shape}", "{shape}", "image of a {shape}",
    "one {shape} shape", "picture of a {shape}",
)
COLOR_TEMPLATES = ("{color}", "a {color} shape", "some {color} shape", "image of one {color} shape")
TEMPLATE_WEIGHTS = (0.5, 0.3, 0.2)

# oracle thresholds, calibrated on rendered training images and noise
FOREGROUND = 0.35
DOMINANCE = 0.5
MIN_COLOR_PIXELS = 8
SHAPE_FLOOR = 0.55


@dataclass(frozen=True)
class Prompt:
    ids: tuple

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if len(ids) > MAX_PROMPT_LEN:
            raise ValueError(f"prompt longer than {MAX_PROMPT_LEN} tokens")
        if any(not 0 <= i < len(VOCAB) for i in ids):
            raise ValueError(f"token id out of range in {ids}")
        seen_pad = False
        for i in ids:
            if i == PAD_ID:
                seen_pad = True
            elif seen_pad:
                raise ValueError("padding may only appear at the tail of a prompt")
        ids = ids + (PAD_ID,) * (MAX_PROMPT_LEN - len(ids))
        object.__setattr__(self, "ids", ids)

    @property
    def pad_mask(self):
        return np.array([i == PAD_ID for i in self.ids])

    @property
    def words(self):
        return [VOCAB[i] for i in self.ids if i != PAD_ID]

    @property
    def text(self):
        return " ".join(self.words)

    @property
    def shape(self):
        return next((w for w in self.words if w in SHAPES), None)

    @property
    def color(self):
        return next((w for w in self.words if w in COLORS), None)

    def __len__(self):
        return len(self.words)


def tokenize(text):
    words = text.lower().split()
    unknown = [w for w in words if w not in WORD_TO_ID or w == "<pad>"]
    if unknown:
        raise ValueError(f"unknown word(s) {unknown}; vocabulary is {VOCAB[1:]}")
    return Prompt(tuple(WORD_TO_ID[w] for w in words))


@dataclass(frozen=True)
class ToyImage:
    pixels: np.ndarray
    shape: str | None = None
    color: str | None = None
    cell: tuple | None = None


def shape_mask(shape, cy, cx, radius, size=IMAGE_SIZE):
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    if shape == "square":
        return (dy <= radius) & (dx <= radius)
    if shape == "circle":
        return dy**2 + dx**2 <= (radius + 0.5) ** 2
    if shape == "cross":
        return ((dy <= 1) & (dx <= radius)) | ((dx <= 1) & (dy <= radius))
    raise ValueError(f"unknown shape {shape!r}")


def render(shape, color, cell, rng, jitter=POSITION_JITTER):
    """Draw one shape; size (and optional position) jitter come from ``rng``."""
    radius = RADII[int(rng.integers(len(RADII)))]
    jy, jx = rng.integers(-jitter, jitter + 1, size=2) if jitter else (0, 0)
    cy, cx = CELL_CENTERS[cell[0]] + int(jy), CELL_CENTERS[cell[1]] + int(jx)
    pixels = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    pixels[shape_mask(shape, cy, cx, radius), COLORS.index(color)] = 1.0
    return ToyImage(pixels, shape, color, tuple(cell))


def make_prompt(shape, color, rng, kind=None):
    kinds = ("full", "shape", "color")
    if kind is None:
        kind = kinds[int(np.searchsorted(np.cumsum(TEMPLATE_WEIGHTS), rng.random(), side="right"))]
    templates = {"full": FULL_TEMPLATES, "shape": SHAPE_TEMPLATES, "color": COLOR_TEMPLATES}[kind]
    template = templates[int(rng.integers(len(templates)))]
    return tokenize(template.format(shape=shape, color=color))


def make_dataset(n, seed=0):
    """``n`` (image, prompt) pairs stratified over shape x color.

    Item ``i`` gets combination ``i mod 9`` before a seeded shuffle, so every
    combination appears ``n // 9`` or ``n // 9 + 1`` times.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = Rng(seed)
    combos = np.arange(n) % (len(SHAPES) * len(COLORS))
    combos = combos[rng.permutation(n)]
    items = []
    for i, combo in enumerate(combos):
        item_rng = rng.child(i)
        shape, color = SHAPES[combo // 3], COLORS[combo % 3]
        cell = tuple(int(c) for c in item_rng.integers(0, 3, size=2))
        img = render(shape, color, cell, item_rng)
        items.append((img, make_prompt(shape, color, item_rng)))
    return items


def dataset_arrays(items):
    """Stack ``(image, prompt)`` pairs into ``(pixels, token_ids)`` arrays."""
    x = np.stack([img.pixels for img, _ in items])
    y = np.array([p.ids for _, p in items], dtype=np.int64)
    return x, y


@lru_cache(maxsize=1)
def _template_bank():
    labels, rows = [], []
    for s, shape in enumerate(SHAPES):
        for radius in RADII:
            for cy in range(radius, IMAGE_SIZE - radius):
                for cx in range(radius, IMAGE_SIZE - radius):
                    t = shape_mask(shape, cy, cx, radius).astype(np.float64).ravel()
                    t -= t.mean()
                    rows.append(t / np.linalg.norm(t))
                    labels.append(s)
    return np.array(rows), np.array(labels)


@dataclass(frozen=True)
class OracleResult:
    shape: str | None
    colors: frozenset
    quality: float


def oracle_classify_batch(pixels):
    """Vectorized :func:`oracle_classify` over ``(N, 16, 16, 3)`` pixels."""
    px = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if px.ndim == 3:
        px = px[None]
    n = px.shape[0]
    peak = px.max(axis=-1)
    fg = peak >= FOREGROUND
    strong = fg[..., None] & (px >= FOREGROUND) & (px >= DOMINANCE * peak[..., None])
    counts = strong.reshape(n, -1, 3).sum(axis=1)

    g = peak.reshape(n, -1)
    g = g - g.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(g, axis=1)
    bank, labels = _template_bank()
    corr = np.zeros((n, bank.shape[0]))
    ok = norm > 1e-12
    corr[ok] = (g[ok] / norm[ok, None]) @ bank.T
    best_per_shape = np.stack([corr[:, labels == s].max(axis=1) for s in range(len(SHAPES))], axis=1)
    best = best_per_shape.max(axis=1)
    arg = best_per_shape.argmax(axis=1)
    results = []
    for i in range(n):
        shape = SHAPES[arg[i]] if best[i] >= SHAPE_FLOOR else None
        colors = frozenset(c for j, c in enumerate(COLORS) if counts[i, j] >= MIN_COLOR_PIXELS)
        results.append(OracleResult(shape, colors, float(np.clip(best[i], 0.0, 1.0))))
    return results


def oracle_classify(img):
    """Shape, colors present, and a template-correlation quality in [0, 1].

    Colors: a channel counts on a foreground pixel when it is bright and at
    least half of that pixel's brightest channel; a color is present on
    ``MIN_COLOR_PIXELS`` or more pixels. Shape: best normalized correlation
    of the brightness map with every template placement; below
    ``SHAPE_FLOOR`` the shape is ``None``.
    """
    pixels = img.pixels if isinstance(img, ToyImage) else img
    return oracle_classify_batch(pixels)[0]


def _to_bytes(pixels):
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, pixels, scale=1):
    """Binary P6 for ``(H, W, 3)`` or P5 for ``(H, W)`` arrays in [0, 1]."""
    data = _to_bytes(np.asarray(pixels, dtype=np.float64))
    if scale > 1:
        data = data.repeat(scale, axis=0).repeat(scale, axis=1)
    magic = b"P6" if data.ndim == 3 else b"P5"
    h, w = data.shape[:2]
    path = Path(path)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + data.tobytes())
    return path


def read_ppm(path):
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    body = raw[pos + 1 :]
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    channels = 3 if magic == b"P6" else 1
    arr = np.frombuffer(body[: w * h * channels], dtype=np.uint8).astype(np.float64) / maxval
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))
