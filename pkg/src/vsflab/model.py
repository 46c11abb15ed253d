"""Tiny text-conditioned MMDiT flow-matching model.

Latents are pixels mapped to ``[-1, 1]``. The path is
``x_t = (1 - t) x0 + t eps`` with velocity target ``eps - x0``; sampling
integrates from ``t = 1`` (noise) to ``t = 0`` with Euler steps.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .data import IMAGE_SIZE, PAD_ID, VOCAB, Prompt, ToyImage
from .guidance import GuidanceSpec, Variant, cfg_combine, wef_transform
from .mmdit import (
    BlockParams,
    block_backward,
    block_forward_train,
    build_plan,
    init_block,
    layer_norm,
    layer_norm_backward,
    neg_attention_map,
    sigmoid,
    silu,
    split_guided_block_forward,
)
from .records import RunRecord
from .tensor import Rng

__all__ = [
    "ToyModel",
    "TrainingDiverged",
    "train",
    "euler_sample",
    "euler_sample_batch",
    "flow_pair",
    "save_checkpoint",
    "load_checkpoint",
    "to_latent",
    "to_pixels",
    "latent_stats",
]

TIME_FREQS = 32
CHANNELS = 3


class TrainingDiverged(RuntimeError):
    pass


def to_latent(pixels):
    return 2.0 * np.asarray(pixels, dtype=np.float64) - 1.0


def to_pixels(latent):
    return np.clip((latent + 1.0) * 0.5, 0.0, 1.0)


def latent_stats(pixels):
    """Mean and standard deviation of the latents of ``pixels``."""
    lat = to_latent(pixels)
    return float(lat.mean()), float(lat.std())


def flow_pair(x0, eps, t):
    """Point on the straight path and its velocity target."""
    t = np.asarray(t, dtype=np.float64).reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return (1.0 - t) * x0 + t * eps, eps - x0


def _silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def time_features(t, n=TIME_FREQS):
    half = n // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * 1000.0 * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


class ToyModel:
    """Parameters plus forward/backward of the toy MMDiT.

    ``params`` is a flat dict of float64 arrays; block ``l`` owns the keys
    prefixed ``blocks.{l}.``. ``forward_calls`` and ``attention_calls``
    count model passes and per-block attention computations.
    """

    def __init__(self, params, heads, patch=4, data_mean=0.0, data_std=1.0):
        self.params = params
        self.heads = int(heads)
        self.patch = int(patch)
        self.data_mean = float(np.float32(data_mean))
        self.data_std = float(np.float32(data_std))
        if not self.data_std > 0:
            raise ValueError(f"data_std must be positive, got {data_std}")
        self.forward_calls = 0
        self.attention_calls = 0
        self._bind_blocks()

    def _bind_blocks(self):
        self.blocks = []
        layer = 0
        while f"blocks.{layer}.img.wq" in self.params:
            prefix = f"blocks.{layer}."
            view = {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
            self.blocks.append(BlockParams(view, self.heads))
            layer += 1

    @classmethod
    def initialize(cls, seed=0, dim=64, heads=4, layers=4, patch=4, mlp_ratio=4, data_mean=0.0, data_std=1.0):
        """Fresh model. ``data_mean``/``data_std`` describe the latent data
        and set the fixed skip path of the velocity output.
        """
        rng = Rng(seed)
        patch_dim = patch * patch * CHANNELS
        n_img = (IMAGE_SIZE // patch) ** 2
        p = {
            "tok_emb": rng.normal((len(VOCAB), dim), 0.5),
            "patch.w": rng.normal((patch_dim, dim), 1.0 / math.sqrt(patch_dim)),
            "patch.b": np.zeros(dim),
            "pos_emb": rng.normal((n_img, dim), 0.1),
            "time.w1": rng.normal((TIME_FREQS, dim), 1.0 / math.sqrt(TIME_FREQS)),
            "time.b1": np.zeros(dim),
            "time.w2": rng.normal((dim, dim), 1.0 / math.sqrt(dim)),
            "time.b2": np.zeros(dim),
            "final.w_mod": np.zeros((dim, 2 * dim)),
            "final.b_mod": np.zeros(2 * dim),
            "head.w": np.zeros((dim, patch_dim)),
            "head.b": np.zeros(patch_dim),
        }
        for layer in range(layers):
            block = init_block(rng.child(layer), dim, heads, mlp_ratio=mlp_ratio)
            for k, v in block.tensors.items():
                p[f"blocks.{layer}.{k}"] = v
        model = cls(p, heads, patch, data_mean, data_std)
        model.round_to_float32()
        return model

    @property
    def dim(self):
        return self.params["tok_emb"].shape[1]

    @property
    def n_img(self):
        return (IMAGE_SIZE // self.patch) ** 2

    @property
    def grid(self):
        side = IMAGE_SIZE // self.patch
        return (side, side)

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def round_to_float32(self):
        for k in self.params:
            self.params[k][...] = self.params[k].astype(np.float32)

    def copy(self):
        return ToyModel({k: v.copy() for k, v in self.params.items()}, self.heads, self.patch,
                        self.data_mean, self.data_std)

    def astype(self, dtype):
        """Cast parameters in place (training runs in float32)."""
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self._bind_blocks()
        return self

    def skip_coefficients(self, t):
        """``(c_skip, c_out)`` of the velocity output at times ``t``.

        The network output is added to the best affine guess of the velocity
        for data with the stored mean and standard deviation, and scaled so
        its target has unit variance under that model.
        """
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1, 1)
        var = self.data_std**2
        den = (1.0 - t) ** 2 * var + t**2
        return (t - (1.0 - t) * var) / den, self.data_std / np.sqrt(den)

    def _precondition(self, x, t, net):
        c_skip, c_out = self.skip_coefficients(t)
        mu = self.data_mean
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1, 1)
        v = -mu + c_skip * (x - (1.0 - t) * mu) + c_out * net
        return v.astype(net.dtype, copy=False), c_out

    def reset_counters(self):
        self.forward_calls = 0
        self.attention_calls = 0

    # -- embedding helpers -------------------------------------------------

    def patchify(self, x):
        b, p, s = x.shape[0], self.patch, IMAGE_SIZE // self.patch
        return x.reshape(b, s, p, s, p, CHANNELS).transpose(0, 1, 3, 2, 4, 5).reshape(b, s * s, p * p * CHANNELS)

    def unpatchify(self, tokens):
        b, p, s = tokens.shape[0], self.patch, IMAGE_SIZE // self.patch
        return tokens.reshape(b, s, s, p, p, CHANNELS).transpose(0, 1, 3, 2, 4, 5).reshape(b, IMAGE_SIZE, IMAGE_SIZE, CHANNELS)

    def embed_text(self, ids):
        return self.params["tok_emb"][np.asarray(ids, dtype=np.int64)]

    def _conditioning(self, t):
        p = self.params
        tf = time_features(t).astype(p["time.w1"].dtype)
        a1 = tf @ p["time.w1"] + p["time.b1"]
        temb = silu(a1) @ p["time.w2"] + p["time.b2"]
        return silu(temb), dict(tf=tf, a1=a1, temb=temb)

    # -- forward -----------------------------------------------------------

    def forward_train(self, x, t, text, neg=None, alpha=0.0, beta=0.0, masked=True, duplicate=True):
        """Velocity prediction plus the cache needed by :meth:`backward`.

        ``text`` are positive-prompt embeddings ``(B, n_pos, D)`` (padding
        kept); ``neg`` optional negative embeddings with padding removed.
        """
        p = self.params
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        cond, tcache = self._conditioning(t)
        patches = self.patchify(x)
        img = patches @ p["patch.w"] + p["patch.b"] + p["pos_emb"]
        parts = [img, text] if neg is None else [img, text, neg]
        h = np.concatenate(parts, axis=1)
        counts = (self.n_img, text.shape[1], 0 if neg is None else neg.shape[1])
        dup = duplicate and counts[2] > 0
        plan = build_plan(counts + ((counts[2],) if dup else (0,)), beta, masked)
        caches = []
        for block in self.blocks:
            h, c = block_forward_train(h, counts, block, alpha, beta, cond, masked, duplicate, plan=plan)
            caches.append(c)
        self.forward_calls += 1
        self.attention_calls += len(self.blocks)
        xi = h[:, : self.n_img]
        y, r = layer_norm(xi)
        mod = cond @ p["final.w_mod"] + p["final.b_mod"]
        shift, scale = mod[:, None, : self.dim], mod[:, None, self.dim :]
        hf = y * (1.0 + scale) + shift
        out = hf @ p["head.w"] + p["head.b"]
        v, c_out = self._precondition(x, t, self.unpatchify(out))
        cache = dict(t=tcache, cond=cond, patches=patches, counts=counts, blocks=caches,
                     y=y, r=r, scale=scale, hf=hf, h_shape=h.shape, c_out=c_out)
        return v, cache

    def forward(self, x, t, text, neg=None, spec=None, record_maps=False):
        """Velocity prediction for one guidance configuration.

        NONE and VSF run one joint pass (VSF needs ``neg``); NASA and NAG run
        one pass with two attention computations per block. CFG and WEF are
        composed by the sampler from plain passes.
        """
        spec = spec or GuidanceSpec()
        if spec.variant in (Variant.NASA, Variant.NAG) and neg is not None and neg.shape[1] > 0:
            return self._forward_split(x, t, text, neg, spec), None
        if spec.variant is Variant.VSF and neg is not None:
            v, cache = self.forward_train(x, t, text, neg, spec.alpha, spec.beta, spec.masked, spec.duplicate)
        else:
            v, cache = self.forward_train(x, t, text)
        maps = None
        if record_maps and cache["counts"][2] > 0 and cache["blocks"][0]["counts"][3] > 0:
            maps = np.stack([neg_attention_map(c, blk) for c, blk in zip(cache["blocks"], self.blocks)], axis=1)
            maps = maps.reshape(maps.shape[:2] + self.grid)
        return v, maps

    def _forward_split(self, x, t, text, neg, spec):
        p = self.params
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        cond, _ = self._conditioning(t)
        img = self.patchify(x) @ p["patch.w"] + p["patch.b"] + p["pos_emb"]
        h = np.concatenate([img, text, neg], axis=1)
        counts = (self.n_img, text.shape[1], neg.shape[1])
        for block in self.blocks:
            h = split_guided_block_forward(h, counts, block, spec, cond)
        self.forward_calls += 1
        self.attention_calls += 2 * len(self.blocks)
        y, _ = layer_norm(h[:, : self.n_img])
        mod = cond @ p["final.w_mod"] + p["final.b_mod"]
        hf = y * (1.0 + mod[:, None, self.dim :]) + mod[:, None, : self.dim]
        return self._precondition(x, t, self.unpatchify(hf @ p["head.w"] + p["head.b"]))[0]

    # -- backward ----------------------------------------------------------

    def backward(self, dv, cache, text_ids=None, neg_ids=None):
        """Parameter gradients of ``sum(dv * v)``.

        ``text_ids``/``neg_ids`` route embedding gradients into ``tok_emb``;
        leave them None when the embeddings were not table lookups.
        """
        p = self.params
        grads = {}
        dout = self.patchify((dv * cache["c_out"]).astype(dv.dtype, copy=False))
        hf = cache["hf"]
        grads["head.w"] = hf.reshape(-1, hf.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
        grads["head.b"] = dout.sum(axis=(0, 1))
        dhf = dout @ p["head.w"].T
        y = cache["y"]
        dmod = np.concatenate([dhf.sum(axis=1), (dhf * y).sum(axis=1)], axis=1)
        cond = cache["cond"]
        grads["final.w_mod"] = cond.T @ dmod
        grads["final.b_mod"] = dmod.sum(axis=0)
        dcond = dmod @ p["final.w_mod"].T
        dh = np.zeros(cache["h_shape"], dtype=dout.dtype)
        dh[:, : self.n_img] = layer_norm_backward(dhf * (1.0 + cache["scale"]), y, cache["r"])
        for layer in reversed(range(len(self.blocks))):
            dh, g, dc = block_backward(dh, cache["blocks"][layer], self.blocks[layer])
            for k, v in g.items():
                grads[f"blocks.{layer}.{k}"] = v
            dcond = dcond + dc
        n_i, n_p, n_n = cache["counts"]
        dimg = dh[:, :n_i]
        grads["pos_emb"] = dimg.sum(axis=0)
        patches = cache["patches"]
        grads["patch.w"] = patches.reshape(-1, patches.shape[-1]).T @ dimg.reshape(-1, dimg.shape[-1])
        grads["patch.b"] = dimg.sum(axis=(0, 1))
        tok = np.zeros_like(p["tok_emb"])
        if text_ids is not None:
            np.add.at(tok, np.asarray(text_ids).ravel(), dh[:, n_i : n_i + n_p].reshape(-1, self.dim))
        if neg_ids is not None and n_n:
            np.add.at(tok, np.asarray(neg_ids).ravel(), dh[:, n_i + n_p :].reshape(-1, self.dim))
        grads["tok_emb"] = tok
        tc = cache["t"]
        dtemb = dcond * _silu_grad(tc["temb"])
        grads["time.w2"] = silu(tc["a1"]).T @ dtemb
        grads["time.b2"] = dtemb.sum(axis=0)
        da1 = (dtemb @ p["time.w2"].T) * _silu_grad(tc["a1"])
        grads["time.w1"] = tc["tf"].T @ da1
        grads["time.b1"] = da1.sum(axis=0)
        return grads

    def loss_and_grads(self, x0, eps, t, ids):
        """Flow-matching MSE and its gradient for one batch."""
        dtype = self.params["patch.w"].dtype
        xt, target = (a.astype(dtype, copy=False) for a in flow_pair(x0, eps, t))
        pred, cache = self.forward_train(xt, t, self.embed_text(ids))
        diff = pred - target
        loss = float(np.mean(diff * diff))
        grads = self.backward(2.0 * diff / diff.size, cache, text_ids=ids)
        return loss, grads


def _lr_at(step, steps, lr, warmup):
    if step < warmup:
        return lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, steps - warmup)
    return lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * progress)))


def train(model, pixels, ids, steps=5000, lr=1e-3, seed=0, batch_size=64, uncond_prob=0.1,
          grad_clip=1.0, warmup=200, weight_decay=0.0, ema=0.999, dtype=np.float32, callback=None):
    """Train ``model`` in place with Adam; returns the per-step loss curve.

    Each batch draws items uniformly, replaces 10% of prompts (by default)
    with the all-padding prompt, samples ``t ~ U(0, 1)`` and standard normal
    noise. With ``ema`` > 0 the returned weights are an exponential moving
    average of the iterates. Arithmetic runs in ``dtype``; parameters come
    back as float64 holding float32-representable values, so a checkpoint
    round trip is exact.
    """
    latents = to_latent(pixels)
    avg = {k: v.copy() for k, v in model.params.items()} if ema else None
    model.astype(dtype)
    ids = np.asarray(ids, dtype=np.int64)
    rng = Rng(seed)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    curve = []
    for step in range(steps):
        idx = rng.integers(0, latents.shape[0], size=batch_size)
        x0 = latents[idx]
        batch_ids = ids[idx].copy()
        batch_ids[rng.random(batch_size) < uncond_prob] = PAD_ID
        t = rng.random(batch_size)
        noise = rng.normal(x0.shape)
        loss, grads = model.loss_and_grads(x0, noise, t, batch_ids)
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if not math.isfinite(loss) or loss > 1e3:
            raise TrainingDiverged(f"loss {loss:.4g} at step {step} (grad norm {gnorm:.4g}, lr {lr})")
        curve.append(loss)
        clip = min(1.0, grad_clip / (gnorm + 1e-12)) if grad_clip else 1.0
        step_lr = _lr_at(step, steps, lr, warmup)
        c1, c2 = 1.0 - b1 ** (step + 1), 1.0 - b2 ** (step + 1)
        for k, g in grads.items():
            g = g * clip
            m[k] = b1 * m[k] + (1.0 - b1) * g
            v2[k] = b2 * v2[k] + (1.0 - b2) * g * g
            update = step_lr * (m[k] / c1) / (np.sqrt(v2[k] / c2) + eps_adam)
            if weight_decay and model.params[k].ndim == 2:
                update = update + step_lr * weight_decay * model.params[k]
            model.params[k] -= update
        if avg is not None:
            decay = min(ema, (1.0 + step) / (10.0 + step))
            for k, v in model.params.items():
                avg[k] *= decay
                avg[k] += (1.0 - decay) * v
        if callback is not None:
            callback(step, loss)
    model.astype(np.float64)
    if avg is not None and steps:
        for k in model.params:
            model.params[k][...] = avg[k]
    model.round_to_float32()
    return np.array(curve)


# -- sampling ----------------------------------------------------------------

def _as_prompt(p):
    if p is None or isinstance(p, Prompt):
        return p
    from .data import tokenize

    return tokenize(p)


def _velocity(model, x, t, pos, neg, spec, record_maps):
    b = x.shape[0]
    text = np.broadcast_to(model.embed_text(pos.ids), (b, len(pos.ids), model.dim))
    variant = spec.variant
    if variant is Variant.NONE:
        return model.forward(x, t, text)
    if variant is Variant.CFG:
        neg_text = np.broadcast_to(model.embed_text(neg.ids), text.shape)
        u_neg, _ = model.forward(x, t, neg_text)
        u_pos, _ = model.forward(x, t, text)
        return cfg_combine(u_neg, u_pos, spec.lambda_), None
    if variant is Variant.WEF:
        joined = wef_transform(model.embed_text(pos.ids), model.embed_text(neg.ids), spec.alpha)
        return model.forward(x, t, np.broadcast_to(joined, (b,) + joined.shape))
    kept = [i for i in neg.ids if i != PAD_ID]
    neg_emb = np.broadcast_to(model.embed_text(kept), (b, len(kept), model.dim))
    return model.forward(x, t, text, neg_emb, spec, record_maps)


def euler_sample_batch(model, pos, neg=None, spec=None, steps=8, seeds=(0,), record_maps=True):
    """Few-step Euler sampling for one prompt pair over several seeds.

    Returns ``(pixels, records)``; pixels are ``(len(seeds), 16, 16, 3)`` in
    ``[0, 1]``. Records carry per-step negative attention maps for VSF.
    """
    spec = spec or GuidanceSpec()
    pos, neg = _as_prompt(pos), _as_prompt(neg)
    if not 1 <= steps <= 64:
        raise ValueError(f"steps must be in [1, 64], got {steps}")
    if spec.variant.needs_negative and neg is None:
        raise ValueError(f"variant {spec.variant.value} needs a negative prompt")
    seeds = [int(s) for s in seeds]
    x = np.stack([Rng(s).normal((IMAGE_SIZE, IMAGE_SIZE, CHANNELS)) for s in seeds])
    grid = np.linspace(1.0, 0.0, steps + 1)
    maps = []
    for k in range(steps):
        t, dt = grid[k], grid[k] - grid[k + 1]
        u, m = _velocity(model, x, np.full(len(seeds), t), pos, neg, spec, record_maps)
        if m is not None:
            maps.append(m)
        x = x - dt * u
    pixels = to_pixels(x)
    maps = np.stack(maps, axis=1) if maps else None
    records = []
    for i, seed in enumerate(seeds):
        records.append(RunRecord(spec=spec, pos=pos, neg=neg, seed=seed, steps=steps,
                                 image=ToyImage(pixels[i]),
                                 neg_maps=None if maps is None else maps[i]))
    return pixels, records


def euler_sample(model, pos, neg=None, spec=None, steps=8, seed=0):
    """Single-seed :func:`euler_sample_batch`; returns ``(ToyImage, RunRecord)``."""
    _, records = euler_sample_batch(model, pos, neg, spec, steps, (seed,))
    return records[0].image, records[0]


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"VSFT"
FORMAT_VERSION = 1


def save_checkpoint(path, model):
    """Write ``model`` as named little-endian float32 tensors.

    Layout: magic ``VSFT``, u32 version, u32 tensor count, then per tensor
    u32 name length, UTF-8 name, u32 rank, u32 dims, float32 data. Tensors
    are written in sorted name order; rank-0 ``meta.*`` tensors hold the
    head count, patch size and latent data statistics.
    """
    tensors = dict(model.params)
    tensors["meta.heads"] = np.array(model.heads, dtype=np.float64)
    tensors["meta.patch"] = np.array(model.patch, dtype=np.float64)
    tensors["meta.data_mean"] = np.array(model.data_mean)
    tensors["meta.data_std"] = np.array(model.data_std)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    data = b"".join(chunks)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a VSFT checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        name = data[pos + 4 : pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", data, pos)
        dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
        pos += 4 + 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).astype(np.float64).reshape(dims)
        pos += 4 * size
        tensors[name] = arr.copy()
    heads = int(tensors.pop("meta.heads"))
    patch = int(tensors.pop("meta.patch"))
    mean = float(tensors.pop("meta.data_mean", 0.0))
    std = float(tensors.pop("meta.data_std", 1.0))
    return ToyModel(tensors, heads, patch, mean, std)
