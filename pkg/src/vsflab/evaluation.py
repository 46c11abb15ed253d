"""Scoring, hyperparameter sweeps, trade-off frontiers, attention-map dumps
and the attention cost model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .data import oracle_classify_batch, tokenize, write_ppm
from .guidance import GuidanceSpec, Variant
from .model import euler_sample_batch
from .records import RunRecord, score_from_oracle
from .tensor import Rng

__all__ = [
    "SuiteScore",
    "SweepRow",
    "SweepResult",
    "SWEEP_HEADER",
    "SWEEP_RANGES",
    "score_records",
    "score_suite",
    "sweep",
    "sweep_specs",
    "pareto_frontier",
    "attn_cost",
    "dump_attn_maps",
    "save_record",
    "load_record",
]

SWEEP_HEADER = ("variant", "alpha", "beta", "phi", "tau", "blend", "lambda", "pos", "neg", "quality")

SWEEP_RANGES = {
    Variant.VSF: {"alpha": (0.0, 4.0), "beta": (0.0, 2.0)},
    Variant.NAG: {"phi": (0.0, 16.0), "tau": (1.0, 10.0), "blend": (0.0, 1.0)},
    Variant.NASA: {"alpha": (0.0, 1.0)},
    Variant.CFG: {"lambda_": (1.0, 8.0)},
    Variant.WEF: {"alpha": (0.0, 4.0)},
}
GRID_VARIANTS = (Variant.NASA, Variant.CFG, Variant.WEF)


def score_records(records):
    """Fill positive/negative/quality on each record in place."""
    if not records:
        return records
    results = oracle_classify_batch(np.stack([r.image.pixels for r in records]))
    for rec, res in zip(records, results):
        rec.positive, rec.negative, rec.quality = score_from_oracle(res, rec.pos, rec.neg)
    return records


@dataclass
class SuiteScore:
    positive: float
    negative: float
    quality: float
    n: int
    records: list = field(default_factory=list, repr=False)


def _prompt_pair(pair):
    pos, neg = pair
    pos = tokenize(pos) if isinstance(pos, str) else pos
    if isinstance(neg, str):
        neg = tokenize(neg)
    return pos, neg


def _run_group(model, pos, neg, spec, seeds, steps, record_maps):
    _, records = euler_sample_batch(model, pos, neg, spec, steps, seeds, record_maps=record_maps)
    return score_records(records)


def score_suite(model, prompts, spec, seeds, steps=8, jobs=1, record_maps=False):
    """Mean oracle scores of ``spec`` over every (prompt pair, seed).

    ``prompts`` is a list of ``(pos, neg)`` pairs (strings or Prompts). The
    result is independent of ``jobs``: each pair is sampled with its own
    seed list and the means are plain averages.
    """
    prompts = [_prompt_pair(p) for p in prompts]
    seeds = list(seeds)
    if not prompts or not seeds:
        raise ValueError("score_suite needs at least one prompt pair and one seed")
    if jobs == 1:
        groups = [_run_group(model, pos, neg, spec, seeds, steps, record_maps) for pos, neg in prompts]
    else:
        groups = Parallel(n_jobs=jobs)(
            delayed(_run_group)(model, pos, neg, spec, seeds, steps, record_maps) for pos, neg in prompts)
    records = [r for g in groups for r in g]
    n = len(records)
    return SuiteScore(
        positive=sum(r.positive for r in records) / n,
        negative=sum(r.negative for r in records) / n,
        quality=sum(r.quality for r in records) / n,
        n=n,
        records=records,
    )


@dataclass(frozen=True)
class SweepRow:
    spec: GuidanceSpec
    positive: float
    negative: float
    quality: float

    def value(self, key):
        return {"pos": self.positive, "positive": self.positive, "quality": self.quality,
                "neg": self.negative, "negative": self.negative}[key]

    def csv_fields(self):
        d = self.spec.as_dict()
        vals = [d["variant"]] + [f"{d[k]:.6f}" for k in ("alpha", "beta", "phi", "tau", "blend", "lambda")]
        return vals + [f"{self.positive:.6f}", f"{self.negative:.6f}", f"{self.quality:.6f}"]


@dataclass
class SweepResult:
    rows: list

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_HEADER)
            for row in self.rows:
                w.writerow(row.csv_fields())
        return Path(path)

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(SWEEP_HEADER) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            for rec in reader:
                spec = GuidanceSpec(Variant(rec["variant"]), float(rec["alpha"]), float(rec["beta"]),
                                    float(rec["phi"]), float(rec["tau"]), float(rec["blend"]),
                                    float(rec["lambda"]))
                rows.append(SweepRow(spec, float(rec["pos"]), float(rec["neg"]), float(rec["quality"])))
        return cls(rows)


def sweep_specs(variant, n_runs, seed=0, ranges=None, base=None):
    """Hyperparameter settings for a sweep.

    NASA, CFG and WEF use a uniform grid over their single scale (endpoints
    included); VSF and NAG draw uniformly at random from ``ranges``.
    """
    variant = Variant(variant)
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    base = base or GuidanceSpec(variant)
    if variant is Variant.NONE:
        return [GuidanceSpec(Variant.NONE)] * n_runs
    ranges = dict(SWEEP_RANGES[variant], **(ranges or {}))
    fields = {k: getattr(base, k) for k in ("alpha", "beta", "phi", "tau", "blend", "lambda_", "masked", "duplicate")}
    specs = []
    if variant in GRID_VARIANTS:
        (name, (lo, hi)), = ranges.items()
        for value in np.linspace(lo, hi, n_runs) if n_runs > 1 else [lo]:
            specs.append(GuidanceSpec(variant, **dict(fields, **{name: float(value)})))
        return specs
    rng = Rng(seed)
    for _ in range(n_runs):
        draw = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in ranges.items()}
        specs.append(GuidanceSpec(variant, **dict(fields, **draw)))
    return specs


def _score_row(model, prompts, spec, seeds, steps):
    s = score_suite(model, prompts, spec, seeds, steps)
    return SweepRow(spec, s.positive, s.negative, s.quality)


def sweep(model, prompts, variant, n_runs, seeds, steps=8, sampler_seed=0, ranges=None, specs=None,
          jobs=1, base=None):
    """Score ``n_runs`` hyperparameter settings on the same prompts and seeds."""
    if specs is None:
        specs = sweep_specs(variant, n_runs, sampler_seed, ranges, base)
    if jobs == 1:
        rows = [_score_row(model, prompts, s, seeds, steps) for s in specs]
    else:
        rows = Parallel(n_jobs=jobs)(delayed(_score_row)(model, prompts, s, seeds, steps) for s in specs)
    return SweepResult(rows)


def pareto_frontier(rows, y_key="pos"):
    """Critical points of a sweep.

    Rows are walked from the highest negative score down (ties: higher
    ``y`` first); a row is kept when its ``y`` strictly beats every row seen
    before it. Accepts SweepRows or ``(negative, y)`` tuples.
    """
    rows = list(rows)
    if not rows:
        return []

    def key(row):
        if isinstance(row, SweepRow):
            return row.negative, row.value(y_key)
        return float(row[0]), float(row[1])

    ordered = sorted(rows, key=lambda r: (-key(r)[0], -key(r)[1]))
    frontier, best = [], -math.inf
    for row in ordered:
        y = key(row)[1]
        if y > best:
            frontier.append(row)
            best = y
    return frontier


def attn_cost(variant, n_img, n_pos, n_neg, d_model, heads=1, layers=1):
    """Attention multiply-accumulates per sampling step and model forwards per step.

    Dense score and value products only: ``2 * n_q * n_k * d_model`` per
    attention call (heads split ``d_model`` and leave the count unchanged).
    """
    variant = Variant(variant)
    if min(n_img, n_pos, n_neg, d_model, heads, layers) < 0:
        raise ValueError("counts must be non-negative")

    def call(n_q, n_k):
        return 2 * n_q * n_k * d_model

    base = call(n_img + n_pos, n_img + n_pos)
    if variant is Variant.NONE:
        per_block, forwards = base, 1
    elif variant is Variant.VSF:
        per_block, forwards = call(n_img + n_pos + n_neg, n_img + n_pos + 2 * n_neg), 1
    elif variant is Variant.WEF:
        per_block, forwards = call(n_img + n_pos + n_neg, n_img + n_pos + n_neg), 1
    elif variant is Variant.CFG:
        per_block, forwards = 2 * base, 2
    else:
        per_block, forwards = base + call(n_img + n_neg, n_img + n_neg), 1
    return int(per_block * layers), forwards


# -- records on disk -------------------------------------------------------

RECORD_HEADER = ("run_id", "variant", "alpha", "beta", "phi", "tau", "blend", "lambda", "masked", "duplicate",
                 "pos_prompt", "neg_prompt", "seed", "steps", "positive", "negative", "quality")


def save_record(record, out_dir):
    """Write ``record.csv``, ``image.ppm`` and, for VSF, ``neg_maps.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d = record.spec.as_dict()
    row = [record.run_id, d["variant"]] + [repr(d[k]) for k in ("alpha", "beta", "phi", "tau", "blend", "lambda")]
    row += [int(d["masked"]), int(d["duplicate"]), record.pos.text,
            "" if record.neg is None else record.neg.text, record.seed, record.steps,
            "" if record.positive is None else record.positive,
            "" if record.negative is None else record.negative,
            "" if record.quality is None else repr(record.quality)]
    with open(out_dir / "record.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        w.writerow(row)
    write_ppm(out_dir / "image.ppm", record.image.pixels)
    np.save(out_dir / "image.npy", record.image.pixels)
    if record.neg_maps is not None:
        _write_map_csv(out_dir / "neg_maps.csv", record.neg_maps)
    return out_dir / "record.csv"


def _write_map_csv(path, maps):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "layer", "row", "col", "value"))
        for (s, l, r, c), v in np.ndenumerate(maps):
            w.writerow((s, l, r, c, repr(float(v))))


def _read_map_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    dims = [max(int(r[k]) for r in rows) + 1 for k in ("step", "layer", "row", "col")]
    maps = np.zeros(dims)
    for r in rows:
        maps[int(r["step"]), int(r["layer"]), int(r["row"]), int(r["col"])] = float(r["value"])
    return maps


def load_record(path):
    from .data import ToyImage

    path = Path(path)
    directory = path.parent if path.is_file() else path
    with open(directory / "record.csv", newline="") as fh:
        rec = next(csv.DictReader(fh))
    spec = GuidanceSpec(Variant(rec["variant"]), float(rec["alpha"]), float(rec["beta"]), float(rec["phi"]),
                        float(rec["tau"]), float(rec["blend"]), float(rec["lambda"]),
                        bool(int(rec["masked"])), bool(int(rec["duplicate"])))
    pixels = np.load(directory / "image.npy")
    maps_path = directory / "neg_maps.csv"
    maps = _read_map_csv(maps_path) if maps_path.exists() else None
    record = RunRecord(spec=spec, pos=tokenize(rec["pos_prompt"]),
                       neg=tokenize(rec["neg_prompt"]) if rec["neg_prompt"] else None,
                       seed=int(rec["seed"]), steps=int(rec["steps"]), image=ToyImage(pixels),
                       neg_maps=maps, run_id=rec["run_id"])
    if rec["positive"] != "":
        record.positive, record.negative = int(rec["positive"]), int(rec["negative"])
        record.quality = float(rec["quality"])
    return record


def dump_attn_maps(record, out_dir, scale=8):
    """One grayscale PGM per (step, layer), min-max normalized, plus a CSV of
    the raw values. Constant maps render as mid gray.
    """
    if record.spec.variant is not Variant.VSF or record.neg_maps is None:
        raise ValueError("attention maps exist only for VSF runs with a negative prompt")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = record.neg_maps
    written = []
    for s in range(maps.shape[0]):
        for layer in range(maps.shape[1]):
            m = maps[s, layer]
            lo, hi = m.min(), m.max()
            img = np.full(m.shape, 0.5) if hi - lo <= 0 else (m - lo) / (hi - lo)
            written.append(write_ppm(out_dir / f"step{s:02d}_layer{layer:02d}.pgm", img, scale=scale))
    csv_path = out_dir / "neg_attn_raw.csv"
    _write_map_csv(csv_path, maps)
    written.append(csv_path)
    return written
