"""Plain ``key=value`` experiment configuration.

Files hold ``[section]`` headers and ``key = value`` lines; ``#`` and ``;``
start comments. A key may also be written fully qualified
(``sampling.steps=8``) outside any section. Repeated keys keep the last
value and emit a warning; unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .guidance import GuidanceSpec, Variant

__all__ = ["Config", "ConfigError", "load_config", "parse_seeds", "DEFAULT_GUIDANCE"]


class ConfigError(ValueError):
    pass


DEFAULT_GUIDANCE = {
    Variant.NONE: GuidanceSpec(Variant.NONE),
    Variant.VSF: GuidanceSpec(Variant.VSF, alpha=3.0, beta=0.0),
    Variant.NAG: GuidanceSpec(Variant.NAG, phi=11.0, tau=5.0, blend=0.5),
    Variant.NASA: GuidanceSpec(Variant.NASA, alpha=0.5),
    Variant.CFG: GuidanceSpec(Variant.CFG, lambda_=3.0),
    Variant.WEF: GuidanceSpec(Variant.WEF, alpha=1.0),
}


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 96
    patch: int = 4
    mlp_ratio: int = 2
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    lr: float = 1e-2
    batch: int = 64
    seed: int = 0
    dataset_size: int = 9000
    dataset_seed: int = 0
    uncond_prob: float = 0.1
    warmup: int = 200
    ema: float = 0.999


@dataclass(frozen=True)
class SamplingConfig:
    steps: int = 8
    seeds: str = "0"


@dataclass(frozen=True)
class EvalConfig:
    pos: str = "a square;the square;square;image of a square;picture of a square"
    neg: str = "red"
    seeds: str = "0-39"
    sampler_seed: int = 0
    jobs: int = 1


@dataclass(frozen=True)
class PathsConfig:
    checkpoint: str = ""
    out: str = "runs"


def parse_seeds(text):
    """``"0,3,5-7"`` -> ``[0, 3, 5, 6, 7]``."""
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else part[1:].split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError(f"empty seed list {text!r}")
    return seeds


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "sampling": SamplingConfig,
             "eval": EvalConfig, "paths": PathsConfig}
_GUIDANCE_FIELDS = {"alpha": "alpha", "beta": "beta", "phi": "phi", "tau": "tau",
                    "blend": "blend", "lambda": "lambda_", "masked": "masked", "duplicate": "duplicate"}


def _coerce(kind, raw, key):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    guidance: dict = field(default_factory=lambda: dict(DEFAULT_GUIDANCE))

    @staticmethod
    def keys():
        out = [f"{name}.{f.name}" for name, cls in _SECTIONS.items() for f in fields(cls)]
        for v in Variant:
            if v is not Variant.NONE:
                out += [f"guidance.{v.value}.{k}" for k in _GUIDANCE_FIELDS]
        return out

    def set(self, key, value):
        """Return a copy with dotted ``key`` set; ``value`` may be a string."""
        parts = key.split(".")
        if parts[0] == "guidance" and len(parts) == 3:
            try:
                variant = Variant(parts[1])
            except ValueError:
                raise ConfigError(f"unknown config key {key!r}") from None
            attr = _GUIDANCE_FIELDS.get(parts[2])
            if attr is None or variant is Variant.NONE:
                raise ConfigError(f"unknown config key {key!r}")
            spec = self.guidance[variant]
            kind = bool if attr in ("masked", "duplicate") else float
            value = _coerce(kind, value, key) if isinstance(value, str) else kind(value)
            try:
                new_spec = replace(spec, **{attr: value})
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
            return replace(self, guidance=dict(self.guidance, **{variant: new_spec}))
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        section = getattr(self, parts[0])
        kinds = {f.name: f.type for f in fields(section)}
        if parts[1] not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        kind = {"int": int, "float": float, "str": str}[kinds[parts[1]]]
        value = _coerce(kind, value, key) if isinstance(value, str) else kind(value)
        return replace(self, **{parts[0]: replace(section, **{parts[1]: value})})

    def get(self, key):
        parts = key.split(".")
        if parts[0] == "guidance":
            return getattr(self.guidance[Variant(parts[1])], _GUIDANCE_FIELDS[parts[2]])
        return getattr(getattr(self, parts[0]), parts[1])

    def as_dict(self):
        return {k: self.get(k) for k in self.keys()}

    def digest(self, *extra):
        payload = json.dumps([self.as_dict(), [str(e) for e in extra]], sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def dump(self):
        return "\n".join(f"{k}={v}" for k, v in self.as_dict().items()) + "\n"


def load_config(path=None):
    """Parse a config file into a :class:`Config`; ``None`` gives defaults."""
    config = Config()
    if path is None:
        return config
    text = Path(path).read_text()
    section = ""
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip() if not raw.lstrip().startswith(("#", ";")) else ""
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"{path}:{lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        full = f"{section}.{key}" if section and not key.startswith(section + ".") else key
        if full in seen:
            warnings.warn(f"{path}:{lineno}: duplicate key {full!r} (line {seen[full]}); last value wins",
                          stacklevel=2)
        seen[full] = lineno
        try:
            config = config.set(full, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return config
