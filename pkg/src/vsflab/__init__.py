"""Negative-prompt guidance by value sign flip, with a toy flow model to test it on."""

from .config import Config, ConfigError, load_config
from .data import Prompt, ToyImage, make_dataset, oracle_classify, tokenize
from .estimator import FlowMatchingGenerator, ShapeOracle
from .evaluation import attn_cost, pareto_frontier, score_suite, sweep
from .guidance import (
    AttnInputs,
    AttnPlan,
    GuidanceSpec,
    Variant,
    cfg_combine,
    nag_combine,
    nasa_combine,
    sdpa,
    vsf_cross_attention,
    wef_transform,
)
from .mmdit import TokenSeq, block_forward, build_plan, extract_neg_attn
from .model import ToyModel, euler_sample, load_checkpoint, save_checkpoint, train
from .records import RunRecord
from .tensor import MaskError, Rng, ShapeError

__version__ = "0.1.0"

__all__ = [
    "AttnInputs",
    "AttnPlan",
    "Config",
    "ConfigError",
    "FlowMatchingGenerator",
    "GuidanceSpec",
    "MaskError",
    "Prompt",
    "Rng",
    "RunRecord",
    "ShapeError",
    "ShapeOracle",
    "TokenSeq",
    "ToyImage",
    "ToyModel",
    "Variant",
    "attn_cost",
    "block_forward",
    "build_plan",
    "cfg_combine",
    "euler_sample",
    "extract_neg_attn",
    "load_checkpoint",
    "load_config",
    "make_dataset",
    "nag_combine",
    "nasa_combine",
    "oracle_classify",
    "pareto_frontier",
    "save_checkpoint",
    "score_suite",
    "sdpa",
    "sweep",
    "tokenize",
    "train",
    "vsf_cross_attention",
    "wef_transform",
]
