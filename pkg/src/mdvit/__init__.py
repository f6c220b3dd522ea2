"""Multi-dimensional vision-transformer compression on a numpy testbed.

Heads, FFN neurons and tokens are ranked by their kernel dependency on the
model output; per-layer pruning ratios are chosen by Gaussian-process search
under a MAC budget over a weight-sharing supernet.
"""

from .config import DIMENSIONS, PRESETS, PruningPolicy, VitConfig, deit_base, deit_small, tiny_config
from .flops import FlopsBreakdown, cost, min_cost, relaxed_cost, satisfies
from .hsic import KernelConfig, gram, hsic
from .pruning import RetentionPlan, arg_top_k, build_retention_plan
from .search import GpModel, SearchState, expected_improvement, gp_fit, gp_posterior, maximize_ei, random_search, search

__all__ = [
    "DIMENSIONS", "PRESETS", "PruningPolicy", "VitConfig", "deit_base", "deit_small", "tiny_config",
    "FlopsBreakdown", "cost", "min_cost", "relaxed_cost", "satisfies",
    "KernelConfig", "gram", "hsic",
    "RetentionPlan", "arg_top_k", "build_retention_plan",
    "GpModel", "SearchState", "expected_improvement", "gp_fit", "gp_posterior", "maximize_ei",
    "random_search", "search",
]
