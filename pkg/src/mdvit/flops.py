"""Closed-form multiply-accumulate (MAC) cost of a pruned ViT."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PruningPolicy, VitConfig


@dataclass(frozen=True)
class FlopsBreakdown:
    softmax_attention: tuple[int, ...]
    mhsa_projections: tuple[int, ...]
    ffn_projections: tuple[int, ...]
    fixed_overhead: int

    @property
    def total(self) -> int:
        return (self.fixed_overhead + sum(self.softmax_attention) + sum(self.mhsa_projections)
                + sum(self.ffn_projections))

    def parts(self) -> dict[str, int]:
        return {
            "softmax_attention": sum(self.softmax_attention),
            "mhsa_projections": sum(self.mhsa_projections),
            "ffn_projections": sum(self.ffn_projections),
            "fixed_overhead": self.fixed_overhead,
            "total": self.total,
        }

    def to_dict(self) -> dict:
        return {
            "per_layer": [
                {"softmax_attention": a, "mhsa_projections": m, "ffn_projections": f}
                for a, m, f in zip(self.softmax_attention, self.mhsa_projections, self.ffn_projections)
            ],
            **self.parts(),
        }


def cost(cfg: VitConfig, policy: PruningPolicy | None = None) -> FlopsBreakdown:
    """Per-layer MAC breakdown of ``cfg`` pruned by ``policy`` (unpruned when None)."""
    if policy is None:
        policy = PruningPolicy.zeros(cfg.layers)
    policy.validate(cfg)
    d, dh = cfg.embed_dim, cfg.head_dim
    attn, mhsa, ffn = [], [], []
    for heads, neurons, (n_in, n_out) in zip(policy.heads_kept(cfg), policy.neurons_kept(cfg),
                                             policy.token_counts(cfg)):
        width = heads * dh
        mhsa.append(4 * n_in * d * width)
        attn.append(2 * n_in * n_in * width)
        ffn.append(2 * n_out * d * neurons)
    return FlopsBreakdown(tuple(attn), tuple(mhsa), tuple(ffn), cfg.fixed_overhead)


def total_cost(cfg: VitConfig, policy: PruningPolicy | None = None) -> int:
    return cost(cfg, policy).total


def satisfies(cfg: VitConfig, policy: PruningPolicy, budget: float) -> bool:
    return cost(cfg, policy).total <= budget


def min_cost(cfg: VitConfig, rho_max: float) -> int:
    """Cost of pruning every dimension of every layer at ``rho_max``."""
    return cost(cfg, PruningPolicy.uniform(cfg.layers, rho_max, rho_max, rho_max)).total


def relaxed_cost(cfg: VitConfig, vectors: np.ndarray) -> np.ndarray:
    """Continuous cost of flattened policies, ceil replaced by the identity.

    Accepts a single (3L,) vector or a (P, 3L) stack and returns a scalar or
    a (P,) array. Never exceeds the exact cost.
    """
    v = np.asarray(vectors, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v).reshape(v.shape[0] if not single else 1, cfg.layers, 3)
    d, dh = cfg.embed_dim, cfg.head_dim
    n = np.full(v.shape[0], float(cfg.seq_len))
    total = np.full(v.shape[0], float(cfg.fixed_overhead))
    for l in range(cfg.layers):
        width = (1.0 - v[:, l, 1]) * cfg.heads * dh
        n_out = (1.0 - v[:, l, 2]) * n
        neurons = (1.0 - v[:, l, 0]) * cfg.ffn_dim
        total += 4 * n * d * width + 2 * n * n * width + 2 * n_out * d * neurons
        n = n_out
    return total[0] if single else total


def batch_cost(cfg: VitConfig, vectors: np.ndarray) -> np.ndarray:
    """Exact (ceil'd) total cost for a (P, 3L) stack of flattened policies."""
    v = np.asarray(vectors, dtype=np.float64).reshape(-1, cfg.layers, 3)

    def kept(n, r):
        return np.maximum(1, np.ceil((1.0 - r) * n - 1e-9)).astype(np.int64)

    d, dh = cfg.embed_dim, cfg.head_dim
    n = np.full(v.shape[0], cfg.seq_len, dtype=np.int64)
    total = np.full(v.shape[0], cfg.fixed_overhead, dtype=np.int64)
    for l in range(cfg.layers):
        width = kept(cfg.heads, v[:, l, 1]) * dh
        n_out = kept(n, v[:, l, 2])
        total += 4 * n * d * width + 2 * n * n * width + 2 * n_out * d * kept(cfg.ffn_dim, v[:, l, 0])
        n = n_out
    return total


def resolve_budget(cfg: VitConfig, budget: float) -> int:
    """Budgets <= 1 are fractions of the unpruned cost; larger values are absolute MACs."""
    if budget <= 0:
        raise ValueError(f"budget must be positive, got {budget}")
    if budget <= 1:
        return int(np.floor(budget * cost(cfg).total))
    return int(budget)


def format_table(name: str, breakdown: FlopsBreakdown) -> str:
    p = breakdown.parts()
    tot = p["total"]

    def g(x):
        return f"{x / 1e9:.2f}G ({100 * x / tot:.0f}%)"

    header = f"{'Model':<10} | {'Softmax-attention':<18} | {'MHSA projections':<18} | {'FFN projections':<18} | Total"
    row = (f"{name:<10} | {g(p['softmax_attention']):<18} | {g(p['mhsa_projections']):<18} | "
           f"{g(p['ffn_projections']):<18} | {tot / 1e9:.2f}G")
    return header + "\n" + row
