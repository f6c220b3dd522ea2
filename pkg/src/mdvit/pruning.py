"""Dependency-based ranking of neurons, heads and tokens, and retention plans."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import PruningPolicy, VitConfig
from .hsic import KernelConfig, dependency_scores, gram


def arg_top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties to the smaller index, sorted ascending."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 1 <= k <= s.size:
        raise ValueError(f"k={k} out of range for {s.size} scores")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    # stable sort on -s keeps equal scores in index order
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:k])


def score_neurons(trace, layer: int, output_gram: np.ndarray, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """psi_j for every FFN neuron; neuron j's features are Z[:, :, j] flattened per sample."""
    z = _trace_layer(trace.ffn, layer, "ffn")
    return dependency_scores(np.moveaxis(z, -1, 0), output_gram, cfg)


def score_heads(trace, layer: int, output_gram: np.ndarray, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """psi_h for every head; head features are its outputs mean-pooled over the head dimension."""
    z = _trace_layer(trace.heads, layer, "head")
    pooled = z.mean(axis=-1)  # (B, N, H)
    return dependency_scores(np.moveaxis(pooled, -1, 0), output_gram, cfg)


def score_tokens(tsl_input, output_gram: np.ndarray, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """psi_n for every token of a (B, N, d) TSL input; token features are Z[:, n, :]."""
    z = np.asarray(_data(tsl_input), dtype=np.float64)
    if z.ndim != 3 or z.shape[1] < 2:
        raise ValueError(f"token scoring needs a (B, N>=2, d) input, got {z.shape}")
    return dependency_scores(np.moveaxis(z, 1, 0), output_gram, cfg)


def select_tokens(scores: np.ndarray, keep: int) -> np.ndarray:
    """Class token (index 0) plus the ``keep - 1`` highest-scoring other tokens."""
    n = len(scores)
    if not 1 <= keep <= n:
        raise ValueError(f"cannot keep {keep} of {n} tokens")
    if keep == n:
        return np.arange(n)
    if keep == 1:
        return np.array([0])
    return np.concatenate([[0], 1 + arg_top_k(scores[1:], keep - 1)])


def _trace_layer(items, layer: int, what: str) -> np.ndarray:
    if items is None or not 0 <= layer < len(items) or items[layer] is None:
        raise ValueError(f"trace has no {what} features for layer {layer}")
    return items[layer]


def baseline_scores(kind: str, source, layer: int, dimension: str, seed: int = 0) -> np.ndarray:
    """Scores of the comparison criteria: ``random`` (any dimension) or ``magnitude`` (neurons).

    ``source`` is a weights mapping for magnitude; for random it may be the
    weights or a trace and is only used to size the score vector.
    """
    if kind == "magnitude":
        if dimension != "neuron":
            raise ValueError(f"magnitude criterion is only defined for neurons, not {dimension}")
        w1 = np.asarray(_data(source[f"blocks.{layer}.ffn.w1"]))
        # row-wise norm of the neuron's weights, i.e. its column of W1 (d x d')
        return np.sqrt((w1 * w1).sum(axis=0))
    if kind == "random":
        n = _unit_count(source, layer, dimension)
        rng = np.random.default_rng([seed, layer, {"neuron": 0, "head": 1, "seq": 2}[dimension]])
        return rng.uniform(size=n)
    raise ValueError(f"unknown baseline criterion {kind!r}")


def _data(x):
    return x.data if hasattr(x, "requires_grad") else x


def _unit_count(source, layer: int, dimension: str) -> int:
    if isinstance(source, dict):
        if dimension == "neuron":
            return np.shape(_data(source[f"blocks.{layer}.ffn.w1"]))[1]
        if dimension == "head":
            return np.shape(_data(source[f"blocks.{layer}.attn.wq"]))[0]
        raise ValueError("token count is not determined by weights; pass a trace")
    if dimension == "neuron":
        return source.ffn[layer].shape[-1]
    if dimension == "head":
        return source.heads[layer].shape[2]
    return source.tsl_inputs[layer].shape[1]


@dataclass
class RetentionPlan:
    """Concrete kept indices per layer: neurons, heads and tokens entering each TSL."""

    neurons: list[np.ndarray]
    heads: list[np.ndarray]
    tokens: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def counts(self) -> dict[str, list[int]]:
        return {"neuron": [len(i) for i in self.neurons], "head": [len(i) for i in self.heads],
                "seq": [len(i) for i in self.tokens]}

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"neuron": n.tolist(), "head": h.tolist(), "seq": t.tolist()}
                for n, h, t in zip(self.neurons, self.heads, self.tokens)
            ],
            **({"meta": self.meta} if self.meta else {}),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetentionPlan":
        layers = d["layers"]
        return cls([np.asarray(x["neuron"], dtype=np.int64) for x in layers],
                   [np.asarray(x["head"], dtype=np.int64) for x in layers],
                   [np.asarray(x["seq"], dtype=np.int64) for x in layers],
                   d.get("meta", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RetentionPlan):
            return NotImplemented
        pairs = zip(self.neurons + self.heads + self.tokens, other.neurons + other.heads + other.tokens)
        return (len(self.neurons) == len(other.neurons) and len(self.tokens) == len(other.tokens)
                and all(np.array_equal(a, b) for a, b in pairs))


def unit_scores(trace, output_gram: np.ndarray, kcfg: KernelConfig, criterion: str = "dependency",
                weights=None, seed: int = 0) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-layer neuron and head scores under ``criterion``."""
    layers = len(trace.ffn)
    if criterion == "dependency":
        return ([score_neurons(trace, l, output_gram, kcfg) for l in range(layers)],
                [score_heads(trace, l, output_gram, kcfg) for l in range(layers)])
    if criterion == "magnitude":
        # magnitude only ranks neurons; heads stay on the dependency criterion
        return ([baseline_scores("magnitude", weights, l, "neuron") for l in range(layers)],
                [score_heads(trace, l, output_gram, kcfg) for l in range(layers)])
    if criterion == "random":
        return ([baseline_scores("random", trace, l, "neuron", seed) for l in range(layers)],
                [baseline_scores("random", trace, l, "head", seed) for l in range(layers)])
    raise ValueError(f"unknown criterion {criterion!r}")


def build_retention_plan(cfg: VitConfig, weights, policy: PruningPolicy, images: np.ndarray,
                         kcfg: KernelConfig = KernelConfig(), criterion: str = "dependency",
                         seed: int = 0) -> RetentionPlan:
    """Score every unit on a calibration batch and keep the top ones per the policy.

    The output Gram matrix comes from the unpruned model's logits and is
    shared by all layers and dimensions. Token plans are nested: each TSL
    ranks only the tokens kept by earlier ones.
    """
    from .vit import forward, select_by_plan  # local import: vit imports this module

    policy.validate(cfg)
    full_policy = PruningPolicy.zeros(cfg.layers)
    logits, trace = forward(cfg, weights, full_policy, images, capture=True)
    output_gram = gram(logits.data, kcfg)
    n_scores, h_scores = unit_scores(trace, output_gram, kcfg, criterion, weights, seed)
    neurons = [arg_top_k(s, k) for s, k in zip(n_scores, policy.neurons_kept(cfg))]
    heads = [arg_top_k(s, k) for s, k in zip(h_scores, policy.heads_kept(cfg))]
    sub = select_by_plan(weights, neurons, heads)
    if criterion == "random":
        rng = np.random.default_rng([seed, 99])
        tokens = [select_tokens(rng.uniform(size=n), keep) for n, keep in policy.token_counts(cfg)]
    else:
        # magnitude has no token criterion; tokens are always ranked by dependency there
        _, sub_trace = forward(cfg, sub, policy, images, capture=True, output_gram=output_gram, kernel=kcfg)
        tokens = sub_trace.tokens
    return RetentionPlan(neurons, heads, [np.asarray(t) for t in tokens], {"criterion": criterion})
