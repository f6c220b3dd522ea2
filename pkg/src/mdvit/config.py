"""Architecture hyper-parameters and the per-layer pruning policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

DIMENSIONS = ("neuron", "head", "seq")


@dataclass(frozen=True)
class VitConfig:
    layers: int = 4
    embed_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 128
    patch_size: int = 4
    image_size: int = 16
    channels: int = 3
    num_classes: int = 8

    def __post_init__(self):
        if self.heads * self.head_dim != self.embed_dim:
            raise ValueError(f"heads * head_dim must equal embed_dim ({self.heads}*{self.head_dim} != {self.embed_dim})")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        for name, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def fixed_overhead(self) -> int:
        """Patch-embedding plus classifier MACs."""
        return self.num_patches * self.patch_dim * self.embed_dim + self.embed_dim * self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)


def tiny_config() -> VitConfig:
    return VitConfig()


def deit_small() -> VitConfig:
    return VitConfig(layers=12, embed_dim=384, heads=6, head_dim=64, ffn_dim=1536,
                     patch_size=16, image_size=224, channels=3, num_classes=1000)


def deit_base() -> VitConfig:
    return VitConfig(layers=12, embed_dim=768, heads=12, head_dim=64, ffn_dim=3072,
                     patch_size=16, image_size=224, channels=3, num_classes=1000)


PRESETS = {"tiny": tiny_config, "deit-s": deit_small, "deit-b": deit_base}


def retained(n: int, ratio: float) -> int:
    """Number of units kept out of ``n`` at pruning ratio ``ratio``: ceil((1 - ratio) n)."""
    # the 1e-9 slack stops float noise such as (1 - 0.7) * 10 = 3.0000000000000004 rounding up
    return max(1, math.ceil((1.0 - float(ratio)) * n - 1e-9))


@dataclass
class PruningPolicy:
    """Per-layer neuron (kappa), head (zeta) and token (nu) pruning ratios."""

    neuron: np.ndarray
    head: np.ndarray
    token: np.ndarray

    def __post_init__(self):
        self.neuron = np.asarray(self.neuron, dtype=np.float64).reshape(-1)
        self.head = np.asarray(self.head, dtype=np.float64).reshape(-1)
        self.token = np.asarray(self.token, dtype=np.float64).reshape(-1)
        if not (len(self.neuron) == len(self.head) == len(self.token)):
            raise ValueError("policy ratio arrays must have one entry per layer")

    @property
    def layers(self) -> int:
        return len(self.neuron)

    @classmethod
    def zeros(cls, layers: int) -> "PruningPolicy":
        return cls(np.zeros(layers), np.zeros(layers), np.zeros(layers))

    @classmethod
    def uniform(cls, layers: int, neuron: float = 0.0, head: float = 0.0, token: float = 0.0) -> "PruningPolicy":
        return cls(np.full(layers, neuron), np.full(layers, head), np.full(layers, token))

    @classmethod
    def from_vector(cls, v) -> "PruningPolicy":
        """Inverse of :meth:`to_vector` (layer-major ``[k1, z1, n1, k2, ...]``)."""
        v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
        return cls(v[:, 0], v[:, 1], v[:, 2])

    def to_vector(self) -> np.ndarray:
        return np.stack([self.neuron, self.head, self.token], axis=1).reshape(-1)

    def validate(self, cfg: VitConfig, rho_max: float | None = None) -> None:
        """Raise ValueError unless every ratio is in [0, rho_max] (or [0, 1) when rho_max is None)."""
        if self.layers != cfg.layers:
            raise ValueError(f"policy has {self.layers} layers, config has {cfg.layers}")
        if rho_max is not None and not 0 <= rho_max < 1:
            raise ValueError(f"rho_max must lie in [0, 1), got {rho_max}")
        v = self.to_vector()
        ok = np.all(np.isfinite(v)) and v.min() >= 0
        ok = ok and (v.max() < 1 if rho_max is None else v.max() <= rho_max)
        if not ok:
            bound = "1)" if rho_max is None else f"{rho_max}]"
            raise ValueError(f"policy ratios must lie in [0, {bound}: {v.tolist()}")

    def is_zero(self) -> bool:
        return not np.any(self.to_vector())

    def neurons_kept(self, cfg: VitConfig) -> list[int]:
        return [retained(cfg.ffn_dim, r) for r in self.neuron]

    def heads_kept(self, cfg: VitConfig) -> list[int]:
        return [retained(cfg.heads, r) for r in self.head]

    def token_counts(self, cfg: VitConfig) -> list[tuple[int, int]]:
        """(tokens entering MHSA, tokens leaving the TSL) for each layer."""
        n = cfg.seq_len
        out = []
        for r in self.token:
            kept = retained(n, r)
            out.append((n, kept))
            n = kept
        return out

    def to_dict(self) -> dict:
        return {"neuron": self.neuron.tolist(), "head": self.head.tolist(), "token": self.token.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPolicy":
        return cls(d["neuron"], d["head"], d["token"])

    def __eq__(self, other) -> bool:
        return isinstance(other, PruningPolicy) and np.array_equal(self.to_vector(), other.to_vector())


def dims_mask(layers: int, dims=DIMENSIONS) -> np.ndarray:
    """Boolean mask over the flattened policy vector for the active dimensions."""
    unknown = set(dims) - set(DIMENSIONS)
    if unknown:
        raise ValueError(f"unknown pruning dimension(s): {sorted(unknown)}")
    row = np.array([d in dims for d in DIMENSIONS])
    return np.tile(row, layers)
