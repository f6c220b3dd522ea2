"""Gaussian-kernel Gram matrices and the empirical HSIC dependency estimator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.sigma}")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _sq_dists(x: np.ndarray) -> np.ndarray:
    # x: (..., B, F) -> (..., B, B), exactly symmetric with zero diagonal
    x = np.ascontiguousarray(x)
    norms = (x * x).sum(axis=-1)
    d = np.matmul(x, np.swapaxes(x, -1, -2))
    d *= -2.0
    d += norms[..., :, None]
    d += norms[..., None, :]
    d += np.swapaxes(d, -1, -2).copy()
    d *= 0.5
    np.maximum(d, 0.0, out=d)
    b = x.shape[-2]
    d[..., np.arange(b), np.arange(b)] = 0.0
    return d


def gram(features, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """Gaussian Gram matrix over the rows of a (B, F) feature matrix.

    Higher-rank inputs are flattened per sample, so a (B, N) or (B, N, F)
    block is treated as B vectors.
    """
    x = _as_array(features)
    if x.ndim == 1:
        x = x[:, None]
    x = x.reshape(x.shape[0], -1)
    if x.shape[0] < 2:
        raise ValueError(f"gram needs at least 2 samples, got {x.shape[0]}")
    d = _sq_dists(x)
    d *= -1.0 / (2.0 * cfg.sigma**2)
    return np.exp(d, out=d)


def batched_gram(blocks: np.ndarray, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """Gram matrices for U feature blocks at once: (U, B, ...) -> (U, B, B)."""
    x = _as_array(blocks)
    x = x.reshape(x.shape[0], x.shape[1], -1)
    if x.shape[1] < 2:
        raise ValueError(f"gram needs at least 2 samples, got {x.shape[1]}")
    d = _sq_dists(x)
    d *= -1.0 / (2.0 * cfg.sigma**2)
    return np.exp(d, out=d)


def center(k: np.ndarray) -> np.ndarray:
    """C K C with C = I - 11^T / B, computed without forming C."""
    k = np.asarray(k, dtype=np.float64)
    return (k - k.mean(axis=-1, keepdims=True) - k.mean(axis=-2, keepdims=True)
            + k.mean(axis=(-2, -1), keepdims=True))


def centered_trace(k: np.ndarray, l: np.ndarray) -> float:
    """tr(K C L C) for symmetric Gram matrices of equal size."""
    k, l = np.asarray(k, dtype=np.float64), np.asarray(l, dtype=np.float64)
    if k.shape != l.shape or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"Gram size mismatch: {k.shape} vs {l.shape}")
    # tr(KCLC) = sum_ij (CKC)_ij L_ji
    return float(np.sum(center(k) * l.T))


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """Biased empirical HSIC: tr(K C L C) / (B - 1)^2."""
    b = np.shape(k)[0]
    return centered_trace(k, l) / (b - 1) ** 2


def dependency_scores(blocks, output_gram: np.ndarray, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """tr(K_u C L C) for every unit block in a stacked (U, B, ...) array.

    The (B-1)^-2 factor is dropped; it is shared by all units and does not
    change their ranking.
    """
    x = _as_array(blocks)
    output_gram = np.asarray(output_gram, dtype=np.float64)
    if x.ndim < 2 or x.shape[1] != output_gram.shape[0]:
        raise ValueError(f"unit batch size {x.shape[1:2]} does not match output Gram of size {output_gram.shape[0]}")
    m = center(output_gram)
    k = batched_gram(x, cfg)
    return k.reshape(k.shape[0], -1) @ m.T.reshape(-1)


def score_units(unit_features: Sequence, output_gram: np.ndarray, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """One dependency score per unit; each unit is a (B, F) feature block."""
    feats = [_as_array(f) for f in unit_features]
    if not feats:
        return np.zeros(0)
    b = output_gram.shape[0]
    for i, f in enumerate(feats):
        if f.shape[0] != b:
            raise ValueError(f"unit {i} has batch size {f.shape[0]}, output Gram has {b}")
    flat = [f.reshape(b, -1) for f in feats]
    if len({f.shape[1] for f in flat}) == 1:
        return dependency_scores(np.stack(flat), output_gram, cfg)
    m = center(output_gram)
    return np.array([float(np.sum(gram(f, cfg) * m.T)) for f in flat])
