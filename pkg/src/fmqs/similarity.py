"""Channel-spatial cosine similarity between feature maps.

Both granularities reduce a (C,H,W) pair to a scalar in [-1, 1]: the
channel term averages cosine similarity of flattened per-channel slices,
the spatial term averages cosine similarity of the C-length vectors at
each grid location, and the fused score mixes them with weight alpha.
Zero-norm vectors contribute a configurable constant instead of NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CsCosSimConfig:
    alpha: float = 0.5
    zero_vector_policy: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


DEFAULT_CONFIG = CsCosSimConfig()


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError(f"expected rank-3 (C,H,W) maps, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ValueError(f"feature map shapes differ: {a.shape} vs {b.shape}")


def _mean_cosine(x: np.ndarray, y: np.ndarray, zero_value: float) -> float:
    """Mean cosine over rows of two (N, D) matrices."""
    dots = (x * y).sum(axis=-1)
    nx = np.sqrt((x * x).sum(axis=-1))
    ny = np.sqrt((y * y).sum(axis=-1))
    denom = nx * ny
    ok = denom > 0.0
    cos = np.full(x.shape[0], float(zero_value))
    cos[ok] = dots[ok] / denom[ok]
    return float(cos.mean())


def channel_cossim(a, b, cfg: CsCosSimConfig = DEFAULT_CONFIG) -> float:
    """Mean over channels of cosine between flattened H*W slices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    C = a.shape[0]
    return _mean_cosine(a.reshape(C, -1), b.reshape(C, -1), cfg.zero_vector_policy)


def spatial_cossim(a, b, cfg: CsCosSimConfig = DEFAULT_CONFIG) -> float:
    """Mean over the H*W grid of cosine between C-length channel vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    C = a.shape[0]
    return _mean_cosine(a.reshape(C, -1).T, b.reshape(C, -1).T, cfg.zero_vector_policy)


def cs_cossim(a, b, cfg: CsCosSimConfig = DEFAULT_CONFIG) -> float:
    """alpha * channel term + (1 - alpha) * spatial term."""
    return cfg.alpha * channel_cossim(a, b, cfg) + (1.0 - cfg.alpha) * spatial_cossim(
        a, b, cfg
    )


def cs_cossim_batch(stack_a: np.ndarray, stack_b: np.ndarray,
                    cfg: CsCosSimConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Vectorized cs_cossim over leading batch dims of two (..., C, H, W) stacks."""
    a = np.asarray(stack_a, dtype=np.float64)
    b = np.asarray(stack_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"stack shapes differ: {a.shape} vs {b.shape}")
    lead = a.shape[:-3]
    C = a.shape[-3]
    af = a.reshape((-1, C, a.shape[-2] * a.shape[-1]))
    bf = b.reshape((-1, C, b.shape[-2] * b.shape[-1]))

    def mean_cos(ax, bx, axis):
        dots = (ax * bx).sum(axis=axis)
        na = np.sqrt((ax * ax).sum(axis=axis))
        nb = np.sqrt((bx * bx).sum(axis=axis))
        denom = na * nb
        cos = np.where(denom > 0.0, np.divide(dots, denom, where=denom > 0.0),
                       cfg.zero_vector_policy)
        return cos.mean(axis=-1)

    chan = mean_cos(af, bf, axis=2)
    spat = mean_cos(af.transpose(0, 2, 1), bf.transpose(0, 2, 1), axis=2)
    out = cfg.alpha * chan + (1.0 - cfg.alpha) * spat
    return out.reshape(lead)
