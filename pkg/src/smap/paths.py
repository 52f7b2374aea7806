"""Path counting over sampled masks and the relation-reduction loss.

The cumulative path matrix is the product ``(M^L + I) ... (M^1 + I)``; the
entry (r, c) counts unmasked routes (residual self-edges included) from input
token c to layer-L token r. Appending the aggregation mask gives the per-input
path counts into the single output node, whose sum is the network's total
number of active paths. The loss penalizes the squared deviation of the
active-path fraction from a target ``alpha``; gradients flow through the
straight-through hard masks, which are the quantity the counts are defined on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import MaskSet
from .errors import ConfigError, DimensionError


@dataclass
class PathMatrix:
    a: Tensor        # (B, n, n) cumulative counts through the attention layers
    a_out: Tensor    # (B, 1, n) counts into the output node
    total: Tensor    # (B,) sum of a_out per sample
    mu: float        # maximum possible total


def max_paths(n: int, n_layers: int) -> float:
    """All-ones mask total: n * (n+1)^L."""
    if n < 1 or n_layers < 0:
        raise ConfigError(f"max_paths needs n >= 1 and L >= 0, got n={n}, L={n_layers}")
    return float(n) * float(n + 1) ** n_layers


def path_matrix(masks: MaskSet) -> PathMatrix:
    """Cumulative path counts from the sampled (straight-through) hard masks."""
    out_mask = masks.out.hard
    b, _, n = out_mask.shape
    dtype = out_mask.data.dtype
    eye = Tensor(np.broadcast_to(np.eye(n, dtype=dtype), (b, n, n)).copy(), dtype=dtype)
    a = eye
    for lm in masks.layers:
        if lm.hard.shape != (b, n, n):
            raise DimensionError(f"layer mask shape {lm.hard.shape} != {(b, n, n)}")
        a = ad.matmul(ad.add(lm.hard, eye), a)
    a_out = ad.matmul(out_mask, a)
    total = ad.reshape(ad.tsum(a_out, axis=(-1, -2)), (b,))
    return PathMatrix(a=a, a_out=a_out, total=total,
                      mu=max_paths(n, len(masks.layers)))


def mask_loss(pm: PathMatrix, alpha: float) -> Tensor:
    """Mean squared deviation of the active-path fraction from ``alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if pm.mu <= 0:
        raise ConfigError("path matrix has non-positive maximum total")
    frac = ad.scale(pm.total, 1.0 / pm.mu)
    dev = ad.sub(frac, float(alpha))
    return ad.tmean(ad.square(dev))


def path_fraction(pm: PathMatrix) -> np.ndarray:
    """Active-path fraction per sample, as plain numbers."""
    return pm.total.data / pm.mu


def effective_input_relevance(pm: PathMatrix) -> np.ndarray:
    """Token i influences the output iff any path from it survives.

    Returns a boolean (B, n) array (or (n,) for a single sample).
    """
    rel = pm.a_out.data[:, 0, :] > 0
    return rel[0] if rel.shape[0] == 1 else rel
