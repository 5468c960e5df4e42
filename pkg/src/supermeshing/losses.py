"""Content (L1), perceptual (feature-space squared) and geometric (KL) losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import gridmath as gm
from .errors import ConfigurationError, DataError, InvariantError
from .gridmath import Tensor

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_c: float = 1.0
    lambda_p: float = 0.05
    lambda_g: float = 0.01

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and non-negative, got {value}")
        if self.lambda_c <= 0:
            raise ConfigurationError("lambda_c must be positive")


@dataclass
class LossBreakdown:
    content: float
    perceptual: float
    geometric: float
    total: float
    total_tensor: Tensor | None = None

    def as_row(self) -> dict:
        return {"content": self.content, "perceptual": self.perceptual,
                "geometric": self.geometric, "total": self.total}


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def content_loss(x: Tensor, y) -> Tensor:
    """sum |x - y| / (L * W * N) over a batch of single-channel fields."""
    y = _as_tensor(y, x)
    if x.shape != y.shape:
        raise ConfigurationError(f"content loss shape mismatch: {x.shape} vs {y.shape}")
    return gm.mean_all(gm.abs(x - y))


def perceptual_distance(fx: list[Tensor], fy: list[Tensor]) -> Tensor:
    """Mean over layers of sum (phi(x) - phi(y))^2 / (L_i * W_i * N)."""
    if len(fx) != len(fy) or not fx:
        raise ConfigurationError("perceptual distance needs matching, non-empty feature lists")
    total = None
    for a, b in zip(fx, fy):
        if a.shape != b.shape:
            raise ConfigurationError(f"feature shape mismatch: {a.shape} vs {b.shape}")
        n, _, h, w = a.shape
        term = gm.sum_all(gm.square(a - b)) * (1.0 / (h * w * n))
        total = term if total is None else total + term
    return total * (1.0 / len(fx))


def perceptual_loss(x: Tensor, y, extractor) -> Tensor:
    if not extractor.frozen:
        raise InvariantError("perceptual loss requires a frozen extractor")
    y = _as_tensor(y, x)
    with gm.no_grad():
        fy = [f.detach() for f in extractor.features(y)]
    return perceptual_distance(extractor.features(x), fy)


def geometric_loss(x_log: Tensor, y) -> Tensor:
    """sum y * (log y - x) / (L * W * N); x is a log-domain map, y a distribution."""
    y_data = y.data if isinstance(y, Tensor) else np.asarray(y)
    if np.any(y_data < 0):
        raise DataError("geometric target contains negative probabilities")
    if x_log.shape != y_data.shape:
        raise ConfigurationError(f"geometric loss shape mismatch: {x_log.shape} vs {y_data.shape}")
    y_data = y_data.astype(x_log.dtype, copy=False)
    log_y = np.log(np.maximum(y_data, PROB_FLOOR))
    n = y_data.shape[0]
    area = int(np.prod(y_data.shape[2:])) if y_data.ndim > 2 else int(np.prod(y_data.shape[1:]))
    scale = 1.0 / (area * n)
    # both terms go through the same kernels so x = log y cancels exactly
    const = gm.sum_all(Tensor(log_y * y_data, dtype=x_log.dtype)) * scale
    cross = gm.sum_all(gm.mul(x_log, Tensor(y_data, dtype=x_log.dtype))) * scale
    return const - cross


def total_loss(content: Tensor, perceptual: Tensor | None, geometric: Tensor | None,
               weights: LossWeights, use_perceptual: bool = True,
               use_geometric: bool = True) -> LossBreakdown:
    """Weighted sum of the enabled terms; disabled terms contribute zero."""
    if min(weights.lambda_c, weights.lambda_p, weights.lambda_g) < 0:
        raise ConfigurationError("loss weights must be non-negative")
    c = content.item()
    total = content * weights.lambda_c
    p = g = 0.0
    if use_perceptual and perceptual is not None:
        p = perceptual.item()
        if weights.lambda_p:
            total = total + perceptual * weights.lambda_p
    if use_geometric and geometric is not None:
        g = geometric.item()
        if weights.lambda_g:
            total = total + geometric * weights.lambda_g
    reported = weights.lambda_c * c + weights.lambda_p * p + weights.lambda_g * g
    return LossBreakdown(c, p, g, reported, total)
