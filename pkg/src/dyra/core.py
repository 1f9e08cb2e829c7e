"""Domain types and numeric primitives shared by every other module."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# COCO AP_s / AP_l area thresholds
S_AP_SMALL = 32.0**2
S_AP_LARGE = 96.0**2
# representative P4 / P6 anchor areas
M_LOWER = 64.0**2
M_UPPER = 256.0**2
DEFAULT_SCALES = (32.0**2, 64.0**2, 128.0**2, 256.0**2, 512.0**2)

# gain so that the sigmoid spans sigma(-6)..sigma(6) across the size range
SIGMOID_GAIN = 12.0


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


@dataclass
class BoxRecord:
    image_id: object
    width: float
    height: float
    scale_index: int | None = None

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise DomainError(f"box sides must be positive, got {self.width}x{self.height}")

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class SizeRange:
    lower: float
    upper: float

    def __post_init__(self):
        if not (0 < self.lower < self.upper):
            raise DomainError(f"need 0 < lower < upper, got {self.lower}, {self.upper}")

    @property
    def mid(self) -> float:
        return 0.5 * (self.lower + self.upper)


@dataclass
class BalanceState:
    """Learnable range multiplier gamma plus the fixed BalanceLoss constants."""

    gamma: float = 6.8
    s_ap_small: float = S_AP_SMALL
    s_ap_large: float = S_AP_LARGE
    m_lower: float = M_LOWER
    m_upper: float = M_UPPER

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        if not self.m_lower < self.m_upper:
            raise DomainError("m_lower must be below m_upper")

    def range(self, gamma: float | None = None) -> SizeRange:
        g = self.gamma if gamma is None else gamma
        return SizeRange(g * self.s_ap_small, g * self.s_ap_large)

    def s_ap_mean(self) -> float:
        return 0.5 * (self.s_ap_small + self.s_ap_large)

    def split_area(self) -> float:
        """Mean of the size range; boxes below it form the up-scaling group."""
        return self.gamma * self.s_ap_mean()


@dataclass
class ScalerConfig:
    tau: float = 2.0
    conv_layers: int = 3
    encoder_blocks: int = 1
    hidden_dim: int = 32
    ffn_dim: int = 64
    tokens: int = 16
    thumbnail_side: int = 32
    input_mode: str = "features"

    def __post_init__(self):
        if not 0 < self.tau < 10:
            raise DomainError(f"tau must lie in (0, 10), got {self.tau}")
        if self.input_mode not in ("features", "thumbnail"):
            raise DomainError(f"unknown input mode {self.input_mode!r}")

    def min_scale(self) -> float:
        return self.tau / 10.0 * self.tau

    def max_scale(self) -> float:
        return self.tau


@dataclass(frozen=True)
class ScaleSet:
    sizes: tuple = field(default=DEFAULT_SCALES)

    def __post_init__(self):
        sizes = tuple(float(s) for s in self.sizes)
        if not sizes:
            raise DomainError("scale set must be non-empty")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise DomainError("scale sizes must be strictly increasing")
        object.__setattr__(self, "sizes", sizes)

    def __len__(self):
        return len(self.sizes)


def sigmoid(x):
    """Overflow-free logistic function for scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite input")


def saturated_sigmoid(x, size_range: SizeRange):
    """Map box areas onto [0, 1]: 0 below the range, 1 above, logistic inside.

    Inside the range the argument is centred on the range midpoint with gain
    ``12 / (upper - lower)``.
    """
    xa = np.asarray(x, dtype=np.float64)
    _check_finite(xa)
    k = SIGMOID_GAIN / (size_range.upper - size_range.lower)
    out = np.asarray(sigmoid(k * (xa - size_range.mid)), dtype=np.float64)
    out = np.where(xa > size_range.upper, 1.0, np.where(xa < size_range.lower, 0.0, out))
    return out if out.ndim else float(out)


def size_ratio(box, size_range: SizeRange):
    """Return ``(r, r_prime)`` for a box (or array of areas); ``r_prime = 1 - r``."""
    area = box.area if isinstance(box, BoxRecord) else box
    r = saturated_sigmoid(area, size_range)
    return r, 1.0 - r


def bound_scale(raw, cfg: ScalerConfig | float):
    """phi = max(sigmoid(raw), tau/10) * tau, so phi lies in [tau^2/10, tau]."""
    tau = cfg.tau if isinstance(cfg, ScalerConfig) else float(cfg)
    raw = np.asarray(raw, dtype=np.float64)
    _check_finite(raw)
    out = np.maximum(sigmoid(raw), tau / 10.0) * tau
    return out if np.ndim(out) else float(out)


def bound_scale_grad(raw, cfg: ScalerConfig | float):
    """d phi / d raw; zero where the lower clamp is active (ties go to the sigmoid branch)."""
    tau = cfg.tau if isinstance(cfg, ScalerConfig) else float(cfg)
    s = np.asarray(sigmoid(raw), dtype=np.float64)
    g = np.where(s >= tau / 10.0, s * (1.0 - s) * tau, 0.0)
    return g if g.ndim else float(g)


def assign_scale(box, scales: ScaleSet = ScaleSet()):
    """Index of the scale nearest in log-area; ties resolve to the smaller index.

    Accepts a BoxRecord or an array of areas.
    """
    area = box.area if isinstance(box, BoxRecord) else box
    logs = np.log(np.asarray(scales.sizes))
    a = np.log(np.asarray(area, dtype=np.float64))
    dist = np.abs(a[..., None] - logs)
    # argmin returns the first minimum
    idx = np.argmin(dist, axis=-1)
    if isinstance(box, BoxRecord):
        box.scale_index = int(idx)
        return int(idx)
    return idx.astype(np.int64) if idx.ndim else int(idx)


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return float("nan")
    return float(np.clip((da @ db) / denom, -1.0, 1.0))
