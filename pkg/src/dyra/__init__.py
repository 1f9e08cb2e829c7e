"""Bounded scale-factor prediction and its training losses for adaptive-resolution detection."""
from ._accel import BACKEND
from .core import (
    BalanceState,
    BoxRecord,
    DomainError,
    ScalerConfig,
    ScaleSet,
    SizeRange,
    bound_scale,
    saturated_sigmoid,
    size_ratio,
)
from .losses import balance_loss, pareto_scale_loss, scale_loss, total_loss
from .sched import ConstCosineSchedule

__version__ = "0.1.0"
