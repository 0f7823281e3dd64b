"""
Routing module: pick an omission set per prompt.

This module contains:
- Router network and its PUDR checkpoint format
- Router dataset construction (per-set loss labels)
- Training with warmup and AdamW
- Routing and held-out evaluation
"""

from .checkpoint import load_router, save_router
from .dataset import RouterSample, build_router_dataset, split_samples
from .router_model import RouterArch, RouterModel, build_router
from .routing import RouteResult, RouterMetrics, evaluate_router, route
from .training import LabelMode, LossMode, TrainConfig, train_router

__all__ = [
    # Model
    "RouterArch",
    "RouterModel",
    "build_router",
    "load_router",
    "save_router",
    # Data
    "RouterSample",
    "build_router_dataset",
    "split_samples",
    # Training
    "LabelMode",
    "LossMode",
    "TrainConfig",
    "train_router",
    # Routing
    "RouteResult",
    "RouterMetrics",
    "evaluate_router",
    "route",
]
