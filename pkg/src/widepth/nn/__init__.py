"""Minimal numpy neural-network substrate: layers, losses, Adam, gradient checks."""
from .layers import (Concat, Conv2d, ConvTranspose2d, Dense, Flatten, Layer, LSTM, ReLU, Reshape,
                     ShapeError, Sigmoid, Transpose)
from .graph import Cache, Module, Sequential, StaleCacheError
from .losses import (LatentDistribution, bce, head_grad, kl_gaussian, mse, reparameterize)
from .optim import Adam, NonFiniteGradient, OptimizerState, adam_step
from .rng import Rng
from . import checkpoint, gradcheck

__all__ = [
    "Adam", "Cache", "Concat", "Conv2d", "ConvTranspose2d", "Dense", "Flatten", "LSTM",
    "LatentDistribution", "Layer", "Module", "NonFiniteGradient", "OptimizerState", "ReLU",
    "Reshape", "Rng", "Sequential", "ShapeError", "Sigmoid", "StaleCacheError", "Transpose",
    "adam_step", "bce", "checkpoint", "gradcheck", "head_grad", "kl_gaussian", "mse",
    "reparameterize",
]
