"""Losses, the Gaussian latent and the reparameterization trick.

Every loss takes ``grad=True`` to also return the gradient with respect to
its first argument, which is what the training loops feed to ``backward``.
"""
from dataclasses import dataclass

import numpy as np

BCE_EPS = 1e-7
LOG_SIGMA_MIN = float(np.log(1e-6))
LOG_SIGMA_MAX = float(np.log(1e6))


def _check_shapes(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def mse(a, b, grad=False):
    """Mean squared error over all elements (batch included)."""
    a = np.asarray(a)
    b = np.asarray(b)
    _check_shapes(a, b, "mse")
    d = a - b
    value = float(np.mean(d * d)) if d.size else 0.0
    if grad:
        return value, (2.0 / max(d.size, 1)) * d
    return value


def bce(pred, target, grad=False):
    """Binary cross-entropy averaged over all elements.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]``; the clamp has zero
    gradient outside that range.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    _check_shapes(pred, target, "bce")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    value = float(np.mean(-(target * np.log(p) + (1.0 - target) * np.log1p(-p))))
    if grad:
        inside = (pred >= BCE_EPS) & (pred <= 1.0 - BCE_EPS)
        g = (p - target) / (p * (1.0 - p)) / pred.size
        return value, g * inside
    return value


@dataclass
class LatentDistribution:
    """Diagonal Gaussian ``N(mu, sigma^2)``; batched arrays of shape (N, L) or (L,)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if np.shape(self.mu) != np.shape(self.sigma):
            raise ValueError(f"mu/sigma shape mismatch {np.shape(self.mu)} vs {np.shape(self.sigma)}")
        if not np.all(np.asarray(self.sigma) > 0):
            raise ValueError("sigma must be strictly positive")

    @classmethod
    def from_head(cls, head):
        """Split a ``(N, 2L)`` head output into mu and sigma = exp(clamped log-sigma)."""
        lat = head.shape[-1] // 2
        log_sigma = np.clip(head[..., lat:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return cls(head[..., :lat], np.exp(log_sigma))

    @property
    def dim(self):
        return np.shape(self.mu)[-1]


def head_grad(head, d_mu, d_sigma):
    """Chain gradients on (mu, sigma) back to the raw ``(N, 2L)`` head output."""
    lat = head.shape[-1] // 2
    raw = head[..., lat:]
    sigma = np.exp(np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
    inside = (raw >= LOG_SIGMA_MIN) & (raw <= LOG_SIGMA_MAX)
    return np.concatenate([d_mu, d_sigma * sigma * inside], axis=-1)


def reparameterize(dist, noise):
    """``z = mu + sigma * noise``."""
    noise = np.asarray(noise)
    if noise.shape != np.shape(dist.mu):
        raise ValueError(f"noise shape {noise.shape} != latent shape {np.shape(dist.mu)}")
    return dist.mu + dist.sigma * noise


def kl_gaussian(dist, grad=False):
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims, averaged over the batch.

    With ``grad=True`` returns ``(value, d_mu, d_sigma)``.
    """
    mu = np.asarray(dist.mu, dtype=np.float64)
    sigma = np.asarray(dist.sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    per = 0.5 * (mu * mu + sigma * sigma - 2.0 * np.log(sigma) - 1.0)
    n = mu.shape[0] if mu.ndim > 1 else 1
    value = float(per.sum() / n)
    if grad:
        dt = np.asarray(dist.mu).dtype
        return value, (mu / n).astype(dt), ((sigma - 1.0 / sigma) / n).astype(dt)
    return value
